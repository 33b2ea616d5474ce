"""Utility package for graf_qa."""

__all__ = []
