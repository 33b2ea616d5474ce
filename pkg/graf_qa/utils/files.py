"""File handling helpers for graf_qa."""

from __future__ import annotations

import contextlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterator, Tuple, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]


def atomic_write_text(path: PathLike, text: str, *, encoding: str = "utf-8") -> None:
    """Write ``text`` to ``path`` through a temp file and ``os.replace``."""
    target = Path(path)
    if target.parent and not target.parent.exists():
        target.parent.mkdir(parents=True, exist_ok=True)

    tmp_fd, tmp_path = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "w", encoding=encoding, newline="") as handle:
            handle.write(text)
        os.replace(tmp_path, target)
    except Exception:
        with contextlib.suppress(OSError):
            os.unlink(tmp_path)
        raise


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Binary twin of :func:`atomic_write_text`."""
    target = Path(path)
    if target.parent and not target.parent.exists():
        target.parent.mkdir(parents=True, exist_ok=True)

    tmp_fd, tmp_path = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, target)
    except Exception:
        with contextlib.suppress(OSError):
            os.unlink(tmp_path)
        raise


def iter_numbered_lines(path: PathLike, *, encoding: str = "utf-8") -> Iterator[Tuple[int, str]]:
    """Yield ``(line_number, line)`` pairs, 1-based, without trailing newlines."""
    with open(path, "r", encoding=encoding) as handle:
        for number, raw in enumerate(handle, start=1):
            yield number, raw.rstrip("\r\n")


def read_documents(path: PathLike) -> list[str]:
    """Read a one-document-per-line corpus file, skipping blank lines."""
    return [line for _, line in iter_numbered_lines(path) if line.strip()]


__all__ = ["atomic_write_bytes", "atomic_write_text", "iter_numbered_lines", "read_documents"]
