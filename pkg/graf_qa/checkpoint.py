"""Parameter checkpoints as a single ``.npz`` archive."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from .gat import GatParams
from .scorer import ScorerParams
from .utils.files import atomic_write_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be written, read, or validated."""


@dataclass
class Checkpoint:
    gat: GatParams
    scorer: ScorerParams
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    gat: GatParams,
    scorer: ScorerParams,
    meta: Optional[Mapping[str, Any]] = None,
) -> None:
    """Write dims, heads, leaky slope, all parameter arrays, and JSON metadata."""
    if scorer.dim != gat.d_out:
        raise CheckpointError(f"scorer dim {scorer.dim} does not match GAT output dim {gat.d_out}")
    try:
        meta_json = json.dumps(dict(meta or {}), sort_keys=True)
    except (TypeError, ValueError) as error:
        raise CheckpointError(f"{path}: metadata is not JSON serialisable: {error}") from error

    arrays = {f"gat_{name}": array for name, array in gat.arrays().items()}
    arrays.update({f"scorer_{name}": array for name, array in scorer.arrays().items()})
    buffer = io.BytesIO()
    np.savez(
        buffer,
        format_version=np.array(FORMAT_VERSION),
        heads=np.array(gat.heads),
        d_in=np.array(gat.d_in),
        d_out=np.array(gat.d_out),
        leaky_slope=np.array(gat.leaky_slope),
        meta_json=np.array(meta_json),
        **arrays,
    )
    try:
        atomic_write_bytes(path, buffer.getvalue())
    except OSError as error:
        raise CheckpointError(f"{path}: cannot write checkpoint: {error}") from error
    logger.info("Saved checkpoint to %s (heads=%d, dim=%d)", path, gat.heads, gat.d_out)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as archive:
            data = {name: archive[name] for name in archive.files}
    except FileNotFoundError as error:
        raise CheckpointError(f"{path}: checkpoint not found") from error
    except (OSError, ValueError, zipfile.BadZipFile) as error:
        raise CheckpointError(f"{path}: not a checkpoint archive: {error}") from error

    version = int(data.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version}")
    try:
        gat = GatParams(
            W_N=data["gat_W_N"],
            W_E=data["gat_W_E"],
            a_N=data["gat_a_N"],
            a_E=data["gat_a_E"],
            leaky_slope=float(data["leaky_slope"]),
        )
        scorer = ScorerParams(
            W_Q=data["scorer_W_Q"],
            W_K=data["scorer_W_K"],
            W_V=data["scorer_W_V"],
            w_final=data["scorer_w_final"],
        )
        meta = json.loads(str(data["meta_json"]))
    except KeyError as error:
        raise CheckpointError(f"{path}: missing array {error.args[0]!r}") from error
    except ValueError as error:
        raise CheckpointError(f"{path}: invalid checkpoint contents: {error}") from error

    if (gat.heads, gat.d_in, gat.d_out) != (int(data["heads"]), int(data["d_in"]), int(data["d_out"])):
        raise CheckpointError(f"{path}: recorded dimensions do not match the stored arrays")
    if scorer.dim != gat.d_out:
        raise CheckpointError(f"{path}: scorer dim {scorer.dim} does not match GAT output dim {gat.d_out}")

    logger.info("Loaded checkpoint from %s (heads=%d, dim=%d)", path, gat.heads, gat.d_out)
    return Checkpoint(gat, scorer, meta)


__all__ = ["Checkpoint", "CheckpointError", "FORMAT_VERSION", "load_checkpoint", "save_checkpoint"]
