"""Text-to-vector encoders and cosine similarity."""

from __future__ import annotations

import hashlib
import logging
import threading
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Protocol, Tuple, Union

import numpy as np

from .retrieval import Normalizer, normalize
from .utils.files import iter_numbered_lines

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64


class EmbeddingTableError(ValueError):
    """Raised for malformed embedding table files."""


class Encoder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Iterable[str]) -> np.ndarray: ...


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    return vector / norm if norm > 0 else vector


def _frozen(vector: np.ndarray) -> np.ndarray:
    vector.setflags(write=False)
    return vector


class _MemoizedEncoder:
    dim: int

    def __init__(self) -> None:
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _compute(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed(self, text: str) -> np.ndarray:
        """Read-only float64 vector of length ``dim``."""
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        vector = _frozen(self._compute(text))
        with self._lock:
            return self._cache.setdefault(text, vector)

    def embed_many(self, texts: Iterable[str]) -> np.ndarray:
        rows = [self.embed(text) for text in texts]
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)


class HashEncoder(_MemoizedEncoder):
    """Signed feature hashing over normalized tokens.

    Each token picks one index and a sign from a seeded hash; token vectors
    are summed and L2-normalized. Empty text maps to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, normalizer: Optional[Normalizer] = None) -> None:
        if dim < 1:
            raise ValueError(f"dim must be at least 1, got {dim}")
        super().__init__()
        self.dim = int(dim)
        self.seed = int(seed)
        self.normalizer = normalizer

    def slot(self, token: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        return (value >> 1) % self.dim, (1.0 if value & 1 else -1.0)

    def token_vector(self, token: str) -> np.ndarray:
        index, sign = self.slot(token)
        vector = np.zeros(self.dim)
        vector[index] = sign
        return vector

    def _compute(self, text: str) -> np.ndarray:
        tokens = normalize(text, self.normalizer)
        signed = np.zeros(self.dim)
        if not tokens:
            return signed
        counts = np.zeros(self.dim)
        for token in tokens:
            index, sign = self.slot(token)
            signed[index] += sign
            counts[index] += 1.0
        if not signed.any():
            # Colliding tokens cancelled out; fall back to unsigned counts.
            return _unit(counts)
        return _unit(signed)


class TableEncoder(_MemoizedEncoder):
    """Mean of per-token table vectors, L2-normalized.

    Tokens missing from the table use the fallback hash encoder's token vector.
    """

    def __init__(
        self,
        table: Mapping[str, np.ndarray],
        fallback: Optional[HashEncoder] = None,
        *,
        dim: Optional[int] = None,
        normalizer: Optional[Normalizer] = None,
    ) -> None:
        super().__init__()
        vectors = {token: np.asarray(vector, dtype=np.float64) for token, vector in table.items()}
        dims = {vector.shape for vector in vectors.values()}
        if len(dims) > 1:
            raise EmbeddingTableError(f"table vectors have inconsistent shapes {sorted(dims)}")
        if vectors:
            (shape,) = dims
            if len(shape) != 1:
                raise EmbeddingTableError(f"table vectors must be one-dimensional, got shape {shape}")
            table_dim = shape[0]
            if dim is not None and dim != table_dim:
                raise EmbeddingTableError(f"table dimension {table_dim} does not match requested dim {dim}")
        else:
            table_dim = dim if dim is not None else (fallback.dim if fallback else DEFAULT_DIM)
        if fallback is not None and fallback.dim != table_dim:
            raise EmbeddingTableError(f"fallback dim {fallback.dim} does not match table dim {table_dim}")

        self.dim = int(table_dim)
        self.table = vectors
        self.normalizer = normalizer
        self.fallback = fallback or HashEncoder(self.dim, normalizer=normalizer)

    def _compute(self, text: str) -> np.ndarray:
        tokens = normalize(text, self.normalizer)
        if not tokens:
            return np.zeros(self.dim)
        total = np.zeros(self.dim)
        for token in tokens:
            found = self.table.get(token)
            total += found if found is not None else self.fallback.token_vector(token)
        mean = total / len(tokens)
        if not mean.any():
            return self.fallback.embed(text).copy()
        return _unit(mean)


def load_embedding_table(
    path: Union[str, Path],
    *,
    seed: int = 0,
    normalizer: Optional[Normalizer] = None,
    dim: Optional[int] = None,
) -> TableEncoder:
    """Read ``token<TAB>f1 f2 ... fd`` lines into a :class:`TableEncoder`."""
    table: Dict[str, np.ndarray] = {}
    table_dim: Optional[int] = None
    for number, line in iter_numbered_lines(path):
        if not line.strip():
            continue
        token, tab, values = line.partition("\t")
        if not tab or not token.strip():
            raise EmbeddingTableError(f"{path}:{number}: expected 'token<TAB>values'")
        try:
            vector = np.array([float(value) for value in values.split()], dtype=np.float64)
        except ValueError as error:
            raise EmbeddingTableError(f"{path}:{number}: {error}") from error
        if vector.size == 0:
            raise EmbeddingTableError(f"{path}:{number}: no vector values")
        if not np.all(np.isfinite(vector)):
            raise EmbeddingTableError(f"{path}:{number}: non-finite vector value")
        if table_dim is None:
            table_dim = vector.size
        elif vector.size != table_dim:
            raise EmbeddingTableError(f"{path}:{number}: expected {table_dim} values, found {vector.size}")
        table[token.strip().lower()] = vector

    resolved_dim = table_dim if table_dim is not None else (dim or DEFAULT_DIM)
    if dim is not None and resolved_dim != dim:
        raise EmbeddingTableError(f"{path}: table dimension {resolved_dim} does not match requested dim {dim}")
    logger.info("Loaded %d embedding rows (dim=%d) from %s", len(table), resolved_dim, path)
    fallback = HashEncoder(resolved_dim, seed=seed, normalizer=normalizer)
    return TableEncoder(table, fallback, dim=resolved_dim, normalizer=normalizer)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity, 0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (norm_u * norm_v), -1.0, 1.0))


__all__ = [
    "DEFAULT_DIM",
    "EmbeddingTableError",
    "Encoder",
    "HashEncoder",
    "TableEncoder",
    "cosine",
    "load_embedding_table",
]
