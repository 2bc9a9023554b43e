"""Key/value datastore of word-labeled context vectors.

Keys are held as 32-bit floats (the on-disk precision); anything that does
arithmetic on them should go through :meth:`Datastore.keys64`.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from clknn.exceptions import (
    BadMagicError,
    DimensionMismatchError,
    FormatError,
    NonFiniteError,
    TokenRangeError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"CLKN"
FORMAT_VERSION = 1
# magic, version u32, count u64, dim u32, vocab_size u32
_HEADER = struct.Struct("<4sIQII")
HEADER_SIZE = _HEADER.size


class Entry(NamedTuple):
    key: np.ndarray
    token: int


@dataclass(frozen=True, eq=False)
class Datastore:
    """Ordered (key, token) pairs plus their shape metadata.

    Arrays are made read-only at construction; entry order is identity for
    every downstream tie-break.
    """

    keys: np.ndarray
    tokens: np.ndarray
    vocab_size: int

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if keys.ndim != 2:
            raise DimensionMismatchError(f"keys must be 2-D, got shape {keys.shape}")
        if tokens.shape != (keys.shape[0],):
            raise DimensionMismatchError(
                f"{tokens.shape[0] if tokens.ndim else 0} tokens for {keys.shape[0]} keys"
            )
        if self.vocab_size < 1:
            raise TokenRangeError("vocab_size must be positive")
        if keys.shape[1] < 1:
            raise DimensionMismatchError("dim must be positive")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise TokenRangeError(f"token ids must lie in [0, {self.vocab_size})")
        if not np.isfinite(keys).all():
            raise NonFiniteError("datastore keys must be finite")
        keys.setflags(write=False)
        tokens.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "tokens", tokens)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.keys.shape[0]

    def __getitem__(self, i: int) -> Entry:
        return Entry(self.keys[i], int(self.tokens[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Datastore):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.keys.shape == other.keys.shape
            and self.keys.tobytes() == other.keys.tobytes()
            and np.array_equal(self.tokens, other.tokens)
        )

    __hash__ = None

    def keys64(self) -> np.ndarray:
        return self.keys.astype(np.float64)

    def with_keys(self, keys: np.ndarray) -> "Datastore":
        """Same tokens and order, new keys (any width)."""
        return Datastore(keys, self.tokens, self.vocab_size)


def build_datastore(
    pairs: Iterable[tuple[Sequence[float], int]], dim: int, vocab_size: int
) -> Datastore:
    pairs = list(pairs)
    keys = np.empty((len(pairs), dim), dtype=np.float64)
    tokens = np.empty(len(pairs), dtype=np.int64)
    for i, (vec, tok) in enumerate(pairs):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise DimensionMismatchError(f"entry {i}: expected width {dim}, got {vec.shape}")
        if not np.isfinite(vec).all():
            raise NonFiniteError(f"entry {i} has non-finite components")
        if not 0 <= int(tok) < vocab_size:
            raise TokenRangeError(f"entry {i}: token {tok} outside [0, {vocab_size})")
        keys[i] = vec
        tokens[i] = int(tok)
    return Datastore(keys, tokens, vocab_size)


@dataclass(frozen=True, eq=False)
class ClusterIndex:
    """Per-token member lists and the mean key of every nonempty cluster.

    ``center_tokens[j]`` names the token whose center is row ``j`` of
    ``centers``; empty tokens have no row.
    """

    members: tuple[np.ndarray, ...]
    center_tokens: np.ndarray
    centers: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.members)

    @property
    def nonempty_tokens(self) -> frozenset[int]:
        return frozenset(int(v) for v in self.center_tokens)

    def size(self, token: int) -> int:
        return len(self.members[token])

    def center(self, token: int) -> np.ndarray:
        j = np.searchsorted(self.center_tokens, token)
        if j == len(self.center_tokens) or self.center_tokens[j] != token:
            raise KeyError(f"token {token} has an empty cluster")
        return self.centers[j]

    def refreshed(self, keys: np.ndarray) -> "ClusterIndex":
        """Recompute centers from ``keys`` (aligned with entries) keeping membership."""
        return _build_index(self.members, self.center_tokens, np.asarray(keys, dtype=np.float64))


def _build_index(members, center_tokens, keys) -> ClusterIndex:
    centers = np.empty((len(center_tokens), keys.shape[1]), dtype=np.float64)
    for j, v in enumerate(center_tokens):
        centers[j] = keys[members[v]].mean(axis=0)
    centers.setflags(write=False)
    return ClusterIndex(members, center_tokens, centers)


def partition_clusters(ds: Datastore, keys: np.ndarray | None = None) -> ClusterIndex:
    """Split entry indices by token and average each cluster's keys.

    ``keys`` lets the caller supply a different space (e.g. adapter outputs)
    aligned row-for-row with ``ds``.
    """
    if len(ds) == 0:
        raise ValueError("cannot partition an empty datastore")
    keys = ds.keys64() if keys is None else np.asarray(keys, dtype=np.float64)
    if keys.shape[0] != len(ds):
        raise DimensionMismatchError("keys must align with datastore entries")
    order = np.argsort(ds.tokens, kind="stable")
    counts = np.bincount(ds.tokens, minlength=ds.vocab_size)
    groups = np.split(order, np.cumsum(counts)[:-1])
    members = tuple(g.astype(np.int64) for g in groups)
    for m in members:
        m.setflags(write=False)
    center_tokens = np.flatnonzero(counts)
    center_tokens.setflags(write=False)
    return _build_index(members, center_tokens, keys)


def transform_datastore(ds: Datastore, params) -> Datastore:
    """Map every key through the adapter; tokens and order are untouched."""
    from clknn.adapter import ffn_forward

    if ds.dim != params.in_dim:
        raise DimensionMismatchError(
            f"datastore dim {ds.dim} does not match adapter input width {params.in_dim}"
        )
    return ds.with_keys(ffn_forward(ds.keys64(), params))


def save_datastore(ds: Datastore, path) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), ds.dim, ds.vocab_size)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(ds.keys.astype("<f4").tobytes())
        fh.write(ds.tokens.astype("<u4").tobytes())
    os.replace(tmp, path)


def read_header(path) -> dict:
    """Decode only the fixed-size header (cheap pre-flight dimension checks)."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw)


def _parse_header(raw: bytes) -> dict:
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError("file shorter than datastore header")
    _, version, count, dim, vocab_size = _HEADER.unpack(raw[:HEADER_SIZE])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"datastore format version {version}, expected {FORMAT_VERSION}")
    return {"count": count, "dim": dim, "vocab_size": vocab_size}


def load_datastore(path) -> Datastore:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = _parse_header(raw)
    n, dim = head["count"], head["dim"]
    key_bytes = n * dim * 4
    expected = HEADER_SIZE + key_bytes + n * 4
    if len(raw) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after datastore payload")
    keys = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=HEADER_SIZE).reshape(n, dim)
    tokens = np.frombuffer(raw, dtype="<u4", count=n, offset=HEADER_SIZE + key_bytes)
    return Datastore(keys.astype(np.float32), tokens.astype(np.int64), head["vocab_size"])
