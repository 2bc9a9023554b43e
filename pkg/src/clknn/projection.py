"""PCA reduction followed by unit normalization of retrieval vectors."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from clknn.exceptions import (
    BadMagicError,
    DegenerateVectorError,
    DimensionMismatchError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)

PCA_MAGIC = b"CLKP"
PCA_VERSION = 1
_PCA_HEADER = struct.Struct("<4sIII")
# projections shorter than this have no usable direction
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PcaModel):
            return NotImplemented
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(
                (self.mean, self.components, self.explained_variance),
                (other.mean, other.components, other.explained_variance),
            )
        )


def fit_pca(vectors, p: int) -> PcaModel:
    """Top-``p`` eigenvectors of the sample covariance (ddof=1).

    Each component's sign is fixed so its largest-magnitude coordinate is
    positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("PCA needs at least two samples")
    d_o = X.shape[1]
    if not 1 <= p <= d_o:
        raise DimensionMismatchError(f"p={p} must lie in [1, {d_o}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:p]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(p), pivot])
    comps *= signs[:, None]
    return PcaModel(mean, comps, evals)


def pca_project(x, model: PcaModel) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise DimensionMismatchError(f"width {x.shape[-1]} != PCA input width {model.in_dim}")
    return (x - model.mean) @ model.components.T


def project_normalize(x, model: PcaModel) -> np.ndarray:
    """``g(x)``: PCA projection scaled to unit length; accepts one vector or a stack."""
    y = pca_project(x, model)
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateVectorError("projection has (near) zero norm")
    return y / norms


def project_normalize_safe(X, model: PcaModel):
    """Batch ``g`` that flags degenerate rows instead of raising.

    Returns ``(G, ok)``; rows where ``ok`` is False are left as zeros.
    """
    Y = pca_project(np.atleast_2d(X), model)
    norms = np.linalg.norm(Y, axis=-1)
    ok = norms >= DEGENERATE_NORM
    G = np.zeros_like(Y)
    G[ok] = Y[ok] / norms[ok, None]
    return G, ok


def save_pca(model: PcaModel, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PCA_HEADER.pack(PCA_MAGIC, PCA_VERSION, model.in_dim, model.n_components))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(model.components.astype("<f8").tobytes())
        fh.write(model.explained_variance.astype("<f8").tobytes())
    os.replace(tmp, path)


def read_pca_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_PCA_HEADER.size)
    return _parse_pca_header(raw)


def _parse_pca_header(raw: bytes) -> dict:
    if len(raw) >= 4 and raw[:4] != PCA_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {PCA_MAGIC!r}")
    if len(raw) < _PCA_HEADER.size:
        raise TruncatedFileError("file shorter than PCA header")
    _, version, d_o, p = _PCA_HEADER.unpack(raw[:_PCA_HEADER.size])
    if version != PCA_VERSION:
        raise VersionMismatchError(f"PCA format version {version}, expected {PCA_VERSION}")
    return {"d_o": d_o, "p": p}


def load_pca(path) -> PcaModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = _parse_pca_header(raw)
    d_o, p = head["d_o"], head["p"]
    expected = _PCA_HEADER.size + 8 * (d_o + p * d_o + p)
    if len(raw) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError("trailing bytes after PCA payload")
    off = _PCA_HEADER.size
    mean = np.frombuffer(raw, "<f8", d_o, off).copy()
    off += 8 * d_o
    comps = np.frombuffer(raw, "<f8", p * d_o, off).reshape(p, d_o).copy()
    off += 8 * p * d_o
    var = np.frombuffer(raw, "<f8", p, off).copy()
    return PcaModel(mean, comps, var)


class PCANormalizer(TransformerMixin, BaseEstimator):
    """Fit PCA on retrieval vectors; ``transform`` returns unit-norm projections."""

    def __init__(self, n_components=128):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = fit_pca(X, min(self.n_components, X.shape[1]))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return project_normalize(X, self.model_)

    @property
    def explained_variance_(self):
        check_is_fitted(self, "model_")
        return self.model_.explained_variance

    @classmethod
    def from_model(cls, model: PcaModel) -> "PCANormalizer":
        est = cls(n_components=model.n_components)
        est.model_ = model
        est.n_features_in_ = model.in_dim
        return est


def orthonormality_error(model: PcaModel) -> float:
    C = model.components
    return float(np.max(np.abs(C @ C.T - np.eye(C.shape[0]))))


def reconstruction_error(X, model: PcaModel) -> float:
    """Max abs error of reconstructing centered ``X`` from its projection."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - model.mean
    rec = (Xc @ model.components.T) @ model.components
    return float(np.max(np.abs(rec - Xc))) if X.size else 0.0

