"""Exact k-nearest-neighbor search and retrieval-based token distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from clknn.datastore import Datastore
from clknn.exceptions import DimensionMismatchError

METRICS = ("l2", "ip")
# tolerance on |score| <= 1 for normalized inner products
IP_RANGE_TOL = 1e-9
_CHUNK_BYTES = 64 * 2**20


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 8
    T: float = 0.1
    lam: float = 0.5
    metric: str = "ip"
    use_adaptive_lambda: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass(frozen=True)
class NeighborList:
    """Best-first neighbors: ascending L2 distance or descending inner product."""

    indices: np.ndarray
    scores: np.ndarray
    tokens: np.ndarray

    def __len__(self):
        return len(self.indices)


def _primary(Q: np.ndarray, keys: np.ndarray, metric: str) -> np.ndarray:
    """Sort key per (query, entry): squared distance, or negated inner product."""
    if metric == "ip":
        return -(Q @ keys.T)
    diff = keys[None, :, :] - Q[:, None, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def knn_search_batch(queries, keys, k: int, metric: str = "l2"):
    """Exact top-k for every row of ``queries``.

    Returns ``(indices, scores)`` of shape ``(n_queries, min(k, n))``. Ties
    on the score resolve to the lower entry index.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    keys = np.asarray(keys, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if keys.ndim != 2 or len(keys) == 0:
        raise ValueError("cannot search an empty key set")
    if Q.shape[1] != keys.shape[1]:
        raise DimensionMismatchError(f"query width {Q.shape[1]} != key width {keys.shape[1]}")
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(keys)
    k = min(k, n)
    per_query = 8 * n * (keys.shape[1] if metric == "l2" else 1)
    chunk = max(1, _CHUNK_BYTES // per_query)
    out_idx = np.empty((len(Q), k), dtype=np.int64)
    out_score = np.empty((len(Q), k), dtype=np.float64)
    for start in range(0, len(Q), chunk):
        prim = _primary(Q[start:start + chunk], keys, metric)
        kth = np.partition(prim, k - 1, axis=1)[:, k - 1]
        for r, row in enumerate(prim):
            cand = np.flatnonzero(row <= kth[r])
            sel = cand[np.lexsort((cand, row[cand]))[:k]]
            out_idx[start + r] = sel
            out_score[start + r] = row[sel]
    if metric == "ip":
        out_score = -out_score
    else:
        out_score = np.sqrt(out_score)
    return out_idx, out_score


def knn_search(query, ds: Datastore, k: int, metric: str = "l2") -> NeighborList:
    """Exact search; L2 scores are Euclidean distances, IP scores inner products."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise DimensionMismatchError("query must be a single vector")
    if len(ds) == 0:
        raise ValueError("cannot search an empty datastore")
    idx, scores = knn_search_batch(query[None], ds.keys64(), k, metric)
    return NeighborList(idx[0], scores[0], ds.tokens[idx[0]])


def _token_mass(tokens, logits, vocab_size: int) -> np.ndarray:
    w = np.exp(logits - logits.max())
    p = np.bincount(np.asarray(tokens, dtype=np.int64), weights=w, minlength=vocab_size)
    return p / p.sum()


def retrieval_distribution_l2(neighbors: NeighborList, T: float, vocab_size: int) -> np.ndarray:
    if len(neighbors) == 0:
        raise ValueError("no neighbors to score")
    return _token_mass(neighbors.tokens, -np.asarray(neighbors.scores, dtype=np.float64) / T, vocab_size)


def check_ip_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(np.abs(scores) > 1.0 + IP_RANGE_TOL):
        raise ValueError("normalized inner-product scores must lie in [-1, 1]")
    return scores


def retrieval_distribution_ip(neighbors: NeighborList, T: float, vocab_size: int) -> np.ndarray:
    if len(neighbors) == 0:
        raise ValueError("no neighbors to score")
    scores = check_ip_scores(neighbors.scores)
    return _token_mass(neighbors.tokens, scores / T, vocab_size)


def retrieval_distribution(neighbors: NeighborList, T: float, vocab_size: int, metric: str) -> np.ndarray:
    if metric == "ip":
        return retrieval_distribution_ip(neighbors, T, vocab_size)
    return retrieval_distribution_l2(neighbors, T, vocab_size)


def adaptive_lambda(neighbors: NeighborList, lam: float) -> float:
    """Scale ``lam`` by the mean neighbor score, clamped into ``[0, lam]``."""
    scores = check_ip_scores(neighbors.scores)
    conf = min(1.0, max(0.0, float(scores.mean())))
    return lam * conf


def interpolate(p_c, p_r, lambda_eff: float) -> np.ndarray:
    p_c = np.asarray(p_c, dtype=np.float64)
    p_r = np.asarray(p_r, dtype=np.float64)
    if p_c.shape != p_r.shape:
        raise DimensionMismatchError(f"vocab mismatch {p_c.shape} vs {p_r.shape}")
    if not 0.0 <= lambda_eff <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    return (1.0 - lambda_eff) * p_c + lambda_eff * p_r


class KNNRetriever(ClassifierMixin, BaseEstimator):
    """Exact kNN classifier over a datastore; ``predict_proba`` returns p_r."""

    def __init__(self, n_neighbors=8, temperature=0.1, metric="ip", vocab_size=None):
        self.n_neighbors = n_neighbors
        self.temperature = temperature
        self.metric = metric
        self.vocab_size = vocab_size

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        V = self.vocab_size or int(y.max()) + 1
        self.datastore_ = Datastore(X, y, V)
        self.classes_ = np.arange(V)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_datastore(cls, ds: Datastore, **kwargs) -> "KNNRetriever":
        est = cls(vocab_size=ds.vocab_size, **kwargs)
        est.datastore_ = ds
        est.classes_ = np.arange(ds.vocab_size)
        est.n_features_in_ = ds.dim
        return est

    def kneighbors(self, X):
        check_is_fitted(self, "datastore_")
        X = check_array(X, dtype=np.float64)
        return knn_search_batch(X, self.datastore_.keys64(), self.n_neighbors, self.metric)

    def predict_proba(self, X):
        idx, scores = self.kneighbors(X)
        tokens = self.datastore_.tokens[idx]
        V = self.datastore_.vocab_size
        out = np.empty((len(idx), V))
        for i in range(len(idx)):
            out[i] = retrieval_distribution(NeighborList(idx[i], scores[i], tokens[i]),
                                            self.temperature, V, self.metric)
        return out

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)
