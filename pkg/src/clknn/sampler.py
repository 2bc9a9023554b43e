"""Positive and hard-negative sample construction for contrastive training.

Negatives are mined against cluster centers only: rank the other tokens'
centers by distance to the anchor, keep the ``K`` nearest, pick ``N`` of
those clusters at random and draw one member from each. No entry key is
read while doing so.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clknn.datastore import ClusterIndex
from clknn.exceptions import InsufficientClustersError, UnsampleableAnchorError

METRICS = ("cosine", "l2")


@dataclass(frozen=True)
class SamplerConfig:
    M: int = 2
    N: int = 32
    K: int = 128
    seed: int = 0
    metric: str = "cosine"

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be at least 1")
        if self.K < self.N:
            raise ValueError(f"K ({self.K}) must be >= N ({self.N})")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass(frozen=True)
class SampleSet:
    anchor_index: int
    positives: np.ndarray
    negatives: np.ndarray


def sample_positives(anchor: int, anchor_token: int, ci: ClusterIndex, M: int, rng) -> np.ndarray:
    """Draw ``M`` same-token entries other than ``anchor``.

    Without replacement when the cluster has at least ``M`` other members,
    with replacement otherwise.
    """
    members = ci.members[anchor_token]
    others = members[members != anchor]
    if len(others) == 0:
        raise UnsampleableAnchorError(f"entry {anchor} is alone in cluster {anchor_token}")
    replace = len(others) < M
    return others[rng.choice(len(others), size=M, replace=replace)]


def center_distances(anchor_z: np.ndarray, centers: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Distance from one vector to each row of ``centers``.

    Cosine distance treats a zero-norm vector as orthogonal to everything
    (distance 1), so a dead anchor ranks clusters purely by token id.
    """
    centers = np.asarray(centers, dtype=np.float64)
    anchor_z = np.asarray(anchor_z, dtype=np.float64)
    if metric == "l2":
        diff = centers - anchor_z
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    norms = np.linalg.norm(centers, axis=1)
    anorm = np.linalg.norm(anchor_z)
    dots = centers @ anchor_z
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dots / (norms * anorm)
    cos[~np.isfinite(cos)] = 0.0
    return 1.0 - cos


def nearest_clusters(anchor_z, anchor_token: int, ci: ClusterIndex, K: int, metric: str = "cosine"):
    """Token ids of the ``K`` nearest nonempty clusters other than the anchor's.

    Ordered nearest first; equal distances resolve to the smaller token id.
    """
    keep = ci.center_tokens != anchor_token
    tokens = ci.center_tokens[keep]
    dist = center_distances(anchor_z, ci.centers[keep], metric)
    order = np.lexsort((tokens, dist))
    return tokens[order[:K]]


def mine_hard_negatives(anchor_z, anchor_token: int, ci: ClusterIndex, cfg: SamplerConfig, rng) -> np.ndarray:
    pool = nearest_clusters(anchor_z, anchor_token, ci, cfg.K, cfg.metric)
    if len(pool) < cfg.N:
        raise InsufficientClustersError(
            f"only {len(pool)} candidate clusters for N={cfg.N} negatives"
        )
    chosen = pool[np.sort(rng.choice(len(pool), size=cfg.N, replace=False))]
    out = np.empty(cfg.N, dtype=np.int64)
    for i, v in enumerate(chosen):
        members = ci.members[v]
        out[i] = members[rng.integers(len(members))]
    return out


def sample_set(anchor: int, anchor_token: int, anchor_z, ci: ClusterIndex, cfg: SamplerConfig, rng) -> SampleSet:
    positives = sample_positives(anchor, anchor_token, ci, cfg.M, rng)
    negatives = mine_hard_negatives(anchor_z, anchor_token, ci, cfg, rng)
    return SampleSet(anchor, positives, negatives)
