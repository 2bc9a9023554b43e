"""Feed-forward retrieval adapter trained with a multi-positive contrastive loss.

The adapter is ``z = ReLU(h W1 + b1) W2 + b2``. Training pulls same-token
outputs together and pushes hard negatives apart under a temperature-scaled
cosine score; gradients are derived by hand and flow through the anchor,
positives and negatives alike since all share the network.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from clknn.datastore import Datastore, partition_clusters
from clknn.exceptions import (
    BadMagicError,
    DegenerateVectorError,
    DimensionMismatchError,
    FormatError,
    InsufficientClustersError,
    NonFiniteError,
    TruncatedFileError,
    VersionMismatchError,
)
from clknn.sampler import SamplerConfig, sample_set

logger = logging.getLogger(__name__)

ADAPTER_MAGIC = b"CLKA"
ADAPTER_VERSION = 1
_ADAPTER_HEADER = struct.Struct("<4sIIII")


@dataclass
class AdapterParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        d, d_f = self.W1.shape
        if self.b1.shape != (d_f,) or self.W2.shape[0] != d_f or self.b2.shape != (self.W2.shape[1],):
            raise DimensionMismatchError(
                f"inconsistent adapter shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        if min(d, d_f, self.W2.shape[1]) < 1:
            raise DimensionMismatchError("adapter widths must be positive")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def copy(self) -> "AdapterParams":
        return AdapterParams(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def norm(self) -> float:
        return math.sqrt(sum(float(np.vdot(a, a)) for a in self.arrays()))

    def __eq__(self, other):
        if not isinstance(other, AdapterParams):
            return NotImplemented
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


def init_params(d: int, d_f: int, d_o: int, rng) -> AdapterParams:
    """Glorot-uniform weights, zero biases."""
    lim1 = math.sqrt(6.0 / (d + d_f))
    lim2 = math.sqrt(6.0 / (d_f + d_o))
    return AdapterParams(
        rng.uniform(-lim1, lim1, size=(d, d_f)),
        np.zeros(d_f),
        rng.uniform(-lim2, lim2, size=(d_f, d_o)),
        np.zeros(d_o),
    )


def ffn_forward(h, params: AdapterParams) -> np.ndarray:
    """Apply the adapter to one vector or to the last axis of a stack of them."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.in_dim:
        raise DimensionMismatchError(f"input width {h.shape[-1]} != adapter width {params.in_dim}")
    hidden = np.maximum(h @ params.W1 + params.b1, 0.0)
    return hidden @ params.W2 + params.b2


def cosine_score(a, b, T_prime: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine score of a zero-norm vector")
    cos = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, cos)) / T_prime


def _logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def contrastive_loss(anchor_z, positives_z, negatives_z, T_prime: float) -> float:
    """Negative log of the positive share of exp-score mass."""
    positives_z = np.atleast_2d(np.asarray(positives_z, dtype=np.float64))
    negatives_z = np.atleast_2d(np.asarray(negatives_z, dtype=np.float64))
    if len(positives_z) < 1 or len(negatives_z) < 1:
        raise ValueError("need at least one positive and one negative")
    pos = np.array([cosine_score(anchor_z, p, T_prime) for p in positives_z])
    neg = np.array([cosine_score(anchor_z, n, T_prime) for n in negatives_z])
    return float(_logsumexp(np.concatenate([pos, neg])) - _logsumexp(pos))


def batch_loss_and_grads(H: np.ndarray, M: int, params: AdapterParams, T_prime: float,
                         stop_gradient: bool = False):
    """Per-anchor losses and the gradient of their mean.

    ``H`` has shape ``(B, 1 + M + N, d)``: slot 0 is the anchor, the next
    ``M`` slots positives, the rest negatives.
    """
    H = np.asarray(H, dtype=np.float64)
    B, S, _ = H.shape
    if M < 1 or S - 1 - M < 1:
        raise ValueError("need at least one positive and one negative per anchor")
    pre = H @ params.W1 + params.b1
    act = np.maximum(pre, 0.0)
    Z = act @ params.W2 + params.b2
    norms = np.linalg.norm(Z, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("adapter produced a zero vector")
    U = Z / norms[..., None]
    u0, others = U[:, 0], U[:, 1:]
    s = np.einsum("bkd,bd->bk", others, u0) / T_prime
    lse_all = _logsumexp(s)
    lse_pos = _logsumexp(s[:, :M])
    losses = lse_all - lse_pos

    # d loss / d score: softmax over all minus softmax over positives
    g = np.exp(s - lse_all[:, None])
    g[:, :M] -= np.exp(s[:, :M] - lse_pos[:, None])
    g /= B * T_prime

    dU = np.empty_like(U)
    dU[:, 0] = np.einsum("bk,bkd->bd", g, others)
    if stop_gradient:
        dU[:, 1:] = 0.0
    else:
        dU[:, 1:] = g[..., None] * u0[:, None, :]
    dZ = (dU - U * np.sum(U * dU, axis=-1, keepdims=True)) / norms[..., None]

    dW2 = np.einsum("bsf,bso->fo", act, dZ)
    db2 = dZ.sum(axis=(0, 1))
    dpre = (dZ @ params.W2.T) * (pre > 0.0)
    dW1 = np.einsum("bsd,bsf->df", H, dpre)
    db1 = dpre.sum(axis=(0, 1))
    return losses, AdapterParams(dW1, db1, dW2, db2)


def loss_gradients(h_anchor, h_positives, h_negatives, params: AdapterParams, T_prime: float,
                   stop_gradient: bool = False):
    """Loss and exact parameter gradients for a single anchor."""
    h_positives = np.atleast_2d(np.asarray(h_positives, dtype=np.float64))
    h_negatives = np.atleast_2d(np.asarray(h_negatives, dtype=np.float64))
    stack = np.vstack([np.asarray(h_anchor, dtype=np.float64)[None, :], h_positives, h_negatives])
    losses, grads = batch_loss_and_grads(stack[None], len(h_positives), params, T_prime, stop_gradient)
    return float(losses[0]), grads


class Adam:
    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params: AdapterParams, grads: AdapterParams) -> AdapterParams:
        if self._m is None:
            self._m = [np.zeros_like(a) for a in params.arrays()]
            self._v = [np.zeros_like(a) for a in params.arrays()]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = []
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            new.append(p - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return AdapterParams(*new)


class SGD:
    def __init__(self, learning_rate=1e-2):
        self.learning_rate = learning_rate

    def step(self, params: AdapterParams, grads: AdapterParams) -> AdapterParams:
        return AdapterParams(*(p - self.learning_rate * g for p, g in zip(params.arrays(), grads.arrays())))


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


@dataclass(frozen=True)
class TrainConfig:
    M: int = 2
    N: int = 32
    K: int = 128
    T_prime: float = 0.01
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 1e-3
    refresh_interval: int = 1000
    seed: int = 0
    hidden_dim: int = 64
    out_dim: int = 32
    optimizer: str = "adam"
    stop_gradient: bool = False
    mining_metric: str = "cosine"

    def __post_init__(self):
        if self.T_prime <= 0:
            raise ValueError("T_prime must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.refresh_interval < 0:
            raise ValueError("refresh_interval must be nonnegative (0 = mine in input space)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        SamplerConfig(self.M, self.N, self.K, self.seed, self.mining_metric)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.M, self.N, self.K, self.seed, self.mining_metric)


# widths and schedule used for the original large-scale runs
LARGE_SCALE_PRESET = TrainConfig(M=2, N=32, K=128, T_prime=0.01, batch_size=32, steps=500_000,
                           hidden_dim=4096, out_dim=512)


@dataclass(frozen=True)
class LossReport:
    step: int
    loss: float
    grad_norm: float


@dataclass
class TrainResult:
    params: AdapterParams
    log: list[LossReport] = field(default_factory=list)


def train_adapter(ds: Datastore, cfg: TrainConfig, params: AdapterParams | None = None) -> TrainResult:
    """Optimise the adapter on ``ds`` for ``cfg.steps`` batches.

    Anchors are drawn uniformly from entries whose cluster has another
    member. With ``refresh_interval == 0`` negatives are mined once in the
    input space; otherwise centers are recomputed in adapter-output space
    every ``refresh_interval`` steps.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty datastore")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(ds.dim, cfg.hidden_dim, cfg.out_dim, rng)
    elif params.in_dim != ds.dim:
        raise DimensionMismatchError(f"adapter width {params.in_dim} != datastore dim {ds.dim}")
    result = TrainResult(params.copy())
    if cfg.steps == 0:
        return result

    H = ds.keys64()
    ci = partition_clusters(ds)
    if len(ci.center_tokens) - 1 < cfg.N:
        raise InsufficientClustersError(
            f"{len(ci.center_tokens)} nonempty clusters cannot supply N={cfg.N} negatives"
        )
    sizes = np.array([len(m) for m in ci.members])
    eligible = np.flatnonzero(sizes[ds.tokens] >= 2)
    if len(eligible) == 0:
        raise ValueError("every cluster is a singleton; no anchor has a positive")

    scfg = cfg.sampler_config()
    opt = OPTIMIZERS[cfg.optimizer](learning_rate=cfg.learning_rate)
    input_space = cfg.refresh_interval == 0
    width = 1 + cfg.M + cfg.N
    for step in range(cfg.steps):
        if not input_space and step % cfg.refresh_interval == 0:
            ci = ci.refreshed(ffn_forward(H, params))
        anchors = rng.choice(eligible, size=cfg.batch_size, replace=len(eligible) < cfg.batch_size)
        anchor_vecs = H[anchors] if input_space else ffn_forward(H[anchors], params)
        idx = np.empty((cfg.batch_size, width), dtype=np.int64)
        for b, a in enumerate(anchors):
            ss = sample_set(int(a), int(ds.tokens[a]), anchor_vecs[b], ci, scfg, rng)
            idx[b, 0] = a
            idx[b, 1:1 + cfg.M] = ss.positives
            idx[b, 1 + cfg.M:] = ss.negatives
        Hb = H[idx]
        # rows where any vector maps to exactly zero have no cosine; drop them
        live = np.all(np.linalg.norm(ffn_forward(Hb, params), axis=-1) > 0.0, axis=1)
        if not live.any():
            raise DegenerateVectorError(f"every sample in batch {step} maps to a zero vector")
        losses, grads = batch_loss_and_grads(Hb[live], cfg.M, params, cfg.T_prime, cfg.stop_gradient)
        report = LossReport(step, float(losses.mean()), grads.norm())
        if not math.isfinite(report.loss):
            raise NonFiniteError(f"loss became non-finite at step {step}")
        params = opt.step(params, grads)
        result.log.append(report)
        if step % 500 == 0:
            logger.debug("step %d loss %.5f grad_norm %.5f", step, report.loss, report.grad_norm)
    result.params = params
    return result


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "grad_norm"])
        for r in log:
            writer.writerow([r.step, repr(r.loss), repr(r.grad_norm)])


def save_adapter(params: AdapterParams, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_ADAPTER_HEADER.pack(ADAPTER_MAGIC, ADAPTER_VERSION,
                                      params.in_dim, params.hidden_dim, params.out_dim))
        for a in params.arrays():
            fh.write(a.astype("<f8").tobytes())
    os.replace(tmp, path)


def read_adapter_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_ADAPTER_HEADER.size)
    return _parse_adapter_header(raw)


def _parse_adapter_header(raw: bytes) -> dict:
    if len(raw) >= 4 and raw[:4] != ADAPTER_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {ADAPTER_MAGIC!r}")
    if len(raw) < _ADAPTER_HEADER.size:
        raise TruncatedFileError("file shorter than adapter header")
    _, version, d, d_f, d_o = _ADAPTER_HEADER.unpack(raw[:_ADAPTER_HEADER.size])
    if version != ADAPTER_VERSION:
        raise VersionMismatchError(f"adapter format version {version}, expected {ADAPTER_VERSION}")
    return {"d": d, "d_f": d_f, "d_o": d_o}


def load_adapter(path) -> AdapterParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = _parse_adapter_header(raw)
    d, d_f, d_o = head["d"], head["d_f"], head["d_o"]
    shapes = [(d, d_f), (d_f,), (d_f, d_o), (d_o,)]
    expected = _ADAPTER_HEADER.size + 8 * sum(math.prod(s) for s in shapes)
    if len(raw) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FormatError("trailing bytes after adapter payload")
    offset = _ADAPTER_HEADER.size
    arrays = []
    for shape in shapes:
        n = math.prod(shape)
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy())
        offset += 8 * n
    return AdapterParams(*arrays)


class ContrastiveAdapter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` trains the adapter, ``transform`` applies it.

    Parameters mirror :class:`TrainConfig`; ``y`` holds integer token ids.
    """

    def __init__(self, hidden_dim=64, out_dim=32, n_positives=2, n_negatives=32,
                 n_nearest_clusters=128, temperature=0.01, batch_size=32, max_steps=2000,
                 learning_rate=1e-3, refresh_interval=1000, optimizer="adam",
                 stop_gradient=False, mining_metric="cosine", random_state=0):
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.n_positives = n_positives
        self.n_negatives = n_negatives
        self.n_nearest_clusters = n_nearest_clusters
        self.temperature = temperature
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.refresh_interval = refresh_interval
        self.optimizer = optimizer
        self.stop_gradient = stop_gradient
        self.mining_metric = mining_metric
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        return TrainConfig(
            M=self.n_positives, N=self.n_negatives, K=self.n_nearest_clusters,
            T_prime=self.temperature, batch_size=self.batch_size, steps=self.max_steps,
            learning_rate=self.learning_rate, refresh_interval=self.refresh_interval,
            seed=self.random_state, hidden_dim=self.hidden_dim, out_dim=self.out_dim,
            optimizer=self.optimizer, stop_gradient=self.stop_gradient,
            mining_metric=self.mining_metric,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        ds = Datastore(X, y, int(y.max()) + 1)
        result = train_adapter(ds, self.to_config())
        self.params_ = result.params
        self.training_log_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return ffn_forward(X, self.params_)

    @classmethod
    def from_params(cls, params: AdapterParams, **kwargs) -> "ContrastiveAdapter":
        est = cls(hidden_dim=params.hidden_dim, out_dim=params.out_dim, **kwargs)
        est.params_ = params
        est.training_log_ = []
        est.n_features_in_ = params.in_dim
        return est
