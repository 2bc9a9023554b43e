"""Synthetic datastores, a toy base predictor and the evaluation harness.

Contexts for token ``v`` are Gaussian around a per-token center; token
frequencies follow a Zipf law. The toy predictor is a multinomial logistic
model playing the role of the translation model's own output distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from clknn.adapter import AdapterParams, TrainConfig, ffn_forward, train_adapter
from clknn.datastore import Datastore
from clknn.exceptions import DimensionMismatchError
from clknn.projection import PcaModel, fit_pca, project_normalize_safe
from clknn.retrieval import (
    NeighborList,
    RetrievalConfig,
    adaptive_lambda,
    interpolate,
    knn_search_batch,
    retrieval_distribution,
)

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 50
    dim: int = 32
    zipf_exponent: float = 1.0
    cluster_spread: float = 0.8
    center_scale: float = 1.0
    train_count: int = 20000
    heldout_count: int = 2000
    seed: int = 0
    # per-coordinate stddev of the in-domain center offset, in units of cluster_spread
    domain_shift: float = 0.5

    def __post_init__(self):
        if min(self.vocab_size, self.dim, self.train_count, self.heldout_count) < 1:
            raise ValueError("all counts must be at least 1")
        if self.cluster_spread <= 0 or self.center_scale <= 0:
            raise ValueError("spreads must be positive")
        if self.zipf_exponent < 0 or self.domain_shift < 0:
            raise ValueError("zipf_exponent and domain_shift must be nonnegative")


def zipf_probs(vocab_size: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    w = ranks ** -exponent
    return w / w.sum()


def _centers(cfg: SynthConfig, rng) -> np.ndarray:
    return cfg.center_scale * rng.standard_normal((cfg.vocab_size, cfg.dim))


def _draw(rng, centers, probs, count, spread):
    tokens = rng.choice(len(probs), size=count, p=probs)
    keys = centers[tokens] + spread * rng.standard_normal((count, centers.shape[1]))
    return Datastore(keys, tokens, len(probs))


def generate_synth(cfg: SynthConfig) -> tuple[Datastore, Datastore]:
    """Train and heldout stores drawn independently around shared centers."""
    rng = np.random.default_rng(cfg.seed)
    centers = _centers(cfg, rng)
    probs = zipf_probs(cfg.vocab_size, cfg.zipf_exponent)
    train = _draw(rng, centers, probs, cfg.train_count, cfg.cluster_spread)
    heldout = _draw(rng, centers, probs, cfg.heldout_count, cfg.cluster_spread)
    return train, heldout


def generate_domain_shift(cfg: SynthConfig) -> tuple[Datastore, Datastore, Datastore]:
    """``(general, domain_store, domain_heldout)``.

    ``general`` uses the original centers and is what the base predictor
    learns from; the domain store and its queries share centers moved by a
    Gaussian offset of stddev ``domain_shift * cluster_spread``.
    """
    general, _ = generate_synth(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    base = _centers(cfg, np.random.default_rng(cfg.seed))
    shifted = base + cfg.domain_shift * cfg.cluster_spread * rng.standard_normal(base.shape)
    probs = zipf_probs(cfg.vocab_size, cfg.zipf_exponent)
    store = _draw(rng, shifted, probs, cfg.train_count, cfg.cluster_spread)
    heldout = _draw(rng, shifted, probs, cfg.heldout_count, cfg.cluster_spread)
    return general, store, heldout


def frequency_tiers(tokens, vocab_size: int) -> dict:
    """HIGH (top 1%), MIDDLE (40-60%) and LOW (bottom 1%) tokens by frequency.

    Returns token arrays and the share of occurrences each tier covers.
    """
    counts = np.bincount(np.asarray(tokens), minlength=vocab_size)
    order = np.lexsort((np.arange(vocab_size), -counts))
    cut = max(1, int(round(0.01 * vocab_size)))
    lo, hi = int(0.4 * vocab_size), int(0.6 * vocab_size)
    tiers = {"HIGH": order[:cut], "MIDDLE": order[lo:hi], "LOW": order[-cut:]}
    total = counts.sum()
    return {name: {"tokens": t, "mass": counts[t].sum() / total} for name, t in tiers.items()}


class ToyPredictor(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by full-batch gradient descent."""

    def __init__(self, vocab_size=None, epochs=200, learning_rate=0.1, random_state=0):
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        V = self.vocab_size or int(y.max()) + 1
        # own stream so the init never coincides with the generator's center draw
        rng = np.random.default_rng(np.random.SeedSequence(self.random_state, spawn_key=(1,)))
        W = 0.01 * rng.standard_normal((V, X.shape[1]))
        b = np.zeros(V)
        onehot = np.zeros((len(y), V))
        onehot[np.arange(len(y)), y] = 1.0
        self.loss_history_ = []
        for _ in range(self.epochs):
            P = _softmax(X @ W.T + b)
            self.loss_history_.append(_xent(P, y))
            G = (P - onehot) / len(y)
            W -= self.learning_rate * (G.T @ X)
            b -= self.learning_rate * G.sum(axis=0)
        if self.epochs:
            self.loss_history_.append(_xent(_softmax(X @ W.T + b), y))
        self.coef_, self.intercept_ = W, b
        self.classes_ = np.arange(V)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return _softmax(X @ self.coef_.T + self.intercept_)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _xent(P, y):
    return float(-np.mean(np.log(np.maximum(P[np.arange(len(y)), y], 1e-300))))


def train_toy_predictor(store: Datastore, epochs=200, lr=0.1, seed=0) -> ToyPredictor:
    if len(store) == 0:
        raise ValueError("cannot fit a predictor on an empty datastore")
    return ToyPredictor(store.vocab_size, epochs, lr, seed).fit(store.keys64(), store.tokens)


@dataclass
class AccuracyCurve:
    ks: list[int]
    accuracies: list[float]


def _neighbor_tokens(queries: Datastore, store: Datastore, k: int, metric: str):
    if queries.dim != store.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != store dim {store.dim}")
    idx, scores = knn_search_batch(queries.keys64(), store.keys64(), k, metric)
    return idx, scores, store.tokens[idx]


def retrieval_accuracy(queries: Datastore, store: Datastore, k: int, metric: str = "l2") -> float:
    """Mean share of each query's top-k neighbors that carry the query's token."""
    _, _, tok = _neighbor_tokens(queries, store, k, metric)
    return float(np.mean(tok == queries.tokens[:, None]))


def accuracy_curve(queries: Datastore, store: Datastore, ks=DEFAULT_KS, metric: str = "l2") -> AccuracyCurve:
    ks = sorted(int(k) for k in ks)
    _, _, tok = _neighbor_tokens(queries, store, ks[-1], metric)
    hit = tok == queries.tokens[:, None]
    return AccuracyCurve(ks, [float(hit[:, :k].mean()) for k in ks])


def retrieval_space(ds: Datastore, adapter: AdapterParams | None = None, pca: PcaModel | None = None):
    """Keys of ``ds`` mapped through the optional adapter and ``g``.

    Returns ``(keys, ok)``; ``ok`` marks rows whose projection was not
    degenerate (always all-True without a PCA model).
    """
    keys = ds.keys64()
    if adapter is not None:
        keys = ffn_forward(keys, adapter)
    if pca is None:
        return keys, np.ones(len(keys), dtype=bool)
    return project_normalize_safe(keys, pca)


@dataclass
class EvalReport:
    method: str
    acc_pc: float
    acc_pr: float
    acc_pknn: float
    lambda_mode: str
    curve: AccuracyCurve
    mean_lambda: float = 0.0
    extra: dict = field(default_factory=dict)


def evaluate_pipeline(heldout: Datastore, store: Datastore, predictor, adapter=None, pca=None,
                      rcfg: RetrievalConfig = RetrievalConfig(), ks=DEFAULT_KS,
                      method: str | None = None, p_c=None) -> EvalReport:
    """Next-token accuracy of p_c, p_r and their mixture plus the top-k curve.

    Queries with a degenerate projection fall back to pure p_c.
    """
    if heldout.dim != store.dim:
        raise DimensionMismatchError(f"heldout dim {heldout.dim} != store dim {store.dim}")
    V = store.vocab_size
    if p_c is None:
        p_c = predictor.predict_proba(heldout.keys64())
    if p_c.shape[1] != V:
        raise DimensionMismatchError(f"predictor vocab {p_c.shape[1]} != store vocab {V}")
    Q, q_ok = retrieval_space(heldout, adapter, pca)
    K, _ = retrieval_space(store, adapter, pca)
    kmax = max(rcfg.k, max(ks))
    idx, scores = knn_search_batch(Q, K, kmax, rcfg.metric)
    tok = store.tokens[idx]
    gold = heldout.tokens

    hit = tok == gold[:, None]
    curve = AccuracyCurve(list(ks), [float(hit[:, :k].mean()) for k in ks])

    k = min(rcfg.k, idx.shape[1])
    correct_pr = correct_knn = 0
    lam_total = 0.0
    for i in range(len(heldout)):
        if not q_ok[i]:
            correct_knn += int(np.argmax(p_c[i]) == gold[i])
            continue
        nb = NeighborList(idx[i, :k], scores[i, :k], tok[i, :k])
        p_r = retrieval_distribution(nb, rcfg.T, V, rcfg.metric)
        lam = adaptive_lambda(nb, rcfg.lam) if rcfg.use_adaptive_lambda else rcfg.lam
        lam_total += lam
        p_knn = interpolate(p_c[i], p_r, lam)
        correct_pr += int(np.argmax(p_r) == gold[i])
        correct_knn += int(np.argmax(p_knn) == gold[i])
    n = len(heldout)
    if method is None:
        method = "clknn" if adapter is not None else "knn"
    return EvalReport(
        method=method,
        acc_pc=float(np.mean(np.argmax(p_c, axis=1) == gold)),
        acc_pr=correct_pr / n,
        acc_pknn=correct_knn / n,
        lambda_mode="adaptive" if rcfg.use_adaptive_lambda else "fixed",
        curve=curve,
        mean_lambda=lam_total / n,
    )


def lambda_sweep(heldout, store, predictor, adapter=None, pca=None, rcfg=RetrievalConfig(),
                 lambdas=tuple(np.round(np.linspace(0.0, 1.0, 11), 2))):
    """Fixed-lambda accuracies plus the adaptive mode at each base lambda.

    Returns ``{"fixed": {lam: acc}, "adaptive": {lam: acc}, "acc_pc": acc}``;
    the adaptive entries are empty unless the metric is ``ip``.
    """
    p_c = predictor.predict_proba(heldout.keys64())
    fixed, adaptive = {}, {}
    acc_pc = None
    for lam in lambdas:
        cfg = RetrievalConfig(rcfg.k, rcfg.T, float(lam), rcfg.metric, False)
        rep = evaluate_pipeline(heldout, store, predictor, adapter, pca, cfg, ks=(1,), p_c=p_c)
        fixed[float(lam)] = rep.acc_pknn
        acc_pc = rep.acc_pc
        if rcfg.metric == "ip":
            cfg = RetrievalConfig(rcfg.k, rcfg.T, float(lam), rcfg.metric, True)
            adaptive[float(lam)] = evaluate_pipeline(heldout, store, predictor, adapter, pca, cfg,
                                                     ks=(1,), p_c=p_c).acc_pknn
    return {"fixed": fixed, "adaptive": adaptive, "acc_pc": acc_pc}


def fit_clknn(store: Datastore, tcfg: TrainConfig, pca_dim: int):
    """Train the adapter on ``store`` and fit PCA on the transformed keys."""
    result = train_adapter(store, tcfg)
    Z = ffn_forward(store.keys64(), result.params)
    pca = fit_pca(Z, min(pca_dim, Z.shape[1]))
    return result, pca


def run_ablation(store: Datastore, heldout: Datastore, base: TrainConfig, grid, pca_dim: int,
                 ks=(1,)) -> list[dict]:
    """Retrain for every ``(M, N)`` in ``grid`` and record the top-k accuracy.

    ``K`` is raised to ``N`` where the base pool would be smaller.
    """
    rows = []
    for M, N in grid:
        cfg = TrainConfig(**{**base.__dict__, "M": int(M), "N": int(N), "K": max(base.K, int(N))})
        result, pca = fit_clknn(store, cfg, pca_dim)
        Q, _ = retrieval_space(heldout, result.params, pca)
        K, _ = retrieval_space(store, result.params, pca)
        idx, _ = knn_search_batch(Q, K, max(ks), "ip")
        hit = store.tokens[idx] == heldout.tokens[:, None]
        row = {"M": int(M), "N": int(N), "final_loss": result.log[-1].loss if result.log else float("nan")}
        for k in ks:
            row[f"acc_top{k}"] = float(hit[:, :k].mean())
        rows.append(row)
    return rows


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_curve_csv(curve: AccuracyCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "accuracy"])
        for k, a in zip(curve.ks, curve.accuracies):
            w.writerow([k, _fmt(a)])


def write_summary_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "acc_pc", "acc_pr", "acc_pknn", "lambda_mode"])
        for r in reports:
            w.writerow([r.method, _fmt(r.acc_pc), _fmt(r.acc_pr), _fmt(r.acc_pknn), r.lambda_mode])


def write_rows_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0].keys()))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def dump_pca2d(keys, tokens, path, max_points: int = 2000, seed: int = 0) -> None:
    """Two-component PCA coordinates (x, y, token) for external plotting."""
    keys = np.asarray(keys, dtype=np.float64)
    tokens = np.asarray(tokens)
    rng = np.random.default_rng(seed)
    sel = np.sort(rng.choice(len(keys), size=min(max_points, len(keys)), replace=False))
    model = fit_pca(keys[sel], min(2, keys.shape[1]))
    xy = (keys[sel] - model.mean) @ model.components.T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "token"])
        for row, t in zip(xy, tokens[sel]):
            y = row[1] if len(row) > 1 else 0.0
            w.writerow([_fmt(row[0]), _fmt(y), int(t)])
