"""Command-line entry point wiring the pipeline stages together.

Every subcommand reads one flat JSON config (``--config``); unknown keys are
rejected. Failures print one JSON line on stderr, ``{"error": category,
"message": ...}``, and exit with 2 (config), 3 (dimension), 4 (I/O) or 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from clknn.adapter import (
    TrainConfig,
    ffn_forward,
    load_adapter,
    read_adapter_header,
    save_adapter,
    train_adapter,
    write_training_log,
)
from clknn.datastore import load_datastore, read_header, save_datastore
from clknn.exceptions import CLKNNError, DimensionMismatchError, FormatError
from clknn.projection import fit_pca, load_pca, project_normalize, read_pca_header, save_pca
from clknn.retrieval import RetrievalConfig
from clknn.synthbench import (
    DEFAULT_KS,
    SynthConfig,
    dump_pca2d,
    evaluate_pipeline,
    generate_domain_shift,
    run_ablation,
    train_toy_predictor,
    write_curve_csv,
    write_rows_csv,
    write_summary_csv,
)

EXIT_OTHER, EXIT_CONFIG, EXIT_DIMENSION, EXIT_IO = 1, 2, 3, 4


class ConfigError(CLKNNError):
    """The configuration file or flags are unusable."""


@dataclass(frozen=True)
class PipelineConfig:
    # synthetic data
    vocab_size: int = 50
    dim: int = 32
    zipf_exponent: float = 1.0
    cluster_spread: float = 0.8
    center_scale: float = 1.0
    train_count: int = 20000
    heldout_count: int = 2000
    domain_shift: float = 0.5
    # adapter training and negative mining
    M: int = 2
    N: int = 32
    K: int = 128
    T_prime: float = 0.01
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 1e-3
    refresh_interval: int = 1000
    hidden_dim: int = 64
    out_dim: int = 32
    optimizer: str = "adam"
    stop_gradient: bool = False
    mining_metric: str = "cosine"
    # projection
    pca_dim: int = 16
    # retrieval; JSON spells the interpolation weight "lambda"
    k: int = 8
    T: float = 0.1
    lam: float = 0.5
    metric: str = "ip"
    use_adaptive_lambda: bool = False
    # evaluation
    predictor_epochs: int = 200
    predictor_lr: float = 0.1
    ks: tuple = DEFAULT_KS
    ablation_grid: tuple = ((1, 1), (1, 16), (1, 32), (2, 1), (2, 16), (2, 32))
    seed: int = 0

    def __post_init__(self):
        try:
            self.synth_config()
            self.train_config()
            self.retrieval_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 1 <= self.pca_dim <= self.out_dim:
            raise ConfigError(f"pca_dim={self.pca_dim} must lie in [1, out_dim={self.out_dim}]")
        if self.N > self.vocab_size - 1:
            raise ConfigError(f"N={self.N} needs at least N+1={self.N + 1} tokens, vocab_size={self.vocab_size}")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be a nonempty list of positive integers")
        if self.predictor_epochs < 0 or self.predictor_lr <= 0:
            raise ConfigError("predictor_epochs must be >= 0 and predictor_lr > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for pair in self.ablation_grid:
            if len(pair) != 2 or min(pair) < 1:
                raise ConfigError(f"bad ablation grid entry {pair!r}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PipelineConfig":
        data = dict(mapping)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        elif "lam" in data:
            raise ConfigError("unknown config key 'lam' (use 'lambda')")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "ks" in data:
            data["ks"] = tuple(int(k) for k in data["ks"])
        if "ablation_grid" in data:
            data["ablation_grid"] = tuple(tuple(int(v) for v in pair) for pair in data["ablation_grid"])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_mapping(data)

    def stage_seed(self, stage: str) -> int:
        """Independent per-stage seed derived from the top-level one."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1, np.uint64)[0])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.vocab_size, self.dim, self.zipf_exponent, self.cluster_spread,
                           self.center_scale, self.train_count, self.heldout_count,
                           self.stage_seed("synth"), self.domain_shift)

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        base = {n: getattr(self, n) for n in names if n != "seed"}
        return TrainConfig(**{**base, "seed": self.stage_seed("adapter"), **overrides})

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(self.k, self.T, self.lam, self.metric, self.use_adaptive_lambda)


def _fail(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


@contextmanager
def _atomic_dir_outputs(paths):
    """Write to ``.tmp`` siblings and move them into place only on success."""
    tmps = [Path(f"{p}.tmp") for p in paths]
    try:
        yield tmps
        for t, p in zip(tmps, paths):
            os.replace(t, p)
    finally:
        for t in tmps:
            if t.exists():
                t.unlink()


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _check_adapter_fits(store_dim: int, adapter_path) -> dict:
    head = read_adapter_header(_require_file(adapter_path))
    if head["d"] != store_dim:
        raise DimensionMismatchError(f"datastore dim {store_dim} != adapter input dim {head['d']}")
    return head


def _check_pca_fits(width: int, pca_path) -> dict:
    head = read_pca_header(_require_file(pca_path))
    if head["d_o"] != width:
        raise DimensionMismatchError(f"retrieval width {width} != PCA input dim {head['d_o']}")
    return head


def cmd_gen_synth(args, cfg: PipelineConfig) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    general, store, heldout = generate_domain_shift(cfg.synth_config())
    for name, ds in (("general", general), ("store", store), ("heldout", heldout)):
        save_datastore(ds, out / f"{name}.clkn")
    return 0


def cmd_train_adapter(args, cfg: PipelineConfig) -> int:
    head = read_header(_require_file(args.datastore))
    if cfg.N > head["vocab_size"] - 1:
        raise ConfigError(f"N={cfg.N} exceeds the {head['vocab_size'] - 1} available negative clusters")
    ds = load_datastore(args.datastore)
    result = train_adapter(ds, cfg.train_config())
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    with _atomic_dir_outputs([log_path]) as (tmp_log,):
        write_training_log(result.log, tmp_log)
        save_adapter(result.params, args.out)
    return 0


def _retrieval_keys(ds, adapter_path):
    if adapter_path is None:
        return ds.keys64()
    return ffn_forward(ds.keys64(), load_adapter(adapter_path))


def cmd_fit_pca(args, cfg: PipelineConfig) -> int:
    head = read_header(_require_file(args.datastore))
    width = head["dim"]
    if args.adapter:
        width = _check_adapter_fits(head["dim"], args.adapter)["d_o"]
    p = args.dim or cfg.pca_dim
    if not 1 <= p <= width:
        raise DimensionMismatchError(f"PCA dim {p} must lie in [1, {width}]")
    ds = load_datastore(args.datastore)
    Z = _retrieval_keys(ds, args.adapter)
    model = fit_pca(Z, p)
    if args.dump_2d:
        with _atomic_dir_outputs([Path(args.dump_2d)]) as (tmp,):
            dump_pca2d(Z, ds.tokens, tmp, seed=cfg.stage_seed("pca2d"))
            save_pca(model, args.out)
    else:
        save_pca(model, args.out)
    return 0


def cmd_transform(args, cfg: PipelineConfig) -> int:
    head = read_header(_require_file(args.datastore))
    width = _check_adapter_fits(head["dim"], args.adapter)["d_o"]
    if args.pca:
        _check_pca_fits(width, args.pca)
    ds = load_datastore(args.datastore)
    Z = _retrieval_keys(ds, args.adapter)
    if args.pca:
        Z = project_normalize(Z, load_pca(args.pca))
    save_datastore(ds.with_keys(Z), args.out)
    return 0


def _check_eval_inputs(args):
    store = read_header(_require_file(args.store))
    held = read_header(_require_file(args.heldout))
    if held["dim"] != store["dim"]:
        raise DimensionMismatchError(f"heldout dim {held['dim']} != store dim {store['dim']}")
    if held["vocab_size"] != store["vocab_size"]:
        raise DimensionMismatchError(f"heldout vocab {held['vocab_size']} != store vocab {store['vocab_size']}")
    if args.train:
        train = read_header(_require_file(args.train))
        if (train["dim"], train["vocab_size"]) != (store["dim"], store["vocab_size"]):
            raise DimensionMismatchError("predictor training data disagrees with the store in dim or vocab")
    width = store["dim"]
    if args.adapter:
        width = _check_adapter_fits(store["dim"], args.adapter)["d_o"]
    if args.pca:
        _check_pca_fits(width, args.pca)
    return store


def _overridden_retrieval(args, cfg: PipelineConfig) -> RetrievalConfig:
    try:
        return replace(
            cfg.retrieval_config(),
            **{name: val for name, val in (("k", args.k), ("T", args.temperature), ("lam", args.lam))
               if val is not None},
            **({"use_adaptive_lambda": True} if args.adaptive else {}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    _check_eval_inputs(args)
    rcfg = _overridden_retrieval(args, cfg)
    if rcfg.metric == "ip" and not args.pca and (rcfg.use_adaptive_lambda or args.adapter):
        raise ConfigError("inner-product retrieval needs --pca (normalized vectors)")
    store = load_datastore(args.store)
    heldout = load_datastore(args.heldout)
    train = load_datastore(args.train) if args.train else store
    predictor = train_toy_predictor(train, cfg.predictor_epochs, cfg.predictor_lr, cfg.stage_seed("predictor"))
    p_c = predictor.predict_proba(heldout.keys64())

    # vanilla kNN over raw keys always ranks by L2 with a fixed weight
    base_cfg = replace(rcfg, metric="l2", use_adaptive_lambda=False)
    reports = [evaluate_pipeline(heldout, store, predictor, rcfg=base_cfg, ks=cfg.ks, method="knn", p_c=p_c)]
    if args.adapter:
        adapter = load_adapter(args.adapter)
        pca = load_pca(args.pca) if args.pca else None
        run_cfg = rcfg if pca is not None else replace(rcfg, metric="l2")
        reports.append(evaluate_pipeline(heldout, store, predictor, adapter, pca, run_cfg, cfg.ks,
                                         method="clknn", p_c=p_c))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.csv"] + [out / f"curve_{r.method}.csv" for r in reports]
    with _atomic_dir_outputs(paths) as tmps:
        write_summary_csv(reports, tmps[0])
        for r, t in zip(reports, tmps[1:]):
            write_curve_csv(r.curve, t)
    return 0


def _parse_grid(text: str):
    try:
        return tuple(tuple(int(v) for v in cell.split("x")) for cell in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}; expected e.g. 1x1,2x32") from exc


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    store_head = _check_eval_inputs(argparse.Namespace(
        store=args.store, heldout=args.heldout, train=None, adapter=None, pca=None))
    grid = _parse_grid(args.grid) if args.grid else cfg.ablation_grid
    if max(N for _, N in grid) > store_head["vocab_size"] - 1:
        raise ConfigError("a grid N exceeds the number of available negative clusters")
    store = load_datastore(args.store)
    heldout = load_datastore(args.heldout)
    rows = run_ablation(store, heldout, cfg.train_config(), grid, cfg.pca_dim, ks=cfg.ks)
    with _atomic_dir_outputs([Path(args.out)]) as (tmp,):
        write_rows_csv(rows, tmp)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="top-level seed (u64)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="BLAS thread cap (falls back to CLKNN_THREADS)")

    parser = argparse.ArgumentParser(prog="clknn", parents=[common],
                                     description="Contrastive-adapter kNN retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="write general/store/heldout datastores")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-adapter", parents=[common], help="train the contrastive adapter")
    p.add_argument("--datastore", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("fit-pca", parents=[common], help="fit PCA on (adapter-mapped) keys")
    p.add_argument("--datastore", required=True)
    p.add_argument("--adapter")
    p.add_argument("--dim", type=int, help="override pca_dim")
    p.add_argument("--dump-2d", help="also write 2-D PCA coordinates as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("transform", parents=[common], help="map datastore keys into retrieval space")
    p.add_argument("--datastore", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--pca")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy of p_c, p_r and p_knn plus top-k curves")
    p.add_argument("--store", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--train", help="predictor training datastore (default: the store)")
    p.add_argument("--adapter")
    p.add_argument("--pca")
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--adaptive", action="store_true", help="use confidence-scaled lambda")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="retrain over an (M, N) grid")
    p.add_argument("--store", required=True)
    p.add_argument("--heldout", required=True)
    p.add_argument("--grid", help="comma-separated MxN cells, e.g. 1x1,2x32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _threads(args):
    n = getattr(args, "threads", None)
    if n is None and os.environ.get("CLKNN_THREADS"):
        try:
            n = int(os.environ["CLKNN_THREADS"])
        except ValueError as exc:
            raise ConfigError("CLKNN_THREADS must be an integer") from exc
    if n is not None and n < 1:
        raise ConfigError("thread count must be positive")
    return n


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CLKNN_LOG", "WARNING"), stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.from_json(args.config) if getattr(args, "config", None) else PipelineConfig()
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, seed=args.seed)
        with threadpool_limits(limits=_threads(args)):
            return args.func(args, cfg)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except DimensionMismatchError as exc:
        return _fail("dimension", str(exc), EXIT_DIMENSION)
    except (OSError, FormatError) as exc:
        return _fail("io", str(exc), EXIT_IO)
    except CLKNNError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
