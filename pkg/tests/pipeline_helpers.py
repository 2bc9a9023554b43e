"""Drive the full CLI pipeline in-process."""

import json
from pathlib import Path

from clknn.cli import main

SMALL_CONFIG = {
    "vocab_size": 20, "dim": 8, "train_count": 2000, "heldout_count": 300,
    "N": 8, "K": 16, "steps": 60, "hidden_dim": 16, "out_dim": 8, "pca_dim": 4,
    "ks": [1, 4], "ablation_grid": [[1, 1], [2, 8]], "predictor_epochs": 30,
}


def run_pipeline(root: Path, config: dict = SMALL_CONFIG, seed: int = 7) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    d = root / "out"
    common = ["--config", str(cfg), "--seed", str(seed)]
    steps = [
        ["gen-synth", "--out-dir", str(d)],
        ["train-adapter", "--datastore", str(d / "store.clkn"), "--out", str(d / "adapter.clka")],
        ["fit-pca", "--datastore", str(d / "store.clkn"), "--adapter", str(d / "adapter.clka"),
         "--out", str(d / "pca.clkp"), "--dump-2d", str(d / "pca2d.csv")],
        ["transform", "--datastore", str(d / "store.clkn"), "--adapter", str(d / "adapter.clka"),
         "--pca", str(d / "pca.clkp"), "--out", str(d / "retrieval.clkn")],
        ["evaluate", "--store", str(d / "store.clkn"), "--heldout", str(d / "heldout.clkn"),
         "--train", str(d / "general.clkn"), "--adapter", str(d / "adapter.clka"),
         "--pca", str(d / "pca.clkp"), "--out-dir", str(d / "eval")],
        ["ablate", "--store", str(d / "store.clkn"), "--heldout", str(d / "heldout.clkn"),
         "--out", str(d / "ablation.csv")],
    ]
    for argv in steps:
        code = main([argv[0], *common, *argv[1:]])
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return d


def artifact_bytes(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
