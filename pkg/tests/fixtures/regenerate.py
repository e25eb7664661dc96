"""Rebuild the checked-in fixtures: ``python3 tests/fixtures/regenerate.py``.

* golden_pgm/: three 48x48 PGM images plus the metrics CLI's pairwise.csv and
  entropy.csv for them (values cross-checked against independent oracles in
  test_cli.py);
* spo_trace.csv: the trace of the direct SPO objective for SPO_CONFIG, which
  the generalized reverse-KL trainer must reproduce.
"""
from __future__ import annotations

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from fdalign import cli
from fdalign.metrics import GrayImage

HERE = Path(__file__).parent
GOLDEN = HERE / "golden_pgm"
SPO_CONFIG = {
    "mode": "stepwise",
    "divergence": "reverse-kl",
    "pretrain_epochs": 20,
    "hidden": 16,
    "dataset_size": 256,
    "epochs": 4,
    "pairs_per_epoch": 200,
    "eval_samples": 20,
    "n_samples": 100,
    "seed": 5,
}


def golden_images() -> dict[str, GrayImage]:
    y, x = np.mgrid[0:48, 0:48].astype(float)
    ramp = np.round(255 * (x + y) / 94)
    rings = np.round(127.5 + 127.5 * np.cos(np.hypot(x - 24, y - 24) / 3))
    noisy = np.clip(ramp + np.random.default_rng(11).normal(0, 20, ramp.shape), 0, 255).round()
    return {name: GrayImage(arr.astype(np.uint8))
            for name, arr in (("a_ramp.pgm", ramp), ("b_rings.pgm", rings), ("c_noisy_ramp.pgm", noisy))}


def spo_trace_rows(cfg: dict = SPO_CONFIG) -> list[list[float]]:
    """Trace of the direct SPO objective under the CLI's step-wise settings."""
    from fdalign.divergence import REVERSE_KL
    from fdalign.loss import LossConfig
    from fdalign.trainer import PreferenceOracle, train_stepwise

    full = cli.resolve_train_config(cfg)
    ref = cli._reference_policy(full)
    _, trace = train_stepwise(
        ref, ref, PreferenceOracle.ring(full["n_conditions"]), LossConfig(REVERSE_KL, full["beta"]),
        full["epochs"], full["lr"], k=full["k"], pairs_per_epoch=full["pairs_per_epoch"], seed=full["seed"],
        objective="spo", batch_size=full["batch_size"], conditions=full["conditions"],
        eval_samples=full["eval_samples"], self_check=full["self_check"],
    )
    return trace.rows()


def main() -> None:
    GOLDEN.mkdir(exist_ok=True)
    for name, img in golden_images().items():
        cli.write_pgm(GOLDEN / name, img)
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "cfg.json"
        cfg.write_text(json.dumps({"input": str(GOLDEN)}))
        assert cli.main(["metrics", "--config", str(cfg), "--out", tmp]) == 0
        for name in ("pairwise.csv", "entropy.csv"):
            shutil.copy(Path(tmp) / name, HERE / f"golden_{name}")
    (HERE / "spo_trace.csv").write_text(cli.csv_text(cli.TRACE_HEADER, spo_trace_rows()))


if __name__ == "__main__":
    main()
