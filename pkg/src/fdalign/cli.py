"""Command-line entry point: ``fdalign <command> --config cfg.json --out dir``.

Commands: landscape, verify, policy-solve, train, metrics. Every command
echoes its effective configuration to ``<out>/config.json``; feeding that file
back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .diffusion import ConfigError, GaussianStepPolicy, NoiseSchedule
from .divergence import Divergence, parse_divergence
from .loss import (
    LossConfig,
    OrderingError,
    closed_form_values,
    gradient_values,
    loss_values,
    verify_ratio_ordering,
)
from .metrics import (
    INFINITE_PSNR,
    GrayImage,
    SampleSet,
    entropy_1d,
    entropy_2d,
    fsim,
    psnr,
    rasterize,
    rmse,
    sample_diversity,
    ssim,
)
from .policy import AlignmentProblem, ConvergenceError, InfeasibleError, recover_q_from_policy, solve_optimal_policy
from .trainer import (
    CategoricalPolicy,
    PreferenceOracle,
    PreferenceRecord,
    TrainTrace,
    TrainingDivergedError,
    _categorical_extras,
    evaluate_samples,
    pretrain_reference,
    ring_dataset,
    train_categorical,
    train_stepwise,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
FOUR_DIVERGENCES = ["reverse-kl", "forward-kl", "alpha:0.6", "js"]


class VerificationFailure(Exception):
    pass


class PGMParseError(ValueError):
    def __init__(self, path: Path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = path, offset


# ---------------------------------------------------------------------------
# Config and output helpers


def _merge(defaults: dict, given: dict, command: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown {command} config keys: {unknown}; allowed: {sorted(defaults)}")
    return {**defaults, **given}


def fmt(value: Any) -> str:
    """Shortest round-trip text for CSV cells."""
    if value is INFINITE_PSNR:
        return "inf"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


class Output:
    """Collects files in memory; everything is written once at the end."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}

    def prepare(self) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write-probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise OSError(f"output directory {self.root} is not writable: {exc}") from exc

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def flush(self) -> None:
        for name, text in self.files.items():
            path = self.root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)


def _divergence_list(value) -> list[Divergence]:
    names = [value] if isinstance(value, str) else list(value)
    if not names:
        raise ConfigError("need at least one divergence")
    try:
        return [parse_divergence(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _file_stem(div: Divergence) -> str:
    return div.name.replace(":", "-")


def _positive(cfg: dict, *keys: str) -> None:
    for key in keys:
        if not (isinstance(cfg[key], (int, float)) and cfg[key] > 0):
            raise ConfigError(f"{key} must be a positive number, got {cfg[key]!r}")


# ---------------------------------------------------------------------------
# landscape


LANDSCAPE_DEFAULTS = {
    "divergences": FOUR_DIVERGENCES,
    "beta": 10.0,
    "x_min": 0.05,
    "x_max": 5.0,
    "n": 100,
    "z_plane": 50.0,
    "arrows": 20,
}


@dataclass
class LandscapeGrid:
    x1_axis: np.ndarray
    x2_axis: np.ndarray
    loss: np.ndarray  # [i, j] at (x1_axis[i], x2_axis[j])
    d_x1: np.ndarray
    d_x2: np.ndarray

    @classmethod
    def compute(cls, cfg: LossConfig, axis: np.ndarray) -> "LandscapeGrid":
        x1, x2 = np.meshgrid(axis, axis, indexing="ij")
        d1, d2 = gradient_values(cfg, x1, x2)
        return cls(axis, axis, loss_values(cfg, x1, x2), d1, d2)

    def max_gradient(self) -> float:
        return float(np.max(np.hypot(self.d_x1, self.d_x2)))

    def rows(self):
        for i, a in enumerate(self.x1_axis):
            for j, b in enumerate(self.x2_axis):
                yield a, b, self.loss[i, j], self.d_x1[i, j], self.d_x2[i, j]


_PALETTE = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)


def _color(v: float) -> str:
    pos = min(max(v, 0.0), 1.0) * (len(_PALETTE) - 1)
    i = min(int(pos), len(_PALETTE) - 2)
    rgb = _PALETTE[i] + (pos - i) * (_PALETTE[i + 1] - _PALETTE[i])
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def landscape_svg(grid: LandscapeGrid, title: str, z_plane: float, arrows: int) -> str:
    """Heat map of log(1 + loss), unit gradient arrows and the iso-loss slice nearest z_plane."""
    n = grid.x1_axis.size
    cell, margin = 5, 40
    size = n * cell
    lo, hi = float(grid.loss.min()), float(grid.loss.max())
    z = min(max(z_plane, lo), hi)
    shade = np.log1p(grid.loss)
    shade = (shade - shade.min()) / max(float(np.ptp(shade)), 1e-300)
    band = (hi - lo) / 50.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * margin}" height="{size + 2 * margin}">',
        f'<text x="{margin}" y="{margin - 22}" font-size="12">{title}: loss over (X1, X2), '
        f'X1 right, X2 up; iso-loss marks at Z={z:.6g} (requested {z_plane:g})</text>',
        f'<text x="{margin}" y="{margin - 8}" font-size="10">X in [{grid.x1_axis[0]:g}, {grid.x1_axis[-1]:g}], '
        f'loss in [{lo:.4g}, {hi:.4g}]</text>',
        f'<g transform="translate({margin},{margin})">',
    ]
    for i in range(n):
        for j in range(n):
            x, y = i * cell, (n - 1 - j) * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(shade[i, j])}"/>')
    near = np.abs(grid.loss - z) <= band
    for i, j in zip(*np.nonzero(near)):
        cx, cy = i * cell + cell / 2, (n - 1 - j) * cell + cell / 2
        out.append(f'<circle cx="{cx:g}" cy="{cy:g}" r="1.2" fill="white"/>')
    stride = max(1, n // arrows)
    length = 0.8 * stride * cell
    for i in range(stride // 2, n, stride):
        for j in range(stride // 2, n, stride):
            gx, gy = -grid.d_x1[i, j], -grid.d_x2[i, j]  # descent direction
            norm = math.hypot(gx, gy)
            if norm == 0 or not math.isfinite(norm):
                continue
            x0, y0 = i * cell + cell / 2, (n - 1 - j) * cell + cell / 2
            x1, y1 = x0 + length * gx / norm, y0 - length * gy / norm
            out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                       f'stroke="black" stroke-width="1"/>')
            out.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="1.5" fill="black"/>')
    out.append("</g></svg>")
    return "\n".join(out) + "\n"


def cmd_landscape(cfg: dict, out: Output) -> int:
    divs = _divergence_list(cfg["divergences"])
    _positive(cfg, "beta", "x_min", "x_max", "n", "arrows")
    if cfg["x_min"] >= cfg["x_max"] or int(cfg["n"]) < 2:
        raise ConfigError("landscape grid needs x_min < x_max and n >= 2")
    axis = np.linspace(cfg["x_min"], cfg["x_max"], int(cfg["n"]))
    summary = []
    for div in divs:
        grid = LandscapeGrid.compute(LossConfig(div, cfg["beta"]), axis)
        stem = _file_stem(div)
        out.add(f"landscape_{stem}.csv", csv_text(["x1", "x2", "loss", "d_x1", "d_x2"], grid.rows()))
        out.add(f"landscape_{stem}.svg", landscape_svg(grid, div.name, cfg["z_plane"], int(cfg["arrows"])))
        summary.append((div.name, grid.max_gradient(), float(grid.loss.min()), float(grid.loss.max())))
    smoothest = min(summary, key=lambda row: row[1])[0]
    out.add("smoothness.csv", csv_text(["divergence", "max_abs_gradient", "min_loss", "max_loss", "smoothest"],
                                       [(*row, row[0] == smoothest) for row in summary]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


VERIFY_DEFAULTS = {
    "divergences": FOUR_DIVERGENCES,
    "betas": [0.1, 1.0, 10.0],
    "x_min": 0.05,
    "x_max": 20.0,
    "n": 20,
    "fd_rel_tol": 1e-5,
    "closed_form_rel_tol": 1e-9,
    "ordering_samples": 1000,
    "ordering_x_max": 50.0,
    "policy_problems": 500,
    "policy_tol": 1e-7,
    "inject_fault": False,
    "seed": 0,
}


def _rel_err(a, b, floor=1e-300):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_gradients(cfg: LossConfig, x1, x2):
    h1, h2 = 1e-6 * x1, 1e-6 * x2
    n1 = (loss_values(cfg, x1 + h1, x2) - loss_values(cfg, x1 - h1, x2)) / (2 * h1)
    n2 = (loss_values(cfg, x1, x2 + h2) - loss_values(cfg, x1, x2 - h2)) / (2 * h2)
    return n1, n2


def random_policy_problem(rng: np.random.Generator, div: Divergence, max_actions: int = 16) -> AlignmentProblem:
    n = int(rng.integers(2, max_actions + 1))
    return AlignmentProblem(rng.uniform(-3, 3, n), rng.dirichlet(np.ones(n)),
                            float(rng.choice([0.5, 1.0, 10.0])), div)


def run_verify(cfg: dict):
    """Returns (grid rows, summary rows, first failure message or None)."""
    divs = _divergence_list(cfg["divergences"])
    betas = [float(b) for b in cfg["betas"]]
    n = int(cfg["n"])
    if n < 1 or not betas or not (0 < cfg["x_min"] < cfg["x_max"]) or any(b <= 0 for b in betas):
        raise ConfigError("verify grid is empty: need n >= 1, positive betas and 0 < x_min < x_max")
    axis = np.geomspace(cfg["x_min"], cfg["x_max"], n)
    x1, x2 = (a.ravel() for a in np.meshgrid(axis, axis, indexing="ij"))
    fault = 1.0 + 1e-3 if cfg["inject_fault"] else 1.0
    rows, summary, first = [], [], None

    def fail(msg):
        nonlocal first
        if first is None:
            first = msg

    n_fd = n_cf = bad_fd = bad_cf = 0
    for div in divs:
        for beta in betas:
            lc = LossConfig(div, beta)
            loss = loss_values(lc, x1, x2)
            d1, d2 = gradient_values(lc, x1, x2)
            d1, d2 = d1 * fault, d2 * fault  # fault mode scales f''
            n1, n2 = fd_gradients(lc, x1, x2)
            ok = (_rel_err(d1, n1) <= cfg["fd_rel_tol"]) & (_rel_err(d2, n2) <= cfg["fd_rel_tol"])
            c1, c2 = closed_form_values(lc, x1, x2)
            cf_ok = (_rel_err(c1, d1) <= cfg["closed_form_rel_tol"]) & (_rel_err(c2, d2) <= cfg["closed_form_rel_tol"])
            ratio = div.f_double_prime(x1) / div.f_double_prime(x2)
            for k in range(x1.size):
                rows.append((div.name, beta, x1[k], x2[k], loss[k], d1[k], d2[k], ratio[k], bool(ok[k])))
                if not ok[k]:
                    fail(f"finite-difference mismatch: divergence={div.name} beta={beta!r} X1={float(x1[k])!r} "
                         f"X2={float(x2[k])!r} analytic=({float(d1[k])!r}, {float(d2[k])!r}) numeric=({float(n1[k])!r}, {float(n2[k])!r})")
                elif not cf_ok[k]:
                    fail(f"closed-form mismatch: divergence={div.name} beta={beta!r} X1={float(x1[k])!r} "
                         f"X2={float(x2[k])!r} closed=({float(c1[k])!r}, {float(c2[k])!r}) analytic=({float(d1[k])!r}, {float(d2[k])!r})")
            n_fd += x1.size
            n_cf += x1.size
            bad_fd += int(np.sum(~ok))
            bad_cf += int(np.sum(~cf_ok))
    summary.append(("finite_difference", n_fd, bad_fd))
    summary.append(("closed_form", n_cf, bad_cf))

    rng = np.random.default_rng(cfg["seed"])
    bad_order = 0
    for _ in range(int(cfg["ordering_samples"])):
        a, b = rng.uniform(0, cfg["ordering_x_max"], 2)
        hi, lo = max(a, b), min(a, b)
        if not 0 < lo < hi:
            continue
        try:
            verify_ratio_ordering(hi, lo)
        except OrderingError as exc:
            bad_order += 1
            fail(str(exc))
    summary.append(("ratio_ordering", int(cfg["ordering_samples"]), bad_order))

    bad_policy = 0
    n_policy = int(cfg["policy_problems"])
    for i in range(n_policy):
        problem = random_policy_problem(rng, divs[i % len(divs)])
        try:
            sol = solve_optimal_policy(problem)
            q = recover_q_from_policy(sol.policy, problem.pi_ref, problem.beta, problem.divergence, sol.lam)
            dev = float(np.max(np.abs(q - problem.q_values)))
        except (InfeasibleError, ConvergenceError) as exc:
            dev, q = math.inf, str(exc)
        if not dev <= cfg["policy_tol"]:
            bad_policy += 1
            fail(f"policy round trip: divergence={problem.divergence.name} beta={problem.beta!r} "
                 f"q={problem.q_values.tolist()} pi_ref={problem.pi_ref.tolist()} deviation={dev!r}")
    summary.append(("policy_round_trip", n_policy, bad_policy))
    return rows, summary, first


VERIFY_HEADER = ["divergence", "beta", "x1", "x2", "loss", "d_x1", "d_x2", "ratio", "fd_check_passed"]


def cmd_verify(cfg: dict, out: Output) -> int:
    rows, summary, first = run_verify(cfg)
    out.add("verify.csv", csv_text(VERIFY_HEADER, rows))
    out.add("verify_summary.csv", csv_text(["suite", "checks", "failures"], summary))
    if first is not None:
        raise VerificationFailure(first)
    return EXIT_OK


# ---------------------------------------------------------------------------
# policy-solve


def cmd_policy_solve(cfg: dict, out: Output) -> int:
    try:
        problem = AlignmentProblem.from_dict(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy problem: {exc}") from exc
    try:
        sol = solve_optimal_policy(problem)
    except (InfeasibleError, ConvergenceError) as exc:
        raise VerificationFailure(str(exc)) from exc
    out.add("solution.json", json.dumps(sol.to_dict(), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "mode": "stepwise",
    "divergence": "reverse-kl",
    "beta": 10.0,
    "epochs": None,
    "lr": None,
    "k": 4,
    "seed": 0,
    # categorical
    "n_conditions": 4,
    "n_outcomes": 6,
    "n_records": 60,
    # step-wise
    "conditions": [0],
    "pairs_per_epoch": 400,
    "batch_size": 100,
    "eval_samples": 100,
    "self_check": True,
    "reference": None,
    "pretrain_epochs": 1000,
    "pretrain_lr": 2e-3,
    "hidden": 128,
    "dataset_size": 2048,
    "T": 50,
    # reporting
    "n_samples": 500,
    "grid": 64,
    "extent": 3.0,
    "coverage_radius": 0.3,
}
MODE_DEFAULTS = {
    "categorical": {"epochs": 200, "lr": 0.1},
    "stepwise": {"epochs": 30, "lr": 2e-5},
    "stepwise-bound": {"epochs": 30, "lr": 2e-5},
}
TRACE_HEADER = list(TrainTrace.COLUMNS)


def categorical_dataset(n_conditions: int, n_outcomes: int, n_records: int, seed: int):
    """Records ranked by a hidden random utility; returns (records, utility)."""
    rng = np.random.default_rng(seed)
    utility = rng.normal(size=(n_conditions, n_outcomes))
    records = []
    for _ in range(n_records):
        c = int(rng.integers(n_conditions))
        a, b = (int(v) for v in rng.choice(n_outcomes, 2, replace=False))
        w, l = (a, b) if utility[c, a] > utility[c, b] else (b, a)
        records.append(PreferenceRecord(c, w, l))
    return records, utility


def _bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def _train_categorical_one(cfg: dict, div: Divergence, prefix: str, out: Output) -> dict:
    records, _ = categorical_dataset(cfg["n_conditions"], cfg["n_outcomes"], cfg["n_records"], cfg["seed"])
    ref = CategoricalPolicy.random(cfg["n_conditions"], cfg["n_outcomes"], seed=cfg["seed"] + 1)
    policy, trace = train_categorical(ref, ref, records, LossConfig(div, cfg["beta"]), cfg["epochs"], cfg["lr"])
    extras = _categorical_extras(policy, records)
    rng = np.random.default_rng(cfg["seed"] + 2)
    probs = policy.probs()
    rows, entropies = [], []
    for c in range(cfg["n_conditions"]):
        draws = rng.choice(cfg["n_outcomes"], cfg["n_samples"], p=probs[c])
        rows += [(cfg["seed"], c, int(o)) for o in draws]
        entropies.append(_bits(np.bincount(draws, minlength=cfg["n_outcomes"]).astype(float)))
    out.add(prefix + "trace.csv", csv_text(TRACE_HEADER, trace.rows()))
    out.add(prefix + "policy.json", json.dumps({"logits": policy.logits.tolist()}) + "\n")
    out.add(prefix + "samples.csv", csv_text(["seed", "condition", "outcome"], rows))
    report = {
        "divergence": div.name,
        "final_score": extras["mean_score"],
        "reference_score": trace.mean_score[0] if len(trace) else extras["mean_score"],
        "mode_coverage": extras["mode_coverage"],
        "mean_pairwise_distance": extras["mean_pairwise_distance"],
        "entropy_1d": float(np.mean(entropies)),
    }
    out.add(prefix + "metrics.json", json.dumps(report, indent=2) + "\n")
    return report


def _reference_policy(cfg: dict) -> GaussianStepPolicy:
    if cfg["reference"]:
        try:
            return GaussianStepPolicy.load(cfg["reference"])
        except OSError as exc:
            raise OSError(f"cannot read reference policy {cfg['reference']}: {exc}") from exc
    schedule = NoiseSchedule.desk(int(cfg["T"]))
    points, conds = ring_dataset(int(cfg["dataset_size"]), int(cfg["n_conditions"]), seed=cfg["seed"])
    return pretrain_reference(schedule, points, conds, int(cfg["pretrain_epochs"]), cfg["pretrain_lr"],
                              n_conditions=int(cfg["n_conditions"]), hidden=int(cfg["hidden"]), seed=cfg["seed"])


def _train_stepwise_one(cfg: dict, div: Divergence, ref: GaussianStepPolicy, prefix: str, out: Output) -> dict:
    oracle = PreferenceOracle.ring(int(cfg["n_conditions"]))
    conditions = [int(c) for c in cfg["conditions"]]
    objective = "bound" if cfg["mode"] == "stepwise-bound" else "generalized"
    policy, trace = train_stepwise(
        ref, ref, oracle, LossConfig(div, cfg["beta"]), int(cfg["epochs"]), cfg["lr"], k=int(cfg["k"]),
        pairs_per_epoch=int(cfg["pairs_per_epoch"]), seed=cfg["seed"], objective=objective,
        batch_size=int(cfg["batch_size"]), conditions=conditions, eval_samples=int(cfg["eval_samples"]),
        self_check=bool(cfg["self_check"]),
    )
    eval_seed = cfg["seed"] + 7
    _, _, ref_score, _, _ = evaluate_samples(ref, oracle, conditions, cfg["n_samples"], eval_seed)
    pts, conds, score, _, _ = evaluate_samples(policy, oracle, conditions, cfg["n_samples"], eval_seed)
    per_condition = []
    for c in conditions:
        sset = SampleSet(pts[conds == c], c)
        div_summary = sample_diversity(sset, oracle.centers, cfg["coverage_radius"])
        img = rasterize(sset, int(cfg["grid"]), cfg["extent"])
        per_condition.append({
            "condition": c,
            "mode_coverage": div_summary.mode_coverage,
            "mean_pairwise_distance": div_summary.mean_pairwise_distance,
            "entropy_1d": entropy_1d(img),
            "entropy_2d": entropy_2d(img),
        })
    out.add(prefix + "trace.csv", csv_text(TRACE_HEADER, trace.rows()))
    out.add(prefix + "policy.json", json.dumps(policy.to_dict()) + "\n")
    out.add(prefix + "samples.csv", csv_text(["seed", "t", "x", "y", "condition"],
                                             ((eval_seed, 0, p[0], p[1], c) for p, c in zip(pts, conds))))
    report = {
        "divergence": div.name,
        "final_score": score,
        "reference_score": ref_score,
        "mode_coverage": float(np.mean([r["mode_coverage"] for r in per_condition])),
        "mean_pairwise_distance": float(np.mean([r["mean_pairwise_distance"] for r in per_condition])),
        "entropy_1d": float(np.mean([r["entropy_1d"] for r in per_condition])),
        "per_condition": per_condition,
    }
    out.add(prefix + "metrics.json", json.dumps(report, indent=2) + "\n")
    return report


def resolve_train_config(given: dict) -> dict:
    cfg = _merge(TRAIN_DEFAULTS, given, "train")
    if cfg["mode"] not in MODE_DEFAULTS:
        raise ConfigError(f"mode must be one of {sorted(MODE_DEFAULTS)}, got {cfg['mode']!r}")
    for key, value in MODE_DEFAULTS[cfg["mode"]].items():
        if cfg[key] is None:
            cfg[key] = value
    _positive(cfg, "beta", "lr", "n_samples", "n_conditions")
    if int(cfg["epochs"]) < 0:
        raise ConfigError("epochs must be non-negative")
    if int(cfg["k"]) < 2:
        raise ConfigError(f"need k >= 2 candidates per step, got {cfg['k']}")
    _divergence_list(cfg["divergence"])
    return cfg


def cmd_train(cfg: dict, out: Output) -> int:
    divs = _divergence_list(cfg["divergence"])
    sweep = not isinstance(cfg["divergence"], str)
    reports = []
    if cfg["mode"] == "categorical":
        for div in divs:
            prefix = f"{_file_stem(div)}/" if sweep else ""
            reports.append(_train_categorical_one(cfg, div, prefix, out))
    else:
        ref = _reference_policy(cfg)
        out.add("reference.json", json.dumps(ref.to_dict()) + "\n")
        for div in divs:
            prefix = f"{_file_stem(div)}/" if sweep else ""
            reports.append(_train_stepwise_one(cfg, div, ref, prefix, out))
    if sweep:
        out.add("comparison.csv", csv_text(
            ["divergence", "final_score", "reference_score", "mode_coverage", "mean_pairwise_distance", "entropy_1d"],
            [(r["divergence"], r["final_score"], r["reference_score"], r["mode_coverage"],
              r["mean_pairwise_distance"], r["entropy_1d"]) for r in reports]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics


METRICS_DEFAULTS = {"input": None, "neighborhood": 3, "grid": 64, "extent": 3.0}


def _skip_space_and_comments(data: bytes, pos: int) -> int:
    while pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    return pos


def parse_pgm(path: Path) -> GrayImage:
    """Binary PGM (P5) with maxval exactly 255."""
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise PGMParseError(path, 0, f"expected magic 'P5', found {data[:2]!r}")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise PGMParseError(path, pos, f"expected whitespace before {name}")
        pos = _skip_space_and_comments(data, pos)
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PGMParseError(path, start, f"expected decimal {name}")
        values.append(int(data[start:pos]))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise PGMParseError(path, 2, f"non-positive size {width}x{height}")
    if maxval != 255:
        raise PGMParseError(path, pos - len(str(maxval)), f"maxval must be 255, got {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMParseError(path, pos, "expected a single whitespace byte before the raster")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise PGMParseError(path, len(data), f"raster truncated: need {need} bytes, found {len(data) - pos}")
    if len(data) - pos > need:
        raise PGMParseError(path, pos + need, f"{len(data) - pos - need} trailing bytes after the raster")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width)
    return GrayImage(pixels.copy())


def write_pgm(path: Path, img: GrayImage) -> None:
    path.write_bytes(b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes())


def load_sample_images(path: Path, grid: int, extent: float) -> list[tuple[str, GrayImage]]:
    """Rasterize final (t = 0) samples of a seed,t,x,y,condition CSV, one image per condition."""
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"x", "y", "condition"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ConfigError(f"{path}: sample CSV needs columns {sorted(required)}")
        groups: dict[int, list[tuple[float, float]]] = {}
        for line, row in enumerate(reader, start=2):
            if "t" in row and row["t"] not in ("", "0"):
                continue
            try:
                groups.setdefault(int(row["condition"]), []).append((float(row["x"]), float(row["y"])))
            except ValueError as exc:
                raise ConfigError(f"{path}: line {line}: {exc}") from exc
    if not groups:
        raise ConfigError(f"{path}: no t = 0 samples")
    return [(f"condition_{c}", rasterize(SampleSet(np.array(groups[c]), c), grid, extent)) for c in sorted(groups)]


def _guarded(fn: Callable[[GrayImage, GrayImage], Any], a: GrayImage, b: GrayImage):
    try:
        return fn(a, b)
    except ValueError:  # image below the metric's minimum size
        return math.nan


def metric_tables(images: list[tuple[str, GrayImage]], neighborhood: int = 3):
    pairwise = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            (na, a), (nb, b) = images[i], images[j]
            if a.shape != b.shape:
                raise ConfigError(f"images {na} {a.shape} and {nb} {b.shape} differ in size")
            pairwise.append((na, nb, rmse(a, b), psnr(a, b), _guarded(ssim, a, b), _guarded(fsim, a, b)))
    per_image = [(name, entropy_1d(img), entropy_2d(img, neighborhood)) for name, img in images]
    return pairwise, per_image


def cmd_metrics(cfg: dict, out: Output) -> int:
    if not cfg["input"]:
        raise ConfigError("metrics needs an 'input' directory of PGM files or a sample CSV")
    src = Path(cfg["input"])
    if src.is_dir():
        paths = sorted(src.glob("*.pgm"))
        if not paths:
            raise ConfigError(f"{src}: no .pgm files")
        images = [(p.name, parse_pgm(p)) for p in paths]
    elif src.is_file():
        images = load_sample_images(src, int(cfg["grid"]), cfg["extent"])
    else:
        raise OSError(f"input path {src} does not exist")
    pairwise, per_image = metric_tables(images, int(cfg["neighborhood"]))
    out.add("pairwise.csv", csv_text(["img_a", "img_b", "rmse", "psnr", "ssim", "fsim"], pairwise))
    out.add("entropy.csv", csv_text(["img", "entropy1d", "entropy2d"], per_image))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


@dataclass(frozen=True)
class Command:
    run: Callable[[dict, Output], int]
    resolve: Callable[[dict], dict]


def _with_defaults(defaults: dict, name: str):
    return lambda given: _merge(defaults, given, name)


def _resolve_metrics(given: dict) -> dict:
    cfg = _merge(METRICS_DEFAULTS, given, "metrics")
    if cfg["input"]:
        cfg["input"] = str(Path(cfg["input"]).resolve())
    return cfg


COMMANDS = {
    "landscape": Command(cmd_landscape, _with_defaults(LANDSCAPE_DEFAULTS, "landscape")),
    "verify": Command(cmd_verify, _with_defaults(VERIFY_DEFAULTS, "verify")),
    "policy-solve": Command(cmd_policy_solve, lambda given: dict(given)),
    "train": Command(cmd_train, resolve_train_config),
    "metrics": Command(cmd_metrics, _resolve_metrics),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdalign", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="JSON configuration file")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    parser.add_argument("--seed", type=int, help="overrides the config's seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = COMMANDS[args.command]
    out = Output(args.out)
    try:
        given = {}
        if args.config is not None:
            try:
                given = json.loads(args.config.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
            if not isinstance(given, dict):
                raise ConfigError(f"{args.config}: top level must be an object")
        if args.seed is not None:
            if args.command == "policy-solve":
                raise ConfigError("policy-solve takes no seed")
            given["seed"] = args.seed
        cfg = command.resolve(given)
        out.prepare()
        out.add("config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        try:
            code = command.run(cfg, out)
        except VerificationFailure:
            out.flush()
            raise
        out.flush()
        return code
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, PGMParseError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
