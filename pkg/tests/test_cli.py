import csv
import importlib.util
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from fdalign import cli
from fdalign.metrics import GrayImage

FIXTURES = Path(__file__).parent / "fixtures"
_spec = importlib.util.spec_from_file_location("regenerate", FIXTURES / "regenerate.py")
regenerate = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(regenerate)


def run(tmp_path, command, cfg=None, out="out", extra=()):
    args = [command, "--out", str(tmp_path / out), *extra]
    if cfg is not None:
        path = tmp_path / f"{out}_cfg.json"
        path.write_text(json.dumps(cfg))
        args += ["--config", str(path)]
    return cli.main(args)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# landscape


LANDSCAPE_SMALL = {"n": 25, "x_min": 0.2, "x_max": 5.0}


def test_landscape_anchor_and_files(tmp_path):
    assert run(tmp_path, "landscape") == 0
    out = tmp_path / "out"
    for stem in ("reverse-kl", "forward-kl", "alpha-0.6", "js"):
        rows = read_csv(out / f"landscape_{stem}.csv")
        assert len(rows) == 100 * 100
        assert (out / f"landscape_{stem}.svg").read_text().startswith("<svg")
        # the diagonal X1 = X2 always gives ln 2; take the grid point nearest (1, 1)
        near = min(rows, key=lambda r: (float(r["x1"]) - 1) ** 2 + (float(r["x2"]) - 1) ** 2)
        assert float(near["x1"]) == float(near["x2"])
        assert float(near["loss"]) == pytest.approx(math.log(2), abs=1e-12)


def test_landscape_js_is_smoothest(tmp_path):
    assert run(tmp_path, "landscape", LANDSCAPE_SMALL) == 0
    rows = read_csv(tmp_path / "out" / "smoothness.csv")
    flagged = [r["divergence"] for r in rows if r["smoothest"] == "true"]
    assert flagged == ["js"]


def test_landscape_reruns_are_byte_identical(tmp_path):
    assert run(tmp_path, "landscape", LANDSCAPE_SMALL, out="a") == 0
    assert run(tmp_path, "landscape", LANDSCAPE_SMALL, out="b") == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_landscape_bad_grid_is_config_error(tmp_path):
    assert run(tmp_path, "landscape", {"x_min": 5.0, "x_max": 1.0}) == cli.EXIT_CONFIG


# verify


def test_verify_default_passes(tmp_path):
    assert run(tmp_path, "verify") == 0
    rows = read_csv(tmp_path / "out" / "verify.csv")
    assert len(rows) == 4800
    assert all(r["fd_check_passed"] == "true" for r in rows)
    summary = read_csv(tmp_path / "out" / "verify_summary.csv")
    assert summary and all(int(r["failures"]) == 0 for r in summary)


def test_verify_fault_injection_exits_one(tmp_path):
    assert run(tmp_path, "verify", {"inject_fault": True}) == cli.EXIT_VERIFY
    assert (tmp_path / "out" / "verify.csv").exists()


def test_verify_empty_grid_writes_nothing(tmp_path):
    assert run(tmp_path, "verify", {"n": 0}) == cli.EXIT_CONFIG
    assert not (tmp_path / "out" / "verify.csv").exists()


def test_unknown_config_key(tmp_path, capsys):
    assert run(tmp_path, "verify", {"bogus": 1}) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["verify", "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_invalid_json_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    assert cli.main(["verify", "--config", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


# policy-solve


def test_policy_solve_writes_solution(tmp_path):
    cfg = {"q": [1.0, 0.0], "pi_ref": [0.5, 0.5], "beta": 1.0, "divergence": "reverse-kl"}
    assert run(tmp_path, "policy-solve", cfg) == 0
    sol = json.loads((tmp_path / "out" / "solution.json").read_text())
    expected = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    assert np.allclose(sol["policy"], expected, atol=1e-10)
    assert sol["residual"] <= 1e-10


def test_policy_solve_rejects_seed(tmp_path):
    cfg = {"q": [1.0], "pi_ref": [1.0], "beta": 1.0, "divergence": "js"}
    assert run(tmp_path, "policy-solve", cfg, extra=["--seed", "3"]) == cli.EXIT_CONFIG


def test_policy_solve_bad_problem(tmp_path):
    assert run(tmp_path, "policy-solve", {"q": [1.0, 2.0], "pi_ref": [1.0], "beta": 1.0,
                                          "divergence": "js"}) == cli.EXIT_CONFIG


# train


CATEGORICAL = {"mode": "categorical", "divergence": "js", "epochs": 30, "seed": 4}


def test_categorical_train_is_deterministic(tmp_path):
    assert run(tmp_path, "train", CATEGORICAL, out="a") == 0
    assert run(tmp_path, "train", CATEGORICAL, out="b") == 0
    for name in ("trace.csv", "policy.json", "samples.csv", "metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    trace = read_csv(tmp_path / "a" / "trace.csv")
    assert [int(r["epoch"]) for r in trace] == list(range(30))


def test_categorical_sweep_writes_comparison(tmp_path):
    cfg = dict(CATEGORICAL, divergence=cli.FOUR_DIVERGENCES)
    assert run(tmp_path, "train", cfg) == 0
    rows = read_csv(tmp_path / "out" / "comparison.csv")
    assert [r["divergence"] for r in rows] == ["reverse-kl", "forward-kl", "alpha:0.6", "js"]
    for stem in ("reverse-kl", "forward-kl", "alpha-0.6", "js"):
        assert (tmp_path / "out" / stem / "trace.csv").exists()


def test_train_bad_mode(tmp_path):
    assert run(tmp_path, "train", {"mode": "nope"}) == cli.EXIT_CONFIG


def test_stepwise_reverse_kl_trace_matches_spo_fixture(tmp_path):
    assert run(tmp_path, "train", regenerate.SPO_CONFIG) == 0
    got = read_csv(tmp_path / "out" / "trace.csv")
    want = read_csv(FIXTURES / "spo_trace.csv")
    assert len(got) == len(want) == regenerate.SPO_CONFIG["epochs"]
    for g, w in zip(got, want):
        assert g.keys() == w.keys()
        for key in g:
            a, b = float(g[key]), float(w[key])
            assert abs(a - b) <= 1e-12 * max(1.0, abs(b)), key


def test_spo_fixture_regenerates():
    want = [[float(v) for v in r.values()] for r in read_csv(FIXTURES / "spo_trace.csv")]
    got = regenerate.spo_trace_rows()
    assert np.max(np.abs(np.array(got, dtype=float) - np.array(want))) <= 1e-12


def test_stepwise_reference_reuse(tmp_path):
    cfg = dict(regenerate.SPO_CONFIG, epochs=1)
    assert run(tmp_path, "train", cfg, out="a") == 0
    cfg["reference"] = str(tmp_path / "a" / "reference.json")
    cfg["pretrain_epochs"] = 0
    assert run(tmp_path, "train", cfg, out="b") == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_missing_reference_is_io_error(tmp_path):
    cfg = dict(regenerate.SPO_CONFIG, reference=str(tmp_path / "missing.json"))
    assert run(tmp_path, "train", cfg) == cli.EXIT_IO


def test_echoed_config_reproduces_run(tmp_path):
    assert run(tmp_path, "train", CATEGORICAL, out="a") == 0
    echoed = tmp_path / "a" / "config.json"
    assert cli.main(["train", "--config", str(echoed), "--out", str(tmp_path / "b")]) == 0
    for name in ("trace.csv", "samples.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# metrics


def _golden_run(tmp_path):
    assert run(tmp_path, "metrics", {"input": str(FIXTURES / "golden_pgm")}) == 0
    return tmp_path / "out"


def test_metrics_golden_bytes(tmp_path):
    out = _golden_run(tmp_path)
    for name in ("pairwise.csv", "entropy.csv"):
        assert (out / name).read_bytes() == (FIXTURES / f"golden_{name}").read_bytes()


def test_golden_images_match_generator():
    for name, img in regenerate.golden_images().items():
        assert np.array_equal(cli.parse_pgm(FIXTURES / "golden_pgm" / name).pixels, img.pixels)


def test_golden_values_against_oracles():
    from test_metrics import naive_entropy_1d, naive_entropy_2d, naive_rmse, piq_fsim, skimage_ssim

    imgs = {n: cli.parse_pgm(FIXTURES / "golden_pgm" / n).pixels for n in sorted(os.listdir(FIXTURES / "golden_pgm"))}
    for row in read_csv(FIXTURES / "golden_entropy.csv"):
        pix = imgs[row["img"]]
        assert abs(float(row["entropy1d"]) - naive_entropy_1d(pix)) <= 1e-9
        assert abs(float(row["entropy2d"]) - naive_entropy_2d(pix)) <= 1e-9
    for row in read_csv(FIXTURES / "golden_pairwise.csv"):
        a, b = imgs[row["img_a"]], imgs[row["img_b"]]
        r = naive_rmse(a, b)
        assert abs(float(row["rmse"]) - r) <= 1e-9
        assert abs(float(row["psnr"]) - 20 * math.log10(1 / r)) <= 1e-9
        assert abs(float(row["ssim"]) - skimage_ssim(a, b)) <= 1e-6
        assert abs(float(row["fsim"]) - piq_fsim(a, b)) <= 2e-2


def test_metrics_single_image_no_pairs(tmp_path):
    src = tmp_path / "imgs"
    src.mkdir()
    cli.write_pgm(src / "only.pgm", GrayImage(np.arange(64, dtype=np.uint8).reshape(8, 8)))
    assert run(tmp_path, "metrics", {"input": str(src)}) == 0
    assert read_csv(tmp_path / "out" / "pairwise.csv") == []
    assert len(read_csv(tmp_path / "out" / "entropy.csv")) == 1


def test_metrics_identical_pair(tmp_path):
    src = tmp_path / "imgs"
    src.mkdir()
    img = regenerate.golden_images()["b_rings.pgm"]
    cli.write_pgm(src / "x.pgm", img)
    cli.write_pgm(src / "y.pgm", img)
    assert run(tmp_path, "metrics", {"input": str(src)}) == 0
    (row,) = read_csv(tmp_path / "out" / "pairwise.csv")
    assert float(row["rmse"]) == 0.0
    assert float(row["ssim"]) == pytest.approx(1.0, abs=1e-12)
    assert row["psnr"] == "inf"


def test_metrics_malformed_pgm_reports_offset(tmp_path, capsys):
    src = tmp_path / "imgs"
    src.mkdir()
    (src / "bad.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    assert run(tmp_path, "metrics", {"input": str(src)}) == cli.EXIT_CONFIG
    assert "byte 14" in capsys.readouterr().err


def test_metrics_wrong_magic(tmp_path, capsys):
    src = tmp_path / "imgs"
    src.mkdir()
    (src / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    assert run(tmp_path, "metrics", {"input": str(src)}) == cli.EXIT_CONFIG
    assert "byte 0" in capsys.readouterr().err


def test_pgm_round_trip(tmp_path):
    img = GrayImage(np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8))
    cli.write_pgm(tmp_path / "r.pgm", img)
    assert np.array_equal(cli.parse_pgm(tmp_path / "r.pgm").pixels, img.pixels)


def test_metrics_from_sample_csv(tmp_path):
    train_cfg = dict(regenerate.SPO_CONFIG, epochs=1, conditions=[0, 1])
    assert run(tmp_path, "train", train_cfg, out="t") == 0
    assert run(tmp_path, "metrics", {"input": str(tmp_path / "t" / "samples.csv")}) == 0
    rows = read_csv(tmp_path / "out" / "entropy.csv")
    assert len(rows) == 2
    assert len(read_csv(tmp_path / "out" / "pairwise.csv")) == 1
