import subprocess
import sys

import numpy as np
import pytest

from arborart.cli import main
from arborart.experiments import read_csv


def run(*argv):
    return main([str(a) for a in argv])


def test_akd_hand_traced(tmp_path):
    out = tmp_path / "akd.csv"
    assert run("akd", "--alpha", "0.25,0.5", "--L", 6, "--grid", 2, 512, "-o", out) == 0
    meta, rows = read_csv(out)
    assert meta["counters"] == "4,2"
    assert meta["sequence"] == "0,1,0,0,1,0"
    assert len(rows) == 64
    vol = sum((float(r["hi0"]) - float(r["lo0"])) * (float(r["hi1"]) - float(r["lo1"])) for r in rows)
    assert vol == pytest.approx(1.0)


def test_datagen_noiseless_and_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert run("datagen", "--n", 20, "--seed", 4, "--noise", 0, "--deterministic", "-o", path) == 0
    assert a.read_bytes() == b.read_bytes()
    meta, rows = read_csv(a)
    assert meta["schema"] == "arborart.datagen/1" and "created" not in meta
    assert all(r["y"] == r["f"] for r in rows)


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n = 12\np = 3\nseed = 9\n")
    out = tmp_path / "d.csv"
    assert run("datagen", "--config", cfg, "--set", "p=4", "--n", 7, "-o", out) == 0
    meta, rows = read_csv(out)
    assert len(rows) == 7
    assert meta["p"] == "4" and meta["seed"] == "9"
    assert {"x0", "x1", "x2", "x3"} <= set(rows[0])


def test_fit_regression(tmp_path):
    data = tmp_path / "d.csv"
    run("datagen", "--n", 150, "--seed", 1, "-o", data)
    prefix = tmp_path / "fit_"
    assert run("fit", "--data", data, "--trees", 5, "--iters", 60, "--net", "grid", 20, "-o", prefix) == 0
    _, draws = read_csv(f"{prefix}draws.csv")
    _, preds = read_csv(f"{prefix}predictions.csv")
    assert len(draws) == 60 and len(preds) == 150
    assert all(float(p["lo90"]) <= float(p["mean"]) <= float(p["hi90"]) for p in preds)
    assert "sigma2 posterior mean" in (tmp_path / "fit_report.txt").read_text()


def test_fit_design_net_and_classify(tmp_path):
    data = tmp_path / "c.csv"
    run("datagen", "--scenario", "classification", "--n", 80, "-o", data)
    prefix = tmp_path / "c_"
    assert run("fit", "--model", "classify", "--data", data, "--net", "design", "--trees", 3, "--iters", 40, "-o", prefix) == 0
    _, preds = read_csv(f"{prefix}predictions.csv")
    assert all(0 <= float(p["mean"]) <= 1 for p in preds)


def test_fit_density(tmp_path):
    data = tmp_path / "s.csv"
    run("datagen", "--scenario", "density", "--n", 100, "-o", data)
    prefix = tmp_path / "s_"
    assert run("fit", "--model", "density", "--data", data, "--trees", 2, "--iters", 30, "--net", "grid", 8, "-o", prefix) == 0
    _, preds = read_csv(f"{prefix}predictions.csv")
    assert all(float(p["mean"]) > 0 for p in preds)


def test_rate_and_alias(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    common = ["--L", "4,6", "--resolution", 32, "--emp-points", 100, "--deterministic"]
    assert run("rate", *common, "-o", a) == 0
    assert run("approx-rate", *common, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()
    _, rows = read_csv(a)
    assert list(rows[0]) == ["n", "L0", "n_leaves", "sup_err", "L2_err", "emp_err", "eps_bar"]


def test_kernelcheck(tmp_path):
    out = tmp_path / "k.csv"
    assert run("kernelcheck", "--d", "1,2", "--pairs", 1000, "-o", out) == 0
    _, rows = read_csv(out)
    assert [r["pass"] for r in rows] == ["true", "true"]


def test_priorsim(tmp_path):
    out = tmp_path / "p.csv"
    assert run("priorsim", "--p", 10, "--trials", 300, "--lemma-trials", 5000, "-o", out) == 0
    _, rows = read_csv(out)
    sizes = {r["label"]: float(r["value"]) for r in rows if r["section"] == "tree_size"}
    assert sum(v for k, v in sizes.items() if k.startswith("leaves=")) == pytest.approx(1.0)
    assert any(r["label"] == "s=2;eps=0.5;C1" for r in rows)


def test_simstudy_and_contraction(tmp_path):
    out = tmp_path / "s.csv"
    args = ["--n", 80, "--n-test", 50, "--trees", 3, "--iters", 20, "--burnin", 10, "--grid", 16]
    assert run("simstudy", *args, "--replicates", 2, "-o", out) == 0
    _, rows = read_csv(out)
    assert len(rows) == 6
    out = tmp_path / "c.csv"
    assert run("contraction", *args, "--n-list", "40,80,160", "-o", out) == 0
    meta, rows = read_csv(out)
    assert [int(r["n"]) for r in rows] == [40, 80, 160]
    assert np.isfinite(float(meta["slope"]))


def test_errors_return_nonzero(tmp_path):
    assert run("fit", "--data", tmp_path / "missing.csv") == 2
    assert run("datagen", "--sigma0", 0) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "arborart", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("arborart ")
