import csv
import json
import time

import numpy as np
import pytest

from gmle_mix.ci import confidence_interval
from gmle_mix.cli import main, parse_grid, read_dataset, resolve_threads, InputError
from gmle_mix.estimators import estimate_all
from gmle_mix.models import BinomialStratumKernel, PoissonStratumKernel
from gmle_mix.npmle import EmConfig
from gmle_mix.sim import binomial_thin, make_rng


def write_csv(path, rows, kappa=False):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["stratum_id", "x", "k"] + (["kappa"] if kappa else []))
        for i, row in enumerate(rows):
            out.writerow([f"s{i}", *row])
    return str(path)


@pytest.fixture
def toy(tmp_path):
    return write_csv(tmp_path / "toy.csv", [(1, 3), (0, 2), (2, 2)])


@pytest.fixture
def survey(tmp_path):
    rng = make_rng(17)
    lam = np.where(np.arange(300) % 2, 2.0, 0.8)
    k = rng.poisson(lam)
    x = rng.binomial(k, np.where(lam > 1, 0.35, 0.7))
    return write_csv(tmp_path / "survey.csv", np.column_stack([x, k]).tolist())


def test_fit_matches_library(toy, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", toy, "--grid", "10", "--iters", "200", "--output", str(out)]) == 0
    _, data = read_dataset(toy)
    grid = parse_grid("10", "poisson", data)
    est = estimate_all(PoissonStratumKernel(), data, grid, EmConfig(200))
    report = json.loads(out.read_text())
    assert report["gmle"] == est.gmle
    assert report["naive"] == est.naive == pytest.approx((1 / 3 + 0 + 1) / 3)
    assert report["extreme_collapse"] == pytest.approx(3 / 7)
    assert report["seed"] == 0
    printed = capsys.readouterr().out
    assert f"{est.gmle:.6f}" in printed and "empty strata" in printed


def test_fit_posterior_csv(toy, tmp_path):
    post = tmp_path / "post.csv"
    assert main(["fit", toy, "--grid", "8", "--iters", "100", "--posterior-csv", str(post)]) == 0
    rows = list(csv.DictReader(open(post)))
    assert [r["stratum_id"] for r in rows] == ["s0", "s1", "s2"]
    _, data = read_dataset(toy)
    est = estimate_all(PoissonStratumKernel(), data, parse_grid("8", "poisson", data), EmConfig(100))
    assert [float(r["posterior_mean"]) for r in rows] == est.posterior_means.tolist()


def test_fit_binomial_with_kappa_column(tmp_path):
    path = write_csv(tmp_path / "b.csv", [(1, 2, 3), (0, 1, 3), (3, 3, 3)], kappa=True)
    out = tmp_path / "b.json"
    assert main(["fit", path, "--model", "binomial", "--grid", "6", "--iters", "50", "--output", str(out)]) == 0
    _, data = read_dataset(path)
    est = estimate_all(BinomialStratumKernel(3), data[:, :2], parse_grid("6", "binomial", data), EmConfig(50))
    assert json.loads(out.read_text())["gmle"] == est.gmle


def test_fit_retain_prob_is_seeded(survey, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["fit", survey, "--grid", "10", "--iters", "50", "--retain-prob", "0.3", "--seed", "5"]
    assert main(args + ["--output", str(a)]) == 0
    assert main(args + ["--output", str(b)]) == 0
    assert a.read_text() == b.read_text()
    _, data = read_dataset(survey)
    thinned = binomial_thin(data, 0.3, make_rng(5))
    ec = thinned[:, 0].sum() / thinned[:, 1].sum()
    assert json.loads(a.read_text())["extreme_collapse"] == pytest.approx(ec)


@pytest.mark.parametrize(
    "rows, needle",
    [([(1, 2), (3, 2)], "line 3"), ([(1, 2), ("a", 2)], "line 3"), ([(-1, 2)], "nonnegative")],
)
def test_bad_rows_exit_2(tmp_path, capsys, rows, needle):
    path = write_csv(tmp_path / "bad.csv", rows)
    assert main(["fit", path]) == 2
    assert needle in capsys.readouterr().err


def test_input_errors_exit_2(tmp_path, toy, capsys):
    dup = tmp_path / "dup.csv"
    dup.write_text("stratum_id,x,k\na,1,2\na,0,1\n")
    assert main(["fit", str(dup)]) == 2
    noheader = tmp_path / "nh.csv"
    noheader.write_text("id,x\n1,2\n")
    assert main(["fit", str(noheader)]) == 2
    assert main(["fit", str(tmp_path / "missing.csv")]) == 2
    assert main(["fit", toy, "--grid", "1:2"]) == 2
    assert main(["fit", toy, "--model", "binomial"]) == 2
    assert main(["fit", toy, "--retain-prob", "1.5"]) == 2
    assert main(["ci", toy, "--alpha", "1.5"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fit", toy, "--model", "geometric"])
    assert exc.value.code == 2


def test_ci_contains_gmle_and_nests(survey, tmp_path, capsys):
    wide, narrow = tmp_path / "w.json", tmp_path / "n.json"
    assert main(["ci", survey, "--grid", "15", "--alpha", "0.05", "--output", str(wide)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("eta in [") and "at level 0.95" in line and line.endswith("cells)")
    assert main(["ci", survey, "--grid", "15", "--alpha", "0.5", "--output", str(narrow)]) == 0
    w, n = json.loads(wide.read_text()), json.loads(narrow.read_text())
    assert w["eta_lower"] - 1e-6 <= n["eta_lower"] <= n["eta_upper"] <= w["eta_upper"] + 1e-6
    _, data = read_dataset(survey)
    grid = parse_grid("15", "poisson", data)
    est = estimate_all(PoissonStratumKernel(), data, grid, EmConfig(5000))
    assert w["eta_lower"] - 1e-6 <= est.gmle <= w["eta_upper"] + 1e-6
    lib = confidence_interval(PoissonStratumKernel(), data, grid, 0.05)
    assert (w["eta_lower"], w["eta_upper"]) == (lib.eta_lower, lib.eta_upper)


def test_ci_constant_eta_zero_width(survey):
    _, data = read_dataset(survey)
    grid = parse_grid("15", "poisson", data)
    res = confidence_interval(PoissonStratumKernel(), data, grid, 0.05, eta_values=np.full(len(grid.atoms), 0.25))
    assert res.eta_lower == res.eta_upper == 0.25


def test_ci_infeasible_exit_4(survey, capsys):
    # a grid of tiny rates cannot explain the observed cell frequencies
    assert main(["ci", survey, "--grid", "0.01:0.05:2,0.01:0.05:2"]) == 4
    assert "infeasible" in capsys.readouterr().err


def test_simulate_smoke(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("GMLE_MIX_THREADS", "2")
    assert resolve_threads(None) == 2
    assert resolve_threads(1) == 1
    start = time.perf_counter()
    assert main(["simulate", "table1", "--reps", "1", "--seed", "9", "--output", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 60
    table = capsys.readouterr().out
    assert "seed 9" in table and table.count(", (") >= 3
    payload = json.loads((tmp_path / "table1.json").read_text())
    assert len(payload["rows"]) == 3 and payload["seed"] == 9
    monkeypatch.setenv("GMLE_MIX_THREADS", "many")
    with pytest.raises(InputError):
        resolve_threads(None)


def test_simulate_bad_configs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "negative_binomial", "rows": []}))
    assert main(["simulate", str(bad)]) == 2
    assert main(["simulate", str(tmp_path / "nope.json")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"model": "poisson_sizes", "rows": [{"groups": [{"n_strata": 3}]}]}))
    assert main(["simulate", str(broken)]) == 2


def test_probe_convergence_cli(tmp_path, capsys):
    out = tmp_path / "probe.json"
    args = ["probe-convergence", "--n", "50,100", "--grid", "0.2:2:8,0.2:2:8", "--iters", "100", "--output", str(out)]
    assert main(args) == 0
    points = json.loads(out.read_text())["points"]
    assert [p["n"] for p in points] == [50, 100]
    assert main(["probe-convergence", "--thetas", "1,2,3"]) == 2
    assert main(["probe-convergence", "--model", "binomial"]) == 2
