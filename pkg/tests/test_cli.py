from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from attrcert import cli
from attrcert.model import Layer, ModelWeights
from attrcert.store import load_model, model_digest, read_results, save_model

from desk import desk_model

FAST = ["--samples", "4", "--n", "500"]
FAST_ATTACK = ["--repeats", "2", "--iterations", "5", "--nstar", "20", "--directions", "2"]


@pytest.fixture(scope="module")
def desk_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "desk.w"
    assert cli.main(["train", "--profile", "desk", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def linear_file(tmp_path_factory):
    W = np.random.default_rng(0).normal(size=(2, 64))
    path = tmp_path_factory.mktemp("model") / "linear.w"
    save_model(ModelWeights([Layer(W, np.zeros(2), "identity")]), path)
    return path


def run(capsys, *args):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def table(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_desk_profile_trains_the_reference_model(desk_file):
    assert model_digest(load_model(desk_file)) == model_digest(desk_model())


def test_train_accuracy_line_and_determinism(tmp_path, capsys):
    args = ["train", "--data", "synth:blobs", "--d", "8", "--arch", "8,16,2", "--epochs", "50", "--seed", "7"]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a.w")
    assert code == 0 and out.startswith("train accuracy ")
    assert run(capsys, *args, "--out", tmp_path / "b.w")[0] == 0
    assert model_digest(load_model(tmp_path / "a.w")) == model_digest(load_model(tmp_path / "b.w"))
    assert (tmp_path / "a.w.config").exists()


def test_usage_and_runtime_exit_codes(tmp_path, capsys):
    assert run(capsys, "train", "--data", "synth:blobs")[0] == 2
    assert run(capsys, "train", "--epochs", "many", "--out", tmp_path / "x")[0] == 2
    assert run(capsys, "certify", "--model", tmp_path / "missing.w", "--out", tmp_path / "c.csv")[0] == 1
    code, _, err = run(capsys, "train", "--data", "synth:blobs", "--d", "8", "--arch", "8,16,2",
                       "--activation", "identity", "--lr", "1e200", "--out", tmp_path / "div.w")
    assert code == 1 and "diverg" in err.lower()


def test_certify_rows(desk_file, tmp_path, capsys):
    out = tmp_path / "c.csv"
    code, *_ = run(capsys, "certify", "--profile", "desk", "--model", desk_file, "--kind", "T", "--r", "0.5",
                   "--eps", "0.25", "--n", "2000", "--samples", "10", "--out", out)
    rows = read_results(out)
    assert code == 0 and len(rows) == 10
    assert all(row.feasible and 0.0 < row.value < 1.0 for row in rows)
    assert [row.sample_index for row in rows] == list(range(10))


def test_certify_infeasible_budget(desk_file, tmp_path, capsys):
    out = tmp_path / "c.csv"
    code, *_ = run(capsys, "certify", "--profile", "desk", "--model", desk_file, "--r", "0.4", "--eps", "1.0",
                   *FAST, "--out", out)
    rows = read_results(out)
    assert code == 0 and rows and all(not row.feasible and row.value is None for row in rows)


def test_certify_max_eps_roundtrip(desk_file, tmp_path, capsys):
    common = ["--profile", "desk", "--model", desk_file, "--r", "0.5", *FAST]
    assert run(capsys, "certify", *common, "--kind", "max_eps", "--threshold", "0.9", "--out", tmp_path / "m.csv")[0] == 0
    for row in read_results(tmp_path / "m.csv"):
        assert row.feasible
        eps = row.value
        assert run(capsys, "certify", *common, "--kind", "T", "--eps", repr(eps), "--samples",
                   str(row.sample_index + 1), "--out", tmp_path / "t.csv")[0] == 0
        assert read_results(tmp_path / "t.csv")[-1].value >= 0.9 - 1e-8


def test_certify_probabilistic_interval(desk_file, tmp_path, capsys):
    out = tmp_path / "p.jsonl"
    assert run(capsys, "certify", "--profile", "desk", "--model", desk_file, *FAST, "--prob-interval", "0.05",
               "--mc-samples", "20000", "--format", "jsonl", "--out", out)[0] == 0
    for row in read_results(out, "jsonl"):
        assert row.t1 <= row.value <= row.t2


def _pivot_values(path):
    rows = table(path)
    cols = [float(c) for c in rows[0][1:]]
    return {float(r[0]): dict(zip(cols, (float(v) if v else None for v in r[1:]))) for r in rows[1:]}


def test_sweep_trends_linear_model(linear_file, tmp_path, capsys):
    # constant saliency isolates the formula trends from Monte Carlo and model effects
    pivot = tmp_path / "pivot.csv"
    assert run(capsys, "sweep", "--model", linear_file, "--method", "sm", *FAST, "--out", tmp_path / "s.csv",
               "--pivot", pivot)[0] == 0
    grid = _pivot_values(pivot)
    for eps in (0.5, 1.0):
        vals = list(grid[eps].values())
        assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(grid[1.0][r] <= grid[0.5][r] for r in grid[0.5])


def test_sweep_desk_model_trend_at_half(desk_file, tmp_path, capsys):
    pivot = tmp_path / "pivot.csv"
    assert run(capsys, "sweep", "--profile", "desk", "--model", desk_file, "--samples", "10", "--n", "2000",
               "--out", tmp_path / "s.csv", "--pivot", pivot)[0] == 0
    grid = _pivot_values(pivot)
    vals = list(grid[0.5].values())
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert all(grid[1.0][r] <= grid[0.5][r] for r in grid[0.5])


@pytest.mark.parametrize("mode, kind", [("r_eps", "bound_T"), ("r_T", "max_epsilon"), ("eps_T", "min_radius")])
def test_sweep_pivot_matches_long_format(linear_file, tmp_path, capsys, mode, kind):
    out, pivot = tmp_path / "s.csv", tmp_path / "p.csv"
    assert run(capsys, "sweep", "--model", linear_file, "--method", "sm", *FAST, "--mode", mode,
               "--t-grid", "0.6,0.9", "--eps-grid", "0.25,0.5", "--r-grid", "0.5,1.0",
               "--out", out, "--pivot", pivot)[0] == 0
    rows = read_results(out)
    grid = _pivot_values(pivot)
    assert len(rows) == 4 and all(row.kind == kind for row in rows)
    for row in rows:
        row_key = row.epsilon if mode == "r_eps" else row.threshold_T
        col_key = row.epsilon if mode == "eps_T" else row.r
        assert grid[row_key][col_key] == row.value


def test_sweep_empty_grid(linear_file, tmp_path, capsys):
    out, pivot = tmp_path / "s.csv", tmp_path / "p.csv"
    assert run(capsys, "sweep", "--model", linear_file, *FAST, "--eps-grid", "", "--out", out,
               "--pivot", pivot)[0] == 0
    assert len(table(out)) == 1 and read_results(out) == []
    assert table(pivot) == [["epsilon\\r"]]


def test_attack_rows(desk_file, tmp_path, capsys):
    out = tmp_path / "a.csv"
    assert run(capsys, "attack", "--profile", "desk", "--model", desk_file, "--samples", "3", *FAST_ATTACK,
               "--target-kind", "smoothed", "--out", out)[0] == 0
    rows = read_results(out)
    assert len(rows) == 6 and [(r.sample_index, r.repeat) for r in rows] == [(i, j) for i in range(3) for j in range(2)]
    assert all(r.delta_norm <= 0.25 and r.prediction_preserved and r.n_samples == 20 for r in rows)
    assert len({r.attack_seed for r in rows}) == 6


def test_attack_zero_budget(desk_file, tmp_path, capsys):
    out = tmp_path / "a.csv"
    assert run(capsys, "attack", "--profile", "desk", "--model", desk_file, "--samples", "3", *FAST_ATTACK,
               "--eps", "0", "--out", out)[0] == 0
    for r in read_results(out):
        assert r.delta_norm == 0.0 and r.topk == 1.0 and r.kendall == 1.0
        assert r.cosine == pytest.approx(1.0)


def test_validate_passes_and_writes_gap_report(desk_file, tmp_path, capsys):
    out = tmp_path / "v.csv"
    code, stdout, _ = run(capsys, "validate", "--profile", "desk", "--model", desk_file, *FAST, *FAST_ATTACK,
                          "--out", out, "--gap-report")
    assert code == 0 and "0 violations" in stdout
    rows = read_results(out)
    assert len(rows) == 2 * 4 * 2
    gaps = table(str(out) + ".gaps.csv")
    assert gaps[0] == ["r", "epsilon", "sample_index", "bound", "min_cosine", "gap"]
    values = [float(g[-1]) for g in gaps[1:]]
    assert len(values) == 8 and values == sorted(values) and min(values) >= 0.0


def test_validate_reports_violation(desk_file, tmp_path, capsys):
    # an M far below the true attribution bound makes T unsound
    code, _, err = run(capsys, "validate", "--profile", "desk", "--model", desk_file, *FAST, *FAST_ATTACK,
                       "--r", "0.5", "--m-strategy", "user:1e-6", "--out", tmp_path / "v.csv")
    assert code == 3
    assert "violation" in err and "command = validate" in err and "m_strategy = user:1e-6" in err


def test_validate_refuses_uncertified_threshold(desk_file, tmp_path, capsys):
    code, _, err = run(capsys, "validate", "--profile", "desk", "--model", desk_file, *FAST, *FAST_ATTACK,
                       "--r", "0.5", "--eps", "0.5", "--threshold", "0.99", "--out", tmp_path / "v.csv")
    assert code == 2 and "max epsilon" in err
    assert not (tmp_path / "v.csv").exists()


def test_config_file_layering(desk_file, tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("# desk overrides\neps = 0.3\nn = 400\nsamples = 2\nr = 0.4\n")
    out = tmp_path / "c.csv"
    assert run(capsys, "certify", "--profile", "desk", "--config", conf, "--model", desk_file, "--r", "0.6",
               "--out", out)[0] == 0
    rows = read_results(out)
    assert len(rows) == 2 and all(row.epsilon == 0.3 and row.r == 0.6 and row.n_samples == 400 for row in rows)
    sidecar = (tmp_path / "c.csv.config").read_text().splitlines()
    assert sidecar[0] == "command = certify" and "r = 0.6" in sidecar and "method = sm" in sidecar
    conf.write_text("bogus = 1\n")
    assert run(capsys, "certify", "--config", conf, "--model", desk_file, "--out", out)[0] == 2


def test_sidecar_replays_run(desk_file, tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert run(capsys, "certify", "--profile", "desk", "--model", desk_file, *FAST, "--out", out)[0] == 0
    first = out.read_bytes()
    replay = tmp_path / "replay.conf"
    replay.write_text("\n".join(line for line in (tmp_path / "c.csv.config").read_text().splitlines()
                                if not line.startswith(("command", "code_version"))))
    assert run(capsys, "certify", "--config", replay)[0] == 0
    assert out.read_bytes() == first


def test_parallel_workers_match_serial(desk_file, tmp_path, capsys):
    args = ["certify", "--profile", "desk", "--model", desk_file, *FAST]
    assert run(capsys, *args, "--out", tmp_path / "a.csv")[0] == 0
    assert run(capsys, *args, "--workers", "2", "--out", tmp_path / "b.csv")[0] == 0
    a, b = read_results(tmp_path / "a.csv"), read_results(tmp_path / "b.csv")
    assert [(r.sample_index, r.value) for r in a] == [(r.sample_index, r.value) for r in b]
    assert all(math.isfinite(r.value) for r in a)
