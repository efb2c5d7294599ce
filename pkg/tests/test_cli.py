import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mmc.cli import main
from mmc.data import low_rank_gaussian, parse_triplets, read_dense, write_triplets
from mmc.observations import ObservationSet

TIMING_KEYS = {"wall_time_s"}


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([args[0], "--out", str(out), *args[1:]])
    return code, out


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def snapshot(directory):
    """All files under ``directory`` with timing fields removed from JSON."""
    files = {}
    for root, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory)
            with open(path, "rb") as fh:
                raw = fh.read()
            files[rel] = strip_timing(json.loads(raw)) if name.endswith(".json") else raw
    return files


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_column(path, values):
    path.write_text("".join(f"{float(v)!r}\n" for v in values))


# ---------------------------------------------------------------- synth

def test_synth_writes_dataset(tmp_path):
    code, out = run(tmp_path, "s", "synth", "--n", "30", "--m", "20", "--r", "5", "--c", "10",
                    "--p", "0.35", "--seed", "1")
    assert code == 0
    train = parse_triplets(out / "train.csv")
    heldout = parse_triplets(out / "heldout.csv", shape=(30, 20))
    assert len(train) + len(heldout) == 600
    assert abs(len(train) - 0.35 * 600) < 4 * np.sqrt(600 * 0.35 * 0.65)
    assert read_dense(out / "z_star.csv").shape == (30, 20)
    meta = read_json(out / "train.csv.meta.json")
    assert (meta["n"], meta["m"], meta["indexing"]) == (30, 20, "0")


def test_synth_full_observation_gives_empty_heldout(tmp_path):
    code, out = run(tmp_path, "s", "synth", "--p", "1")
    assert code == 0
    assert (out / "heldout.csv").read_text() == "30,20\n"


def test_synth_is_byte_identical(tmp_path):
    args = ("synth", "--c", "10", "--p", "0.35", "--seed", "1")
    _, a = run(tmp_path, "a", *args)
    _, b = run(tmp_path, "b", *args)
    assert snapshot(a) == snapshot(b)


# ---------------------------------------------------------------- complete

def test_complete_one_step_exact_on_identity_toy(tmp_path):
    x = low_rank_gaussian(8, 6, 2, np.random.default_rng(0))
    obs = ObservationSet.from_mask(x, np.ones(x.shape, bool))
    write_triplets(tmp_path / "full.csv", obs)
    code, out = run(tmp_path, "c", "complete", "--algorithm", "mmc-1", "--rank", "2",
                    "--train", str(tmp_path / "full.csv"), "--test", str(tmp_path / "full.csv"))
    assert code == 0
    metrics = read_json(out / "metrics.json")
    assert metrics["rmse"]["test"] < 1e-6
    assert metrics["schema_version"] == 1
    assert np.allclose(read_dense(out / "m_hat.csv"), x, atol=1e-6)


def test_complete_mmc_beats_baseline_on_steep_link(tmp_path):
    common = ("--c", "10", "--p", "0.8", "--seed", "0")
    code_a, a = run(tmp_path, "mmc", "complete", "--algorithm", "mmc-c", "--preset", "synthetic", *common)
    code_b, b = run(tmp_path, "lrmc", "complete", "--algorithm", "lrmc-baseline", *common)
    assert code_a == code_b == 0
    assert read_json(a / "metrics.json")["rmse"]["test"] < read_json(b / "metrics.json")["rmse"]["test"]


def test_complete_trace_file(tmp_path):
    code, out = run(tmp_path, "c", "complete", "--preset", "synthetic", "--p", "0.35")
    assert code == 0
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,train_rmse,rank"
    assert 1 <= len(lines) - 1 <= 50
    metrics = read_json(out / "metrics.json")
    assert len(metrics["trace"]) == len(lines) - 1 == metrics["iterations"]


def test_complete_repeat_summary_and_jobs(tmp_path):
    args = ("complete", "--algorithm", "mmc-1", "--seeds", "0,1,2")
    _, serial = run(tmp_path, "serial", *args)
    _, parallel = run(tmp_path, "parallel", *args, "--jobs", "2")
    assert snapshot(serial) == snapshot(parallel)
    summary = read_json(serial / "summary.json")
    tests = [read_json(serial / f"seed{s}" / "metrics.json")["rmse"]["test"] for s in range(3)]
    assert summary["seeds"] == [0, 1, 2]
    assert summary["rmse"]["test"]["mean"] == pytest.approx(np.mean(tests))
    assert summary["rmse"]["test"]["std"] == pytest.approx(np.std(tests))


def test_complete_is_reproducible(tmp_path):
    args = ("complete", "--preset", "synthetic", "--c", "2", "--p", "0.5", "--seed", "3")
    _, a = run(tmp_path, "a", *args)
    _, b = run(tmp_path, "b", *args)
    assert snapshot(a) == snapshot(b)


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"algorithm": "mmc-1", "rank": 3, "p": 0.6}))
    _, a = run(tmp_path, "a", "complete", "--config", str(cfg))
    _, b = run(tmp_path, "b", "complete", "--config", str(cfg), "--rank", "4")
    ma, mb = read_json(a / "metrics.json"), read_json(b / "metrics.json")
    assert ma["algorithm"] == "mmc-1" and ma["config"]["rank"] == 3
    assert mb["config"]["rank"] == 4
    assert "p0.6" in ma["dataset"]


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    code, out = run(tmp_path, "a", "complete", "--config", str(cfg))
    assert code == 2
    assert "bogus" in read_json(out / "error.json")["error"]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MMC_OUTPUT_ROOT", str(tmp_path / "envroot"))
    assert main(["synth", "--n", "5", "--m", "4", "--r", "2"]) == 0
    assert (tmp_path / "envroot" / "train.csv").exists()


@pytest.mark.parametrize("args,code", [(("complete", "--rank", "50"), 2),
                                       (("complete", "--train", "/nonexistent/file.csv"), 1),
                                       (("complete", "--rank-schedule", "1,2"), 2),
                                       (("split",), 2)])
def test_errors_give_record_and_exit_code(tmp_path, capsys, args, code):
    got, out = run(tmp_path, "e", *args)
    assert got == code
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(record) >= {"error", "type"}
    assert read_json(out / "error.json") == record


def test_success_has_no_error_record(tmp_path):
    code, out = run(tmp_path, "ok", "synth", "--n", "5", "--m", "4", "--r", "2")
    assert code == 0 and not (out / "error.json").exists()


# ---------------------------------------------------------------- effective-rank

@pytest.fixture
def z_file(tmp_path):
    code, out = run(tmp_path, "s", "synth", "--seed", "0")
    assert code == 0
    return out / "z_star.csv"


def test_effective_rank_identity_link_is_constant(tmp_path, z_file):
    code, out = run(tmp_path, "e", "effective-rank", "--matrix", str(z_file), "--link", "identity")
    assert code == 0
    lines = (out / "effective_rank.csv").read_text().splitlines()
    assert lines[0] == "c,effective_rank"
    assert [int(line.split(",")[1]) for line in lines[1:]] == [5] * 5


def test_effective_rank_logistic_sweep_nondecreasing(tmp_path, z_file):
    code, out = run(tmp_path, "e", "effective-rank", "--matrix", str(z_file),
                    "--c-values", ",".join(str(c) for c in range(1, 21)))
    assert code == 0
    summary = read_json(out / "effective_rank.json")
    assert summary["nondecreasing_in_c"] is True
    assert summary["effective_rank"] == sorted(summary["effective_rank"])


def test_effective_rank_large_eps(tmp_path):
    (tmp_path / "a.csv").write_text("10,0\n0,1\n")
    code, out = run(tmp_path, "e", "effective-rank", "--matrix", str(tmp_path / "a.csv"),
                    "--eps", "0.99", "--link", "identity", "--c-values", "1")
    assert code == 0
    assert read_json(out / "effective_rank.json")["effective_rank"] == [1]


# ---------------------------------------------------------------- fitlink

def test_fitlink_feasible_input_unchanged(tmp_path):
    z = np.linspace(0, 1, 6)
    write_column(tmp_path / "z.csv", z)
    write_column(tmp_path / "x.csv", 0.3 * z)
    code, out = run(tmp_path, "f", "fitlink", "--z", str(tmp_path / "z.csv"), "--x", str(tmp_path / "x.csv"))
    assert code == 0
    knots = np.loadtxt(out / "fitlink_knots.csv", delimiter=",", skiprows=1)
    assert np.allclose(knots[:, 2], 0.3 * z, atol=1e-9)
    assert read_json(out / "fitlink_diagnostics.json")["objective"] == pytest.approx(0.0, abs=1e-12)


def test_fitlink_three_point_golden(tmp_path):
    write_column(tmp_path / "z.csv", [2.0, 0.0, 1.0])
    write_column(tmp_path / "x.csv", [1.0, 0.0, 5.0])
    code, out = run(tmp_path, "f", "fitlink", "--z", str(tmp_path / "z.csv"), "--x", str(tmp_path / "x.csv"))
    assert code == 0
    knots = np.loadtxt(out / "fitlink_knots.csv", delimiter=",", skiprows=1)
    assert knots[:, 0].tolist() == [0.0, 1.0, 2.0]
    assert knots[:, 2] == pytest.approx([4 / 3, 7 / 3, 7 / 3], abs=1e-9)


def test_fitlink_zero_lipschitz_gives_mean(tmp_path):
    write_column(tmp_path / "z.csv", [0.0, 1.0, 2.0, 3.0])
    write_column(tmp_path / "x.csv", [4.0, -2.0, 1.0, 3.0])
    code, out = run(tmp_path, "f", "fitlink", "--z", str(tmp_path / "z.csv"),
                    "--x", str(tmp_path / "x.csv"), "--lipschitz", "0")
    assert code == 0
    knots = np.loadtxt(out / "fitlink_knots.csv", delimiter=",", skiprows=1)
    assert knots[:, 2] == pytest.approx([1.5] * 4, abs=1e-9)


def test_fitlink_convergence_failure(tmp_path):
    write_column(tmp_path / "z.csv", [0.0, 1.0, 2.0])
    write_column(tmp_path / "x.csv", [0.0, 5.0, 1.0])
    code, out = run(tmp_path, "f", "fitlink", "--z", str(tmp_path / "z.csv"),
                    "--x", str(tmp_path / "x.csv"), "--max-iters", "1")
    assert code == 3
    diag = read_json(out / "fitlink_diagnostics.json")
    assert diag["converged"] is False and diag["iterations"] == 1
    assert read_json(out / "error.json")["type"] == "ConvergenceError"


# ---------------------------------------------------------------- split

def test_split_command(tmp_path):
    code, s = run(tmp_path, "s", "synth", "--p", "1")
    assert code == 0
    code, out = run(tmp_path, "sp", "split", "--input", str(s / "train.csv"), "--train-frac", "0.5",
                    "--val-frac", "0.25", "--seed", "2")
    assert code == 0
    parts = [parse_triplets(out / f"{p}.csv", shape=(30, 20)) for p in ("train", "val", "test")]
    assert [len(p) for p in parts] == [300, 150, 150]
    _, again = run(tmp_path, "sp2", "split", "--input", str(s / "train.csv"), "--train-frac", "0.5",
                   "--val-frac", "0.25", "--seed", "2")
    assert snapshot(out) == snapshot(again)


def test_split_per_row(tmp_path):
    code, s = run(tmp_path, "s", "synth", "--p", "1")
    code, out = run(tmp_path, "sp", "split", "--input", str(s / "train.csv"), "--per-row", "3,2")
    assert code == 0
    train = parse_triplets(out / "train.csv")
    assert np.bincount(train.rows).tolist() == [3] * 30


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mmc", "synth", "--n", "5", "--m", "4", "--r", "2",
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["train_entries"] > 0


def test_complete_from_dense_grid(tmp_path):
    x = low_rank_gaussian(10, 8, 2, np.random.default_rng(1))
    np.savetxt(tmp_path / "grid.csv", x, delimiter=",")
    args = ("complete", "--dense", str(tmp_path / "grid.csv"), "--p", "0.6", "--algorithm", "mmc-1",
            "--rank", "2", "--seed", "5")
    code, out = run(tmp_path, "d", *args)
    assert code == 0
    metrics = read_json(out / "metrics.json")
    assert metrics["dataset"] == "grid"
    assert metrics["rmse"]["test"] is not None
    _, again = run(tmp_path, "d2", *args)
    assert snapshot(out) == snapshot(again)
