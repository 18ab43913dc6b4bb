import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import signal, stats

from mixnpe import cli
from mixnpe.exceptions import ReferenceInvalidError, TrainingError


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Simulate 10^4 toy pairs and train with the default toy architecture."""
    root = tmp_path_factory.mktemp("toy")
    assert run("simulate", "--model", "gaussian_toy", "--n", 10_000, "--seed", 0,
               "--out", root / "sim") == 0
    assert run("train", "--data", root / "sim" / "dataset.csv", "--out", root / "train") == 0
    return root


# -- simulate ------------------------------------------------------------------


def test_simulate_toy(tmp_path):
    assert run("simulate", "--model", "gaussian_toy", "--n", 1000, "--seed", 0, "--out", tmp_path / "a") == 0
    rows = read_rows(tmp_path / "a" / "dataset.csv")
    assert len(rows) == 1000 and list(rows[0]) == ["theta_d_0", "theta_c_0", "x_0"]
    meta = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert meta["n_rejected"] == 0 and meta["seed"] == 0
    assert json.loads((tmp_path / "a" / "resolved_config.json").read_text())["model"] == "gaussian_toy"


def test_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        run("simulate", "--model", "tandem_queue", "--n", 500, "--seed", 4, "--out", tmp_path / name)
    for f in ("dataset.csv", "dataset.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_queue_rejection_fraction(tmp_path):
    assert run("simulate", "--model", "tandem_queue", "--n", 10_000, "--seed", 1, "--out", tmp_path) == 0
    meta = json.loads((tmp_path / "dataset.json").read_text())
    print(f"queue rejection fraction {meta['rejection_fraction']:.4f}")
    assert meta["rejection_fraction"] == pytest.approx(0.04, abs=0.02)


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert run("simulate", "--model", "coal_mining", "--n", 5) == 0
    assert (tmp_path / "simulate" / "dataset.csv").exists()


# -- train / sample / logprob ---------------------------------------------------


def test_train_outputs(toy_run):
    out = toy_run / "train"
    assert (out / "model.mnpe").exists()
    log = read_rows(out / "training_log.csv")
    assert log and set(log[0]) == {"epoch", "train_loss", "validation_loss"}
    config = json.loads((out / "resolved_config.json").read_text())
    assert config["model"] == "gaussian_toy" and config["architecture"]["num_transforms"] == 5


def test_intermediate_observation_gives_bimodal_samples(toy_run, tmp_path):
    assert run("sample", "--ckpt", toy_run / "train" / "model.mnpe", "--obs", "1.0", "--n", 10_000,
               "--seed", 0, "--out", tmp_path / "s.csv") == 0
    theta = np.array([float(r["theta_c_0"]) for r in read_rows(tmp_path / "s.csv")])
    grid = np.linspace(-3, 3, 601)
    density = stats.gaussian_kde(theta)(grid)
    peaks, _ = signal.find_peaks(density, height=0.2 * density.max())
    assert len(peaks) == 2
    left, right = grid[peaks]
    assert left < 0 < right
    dip = density[peaks[0]:peaks[1]].min()
    assert dip < 0.8 * density[peaks].min()


def test_sampling_seeds(toy_run, tmp_path):
    ckpt = toy_run / "train" / "model.mnpe"
    for seed in (1, 2):
        run("sample", "--ckpt", ckpt, "--obs", "1.0", "--n", 5000, "--seed", seed,
            "--out", tmp_path / f"s{seed}.csv")
    a, b = (read_rows(tmp_path / f"s{s}.csv") for s in (1, 2))
    assert [r["theta_c_0"] for r in a] != [r["theta_c_0"] for r in b]
    frac = [np.mean([int(r["theta_d_0"]) for r in rows]) for rows in (a, b)]
    assert frac[0] == pytest.approx(frac[1], abs=0.03)


def test_sample_batch_of_observations(toy_run, tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("x_0\n-0.5\n2.5\n")
    assert run("sample", "--ckpt", toy_run / "train" / "model.mnpe", "--obs", obs, "--n", 20,
               "--out", tmp_path / "s.csv") == 0
    rows = read_rows(tmp_path / "s.csv")
    assert len(rows) == 40 and {r["obs"] for r in rows} == {"0", "1"}


def test_logprob_ordering(toy_run, tmp_path, capsys):
    ckpt = toy_run / "train" / "model.mnpe"
    run("sample", "--ckpt", ckpt, "--obs", "0.3", "--n", 1, "--seed", 3, "--out", tmp_path / "s.csv")
    row = read_rows(tmp_path / "s.csv")[0]
    capsys.readouterr()
    assert run("logprob", "--ckpt", ckpt, "--theta", f"{row['theta_d_0']},{row['theta_c_0']}",
               "--obs", "0.3") == 0
    inside = float(capsys.readouterr().out)
    assert run("logprob", "--ckpt", ckpt, "--theta", "0,40.0", "--obs", "0.3") == 0
    outside = float(capsys.readouterr().out)
    assert np.isfinite(inside) and inside >= outside


# -- calibrate / evaluate --------------------------------------------------------


def test_calibrate_trained_toy(toy_run, tmp_path):
    ckpt = toy_run / "train" / "model.mnpe"
    for name in ("a", "b"):
        assert run("calibrate", "--model", "gaussian_toy", "--ckpt", ckpt, "--n-test", 500, "--s", 1000,
                   "--seed", 0, "--out", tmp_path / name) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["sbc"]["ecdf_inside_band"] == [True]
    table = report["reliability"][0]
    assert table["baseline_halfnormal"] > 0 and table["baseline_exact"] > 0
    assert len(table["rule_of_thumb"]) == 10
    flags = [int(r["rule_of_thumb"]) for r in read_rows(tmp_path / "a" / "reliability.csv")]
    assert flags == [int(v) for v in table["rule_of_thumb"]]
    assert len(read_rows(tmp_path / "a" / "ecdf.csv")) == 1001
    for f in ("report.json", "ecdf.csv", "reliability.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_calibrate_reference(tmp_path, capsys):
    assert run("calibrate", "--model", "coal_mining", "--reference", "--n-test", 100, "--s", 100,
               "--out", tmp_path) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["passes"] is True


def test_calibrate_rejects_mismatched_checkpoint(toy_run, tmp_path):
    assert run("calibrate", "--model", "coal_mining", "--ckpt", toy_run / "train" / "model.mnpe",
               "--n-test", 5, "--s", 5, "--out", tmp_path) == cli.EXIT_INPUT


def test_evaluate(toy_run, tmp_path):
    assert run("evaluate", "--model", "gaussian_toy", "--ckpt", toy_run / "train" / "model.mnpe",
               "--n-obs", 3, "--n-samples", 500, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_valid"] == 3 and 0.4 < summary["c2st_joint_mean"] < 0.75
    assert summary["predictive_mse"] > 0
    assert len(read_rows(tmp_path / "c2st.csv")) == 3


# -- benchmark -------------------------------------------------------------------


def _quick_config(path, **evaluation):
    ev = {"n_obs": 2, "n_samples": 300, "n_test": 50, "S": 50}
    ev.update(evaluation)
    path.write_text(json.dumps({
        "model": "gaussian_toy",
        "architecture": {"hidden_features": 16, "num_transforms": 2},
        "training": {"max_epochs": 5},
        "evaluation": ev,
    }))
    return path


def test_benchmark_table_is_reproducible(tmp_path):
    cfg = _quick_config(tmp_path / "cfg.json")
    for name in ("a", "b"):
        assert run("benchmark", "--task", "gaussian_toy", "--budgets", "200,400", "--seeds", "0",
                   "--config", cfg, "--out", tmp_path / name) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "results.csv")
    assert [r["budget"] for r in rows] == ["200", "400"] and all(r["status"] == "ok" for r in rows)
    assert list(rows[0]) == ["task", "budget", "seed", "status", "c2st_joint", "c2st_marginals", "eod", "ece"]
    assert len(read_rows(tmp_path / "a" / "timings.csv")) == 2
    resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert resolved["evaluation"]["budgets"] == [200, 400]


def test_benchmark_records_invalid_reference(tmp_path, monkeypatch):
    class Broken:
        def sample(self, x, n, rng):
            raise ReferenceInvalidError("ESS 12 below 500")

    monkeypatch.setattr(cli, "reference_for", lambda model: Broken())
    cfg = _quick_config(tmp_path / "cfg.json")
    assert run("benchmark", "--task", "gaussian_toy", "--budgets", "200", "--seeds", "0",
               "--config", cfg, "--out", tmp_path / "out") == 0
    assert read_rows(tmp_path / "out" / "results.csv")[0]["status"] == "reference_invalid"


@pytest.mark.slow
def test_toy_benchmark_approaches_chance(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "gaussian_toy",
                               "evaluation": {"n_obs": 5, "n_test": 200, "S": 200}}))
    assert run("benchmark", "--task", "gaussian_toy", "--budgets", "100,1000,10000",
               "--seeds", "0,1,2,3,4", "--config", cfg, "--out", tmp_path) == 0
    rows = read_rows(tmp_path / "results.csv")
    assert all(r["status"] == "ok" for r in rows)
    mean = {b: np.mean([float(r["c2st_joint"]) for r in rows if r["budget"] == b])
            for b in ("100", "1000", "10000")}
    print("toy benchmark mean joint C2ST by budget:", mean)
    assert mean["10000"] <= 0.55
    assert mean["10000"] < mean["100"]


# -- errors and exit codes ---------------------------------------------------------


def test_unknown_config_key(tmp_path, toy_run):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "gaussian_toy", "training": {"learning_rte": 1e-3}}))
    assert run("train", "--data", toy_run / "sim" / "dataset.csv", "--config", cfg,
               "--out", tmp_path / "t") == cli.EXIT_INPUT


def test_schema_mismatch_between_data_and_config(tmp_path, toy_run):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "tandem_queue"}))
    assert run("train", "--data", toy_run / "sim" / "dataset.csv", "--config", cfg,
               "--out", tmp_path / "t") == cli.EXIT_INPUT


def test_missing_and_corrupt_files(tmp_path, toy_run):
    assert run("train", "--data", tmp_path / "nope.csv", "--out", tmp_path / "t") == cli.EXIT_INPUT
    assert run("sample", "--ckpt", tmp_path / "nope.mnpe", "--obs", "1.0") == cli.EXIT_INPUT
    bad = tmp_path / "bad.mnpe"
    raw = bytearray((toy_run / "train" / "model.mnpe").read_bytes())
    raw[100] ^= 0x01
    bad.write_bytes(bytes(raw))
    assert run("sample", "--ckpt", bad, "--obs", "1.0", "--out", tmp_path / "s.csv") == cli.EXIT_CHECKPOINT
    assert run("sample", "--ckpt", toy_run / "train" / "model.mnpe", "--obs", "1.0,2.0,x") == cli.EXIT_INPUT
    assert run("logprob", "--ckpt", toy_run / "train" / "model.mnpe", "--theta", "0", "--obs", "1") == cli.EXIT_INPUT


def test_training_failure_exit_code(tmp_path, toy_run, monkeypatch):
    def explode(self, dataset):
        raise TrainingError("non-finite loss", epoch=0, batch=3)

    monkeypatch.setattr(cli.MNPE, "fit_dataset", explode)
    assert run("train", "--data", toy_run / "sim" / "dataset.csv", "--out", tmp_path) == cli.EXIT_TRAINING


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mixnpe.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "mixnpe" in proc.stdout
