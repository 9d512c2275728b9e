import json
import math

import numpy as np
import pytest
import yaml

from robustcbf import bounds, cli, mvg, sim

SMALL = {
    "scenario": {"horizon": 40, "n_agents": 4},
    "train": {"steps": 30, "restarts": 1},
    "data": {"episodes": 2, "steps": 40},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


@pytest.fixture
def trained(tmp_path, config):
    out = tmp_path / "train"
    assert cli.main(["train", "--config", config, "--out", str(out)]) == cli.EXIT_OK
    return out / "models.json"


def synthetic_records(rng, n_records=20, per_record=500):
    """Records whose disturbances are drawn from the Gaussian they are scored against."""
    k2, k3 = bounds.sigma_level_quantile(2.0, 4), bounds.sigma_level_quantile(3.0, 4)
    out = []
    for i in range(n_records):
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.1 * np.eye(4)
        mean = rng.normal(size=4)
        d = rng.multivariate_normal(mean, cov, size=per_record)
        m2 = [float(bounds.mahalanobis_sq(x, mean, cov)) for x in d]
        hits = [[bool(m <= k2), bool(m <= k3), True] for m in m2]
        out.append(sim.TrialRecord(seed=i, mode="robust", n_agents=3, collided=False,
                                   min_separation=5.0, distance_to_collision=5.0, steps=per_record,
                                   fallback_events=0, reached_goal=True, calibration_hits=hits,
                                   calibration_m2=m2, whitened=[[0.0] * 4] * per_record))
    return out


def write_records(path, records):
    path.write_text("".join(r.to_json() + "\n" for r in records))


def test_train_writes_outputs_and_is_reproducible(tmp_path, config, trained):
    again = tmp_path / "again"
    assert cli.main(["train", "--config", config, "--out", str(again)]) == cli.EXIT_OK
    assert (again / "models.json").read_bytes() == trained.read_bytes()
    report = json.loads((trained.parent / "train_report.json").read_text())
    for cls in ("robot", "agent"):
        assert report[cls]["final_nll"] <= report[cls]["initial_nll"]
    resolved = yaml.safe_load((trained.parent / "resolved_config.yaml").read_text())
    assert resolved["train"]["steps"] == 30 and resolved["scenario"]["horizon"] == 40
    assert (trained.parent / "train_curves.csv").read_text().startswith("class,restart,step,train_nll")


def test_train_dataset_generation(tmp_path, config):
    data = tmp_path / "data.npz"
    out = tmp_path / "t"
    assert cli.main(["train", "--config", config, "--dataset", str(data), "--out", str(out)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--config", config, "--dataset", str(data), "--generate",
                     "--out", str(out)]) == cli.EXIT_OK
    assert data.exists()
    first = (out / "models.json").read_bytes()
    # second run reads the stored dataset and reproduces the same models
    assert cli.main(["train", "--config", config, "--dataset", str(data), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "models.json").read_bytes() == first


def test_flags_override_config(tmp_path, config):
    out = tmp_path / "t"
    assert cli.main(["train", "--config", config, "--steps", "10", "--out", str(out)]) == cli.EXIT_OK
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["train"]["steps"] == 10


def test_training_divergence_exit_code(tmp_path, config, monkeypatch):
    def broken(*args, **kwargs):
        raise mvg.MvgNumericalError("all training restarts diverged")

    monkeypatch.setattr(sim, "train_models", broken)
    assert cli.main(["train", "--config", config, "--out", str(tmp_path / "t")]) == cli.EXIT_NUMERIC


def test_usage_errors(tmp_path, config):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario: [unclosed")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_USAGE
    bad.write_text(yaml.safe_dump({"scenario": {"warp_speed": 9}}))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_USAGE
    bad.write_text(yaml.safe_dump({"extra": {}}))
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["run", "--config", config, "--mode", "robust", "--trials", "1",
                     "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    assert cli.main(["run", "--config", config, "--mode", "none", "--trials", "0",
                     "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["calibrate", str(tmp_path / "missing.jsonl")]) == cli.EXIT_USAGE


def test_run_paired_modes(tmp_path, config, trained):
    out = tmp_path / "run"
    argv = ["run", "--config", config, "--trials", "3", "--models", str(trained), "--out", str(out)]
    assert cli.main(argv + ["--mode", "robust"]) == cli.EXIT_OK
    assert cli.main(argv + ["--mode", "nominal"]) == cli.EXIT_OK
    robust = json.loads((out / "summary_robust.json").read_text())
    nominal = json.loads((out / "summary_nominal.json").read_text())
    assert robust["seeds"] == nominal["seeds"] == sim.trial_seeds(0, 3)
    lines = (out / "records_robust.jsonl").read_text().splitlines()
    records = [sim.TrialRecord.from_json(line) for line in lines]
    assert len(records) == 3
    assert robust["collision_rate"] == sum(r.collided for r in records) / 3
    assert (out / "trajectory_robust.csv").read_text().startswith("seed,step,body,x,y")
    assert (out / "scatter_robust.csv").exists() and (out / "ellipses.csv").exists()


def test_run_single_trial_and_output_env(tmp_path, config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", "--config", config, "--trials", "1", "--mode", "none"]) == cli.EXIT_OK
    out = tmp_path / "root" / "run"
    assert len((out / "records_none.jsonl").read_text().splitlines()) == 1
    assert (out / "resolved_config.yaml").exists()


def test_run_reproducible_from_snapshot(tmp_path, config):
    out = tmp_path / "a"
    assert cli.main(["run", "--config", config, "--trials", "2", "--mode", "nominal",
                     "--seed", "4", "--out", str(out)]) == cli.EXIT_OK
    snap = yaml.safe_load((out / "resolved_config.yaml").read_text())
    snap.pop("command")
    replay = tmp_path / "replay.yaml"
    replay.write_text(yaml.safe_dump(snap))
    again = tmp_path / "b"
    assert cli.main(["run", "--config", str(replay), "--out", str(again)]) == cli.EXIT_OK
    assert (again / "records_nominal.jsonl").read_text() == (out / "records_nominal.jsonl").read_text()


def test_calibrate_all_hits(tmp_path):
    rec = synthetic_records(np.random.default_rng(0), 2, 10)
    for r in rec:
        r.calibration_hits = [[True, True, True]] * len(r.calibration_hits)
    path = tmp_path / "records.jsonl"
    write_records(path, rec)
    out = tmp_path / "cal"
    assert cli.main(["calibrate", str(path), "--out", str(out)]) == cli.EXIT_OK
    rep = json.loads((out / "calibration.json").read_text())
    assert rep["fraction_2sigma"] == 1.0 and rep["fraction_3sigma"] == 1.0
    assert len((out / "calibration_rows.csv").read_text().splitlines()) == 1 + len(rec)


def test_calibrate_exact_model_matches_gaussian_mass(tmp_path):
    path = tmp_path / "records.jsonl"
    write_records(path, synthetic_records(np.random.default_rng(1)))
    out = tmp_path / "cal"
    assert cli.main(["calibrate", str(path), "--out", str(out)]) == cli.EXIT_OK
    rep = json.loads((out / "calibration.json").read_text())
    for lvl in (2, 3):
        lo, hi = rep[f"wilson95_{lvl}sigma"]
        assert lo <= math.erf(lvl / math.sqrt(2)) <= hi
    assert rep["samples"] == 20 * 500


def test_calibrate_empty_records(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert cli.main(["calibrate", str(path), "--out", str(tmp_path / "c")]) == cli.EXIT_USAGE
