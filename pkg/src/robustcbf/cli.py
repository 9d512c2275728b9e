"""Command line entry point: ``robustcbf train | run | calibrate``.

Every command reads an optional YAML config, lets flags override its
fields (flags > file > built-in defaults) and writes a
``resolved_config.yaml`` next to its outputs, which reproduces the run on
its own. Outputs go to ``--out`` or, when absent, to
``$ROBUSTCBF_OUT/<command>`` (``runs/<command>`` if the variable is unset).

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import mvg, sim
from .bounds import sigma_level_quantile

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
OUT_ENV = "ROBUSTCBF_OUT"

logger = logging.getLogger("robustcbf")


class UsageError(Exception):
    """Bad flags, unreadable config or missing inputs (exit code 2)."""


class NumericalFailure(Exception):
    """Training or solving broke down numerically (exit code 3)."""


# --------------------------------------------------------------------------
# configuration


DEFAULT_DATA = {"episodes": 8, "steps": 200, "path": None}
DEFAULT_RUN = {"trials": 200, "modes": ["robust", "nominal"], "jobs": 1, "models": None}


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping at the top level")
    unknown = set(doc) - {"scenario", "train", "data", "run"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def scenario_from(doc: dict, **overrides) -> sim.ScenarioConfig:
    sc = dict(doc.get("scenario") or {})
    sc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return sim.ScenarioConfig.from_dict(sc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from exc


def train_config_from(doc: dict, **overrides) -> mvg.TrainConfig:
    base = asdict(sim.DEFAULT_TRAIN)
    base.update(doc.get("train") or {})
    base.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(mvg.TrainConfig)}
    unknown = set(base) - known
    if unknown:
        raise UsageError(f"unknown train fields: {sorted(unknown)}")
    for key in ("sigma_range", "length_range", "noise_range"):
        if base.get(key) is not None:
            base[key] = tuple(base[key])
    try:
        return mvg.TrainConfig(**base)
    except TypeError as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def section(doc: dict, name: str, defaults: dict, **overrides) -> dict:
    out = dict(defaults)
    given = doc.get(name) or {}
    unknown = set(given) - set(defaults)
    if unknown:
        raise UsageError(f"unknown {name} fields: {sorted(unknown)}")
    out.update(given)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def output_dir(flag: Optional[str], command: str) -> Path:
    if flag:
        out = Path(flag)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(out: Path, doc: dict) -> None:
    with open(out / "resolved_config.yaml", "w") as fh:
        yaml.safe_dump(_plain(doc), fh, sort_keys=True)


def _plain(obj):
    """Convert tuples and numpy scalars into YAML-safe builtins."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --------------------------------------------------------------------------
# datasets


def save_dataset(path: Path, data: Dict[str, list]) -> None:
    arrays = {}
    for cls, batches in data.items():
        for i, (X, Y) in enumerate(batches):
            arrays[f"{cls}_{i:05d}_X"] = X
            arrays[f"{cls}_{i:05d}_Y"] = Y
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path: Path) -> Dict[str, list]:
    try:
        npz = np.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc
    out: Dict[str, list] = {"robot": [], "agent": []}
    for key in sorted(npz.files):
        cls, idx, kind = key.rsplit("_", 2)
        if kind == "X":
            out.setdefault(cls, []).append((npz[key], npz[f"{cls}_{idx}_Y"]))
    if not out["robot"] or not out["agent"]:
        raise UsageError(f"dataset {path} lacks robot or agent batches")
    return out


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    doc = load_config(args.config)
    scen = scenario_from(doc, seed=args.seed)
    tcfg = train_config_from(doc, seed=args.seed, steps=args.steps, restarts=args.restarts)
    data_cfg = section(doc, "data", DEFAULT_DATA, episodes=args.episodes, path=args.dataset)
    out = output_dir(args.out, "train")

    path = data_cfg["path"]
    if path is not None and Path(path).exists():
        data = load_dataset(Path(path))
    elif path is not None and not args.generate:
        raise UsageError(f"dataset {path} does not exist (pass --generate to synthesise it)")
    else:
        data = sim.collect_training_data(scen, int(data_cfg["episodes"]), int(data_cfg["steps"]))
        if path is not None:
            save_dataset(Path(path), data)
            logger.info("wrote dataset %s", path)

    reports: Dict[str, mvg.TrainReport] = {}
    try:
        models = sim.train_models(data, tcfg, scen.window, reports)
    except mvg.MvgNumericalError as exc:
        raise NumericalFailure(f"training diverged: {exc}") from exc

    (out / "models.json").write_text(models.dumps())
    report = {cls: rep.to_dict() for cls, rep in reports.items()}
    (out / "train_report.json").write_text(json.dumps(report, indent=1))
    with open(out / "train_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "restart", "step", "train_nll"])
        for cls, rep in reports.items():
            for r in rep.restarts:
                for step, val in r["curve"]:
                    w.writerow([cls, r["restart"], step, repr(val)])
    write_resolved(out, {"command": "train", "scenario": scen.to_dict(), "train": asdict(tcfg),
                         "data": data_cfg})
    for cls, rep in reports.items():
        k = getattr(models, cls).kernel
        print(f"{cls}: sigma={k.sigma:.4g} length={k.length:.4g} noise={k.noise:.4g} "
              f"nll {rep.initial_nll:.6g} -> {rep.final_nll:.6g}")
    print(f"models written to {out / 'models.json'}")
    return EXIT_OK


def cmd_run(args) -> int:
    doc = load_config(args.config)
    scen = scenario_from(doc, seed=args.seed)
    modes = None if args.mode is None else (list(sim.MODES) if args.mode == "all" else [args.mode])
    run_cfg = section(doc, "run", DEFAULT_RUN, trials=args.trials, modes=modes,
                      jobs=args.jobs, models=args.models)
    for m in run_cfg["modes"]:
        if m not in sim.MODES:
            raise UsageError(f"unknown mode {m!r}")
    if int(run_cfg["trials"]) < 1:
        raise UsageError("--trials must be at least 1")
    models = None
    if "robust" in run_cfg["modes"]:
        path = run_cfg["models"]
        if path is None or not Path(path).exists():
            raise UsageError("robust mode needs an existing --models file (see `robustcbf train`)")
        try:
            models = sim.TrainedModels.loads(Path(path).read_text())
        except (ValueError, KeyError) as exc:
            raise UsageError(f"cannot load models {path}: {exc}") from exc
    out = output_dir(args.out, "run")
    write_resolved(out, {"command": "run", "scenario": scen.to_dict(), "run": run_cfg})

    t0 = time.time()
    results = sim.run_campaign(scen, int(run_cfg["trials"]), run_cfg["modes"], models,
                               jobs=int(run_cfg["jobs"]), keep_trace_first=True)
    for mode, records in results.items():
        with open(out / f"records_{mode}.jsonl", "w") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
        summary = sim.summarize(records)
        (out / f"summary_{mode}.json").write_text(json.dumps(_plain(summary), indent=1))
        write_trajectory(out / f"trajectory_{mode}.csv", records)
        if summary["calibration_samples"]:
            write_scatter(out / f"scatter_{mode}.csv", records)
            write_ellipses(out / "ellipses.csv")
        rate = summary["collision_rate"]
        lo, hi = summary["collision_rate_wilson95"]
        print(f"{mode}: collisions {summary['collisions']}/{summary['n_trials']} "
              f"({100 * rate:.1f}%, 95% CI {100 * lo:.1f}-{100 * hi:.1f}%)")
    print(f"{sum(len(v) for v in results.values())} trials in {time.time() - t0:.1f}s, outputs in {out}")
    return EXIT_OK


def read_records(path: Path) -> List[sim.TrialRecord]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read records {path}: {exc}") from exc
    try:
        return [sim.TrialRecord.from_json(line) for line in lines if line.strip()]
    except (ValueError, TypeError) as exc:
        raise UsageError(f"malformed records file {path}: {exc}") from exc


def calibration_report(records: Sequence[sim.TrialRecord]) -> dict:
    rows = []
    k2_tot = k3_tot = n_tot = 0
    for r in records:
        n = len(r.calibration_hits)
        k2 = sum(bool(h[0]) for h in r.calibration_hits)
        k3 = sum(bool(h[1]) for h in r.calibration_hits)
        rows.append({"seed": r.seed, "mode": r.mode, "samples": n,
                     "inside_2sigma": k2, "inside_3sigma": k3})
        k2_tot, k3_tot, n_tot = k2_tot + k2, k3_tot + k3, n_tot + n
    theory = {lvl: math.erf(lvl / math.sqrt(2.0)) for lvl in (2, 3)}
    return {
        "version": 1,
        "samples": n_tot,
        "fraction_2sigma": k2_tot / n_tot if n_tot else None,
        "fraction_3sigma": k3_tot / n_tot if n_tot else None,
        "wilson95_2sigma": list(sim.wilson_interval(k2_tot, n_tot)),
        "wilson95_3sigma": list(sim.wilson_interval(k3_tot, n_tot)),
        "gaussian_2sigma": theory[2],
        "gaussian_3sigma": theory[3],
        "rows": rows,
    }


def cmd_calibrate(args) -> int:
    records = read_records(Path(args.records))
    if not records or not any(r.calibration_hits for r in records):
        raise UsageError(f"{args.records} holds no calibration samples")
    out = output_dir(args.out, "calibrate")
    write_resolved(out, {"command": "calibrate", "records": str(Path(args.records).resolve())})
    rep = calibration_report(records)
    (out / "calibration.json").write_text(json.dumps(rep, indent=1))
    with open(out / "calibration_rows.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "mode", "samples", "inside_2sigma", "inside_3sigma"])
        w.writeheader()
        w.writerows(rep["rows"])
    write_scatter(out / "scatter.csv", records)
    write_ellipses(out / "ellipses.csv")
    lo2, hi2 = rep["wilson95_2sigma"]
    lo3, hi3 = rep["wilson95_3sigma"]
    print(f"samples {rep['samples']}: inside 2 sigma {rep['fraction_2sigma']:.4f} "
          f"[{lo2:.4f}, {hi2:.4f}], inside 3 sigma {rep['fraction_3sigma']:.4f} [{lo3:.4f}, {hi3:.4f}]")
    return EXIT_OK


# --------------------------------------------------------------------------
# plot data


def write_trajectory(path: Path, records: Sequence[sim.TrialRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "step", "body", "x", "y"])
        for r in records:
            for step, body, x, y in r.trace:
                w.writerow([r.seed, int(step), int(body), repr(x), repr(y)])


def write_scatter(path: Path, records: Sequence[sim.TrialRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "sample", "w1", "w2", "w3", "w4", "m2",
                    "inside_2sigma", "inside_3sigma", "active"])
        for r in records:
            for i, (wv, m2, hit) in enumerate(zip(r.whitened, r.calibration_m2, r.calibration_hits)):
                active = bool(hit[2]) if len(hit) > 2 else True
                w.writerow([r.seed, i, *map(repr, wv), repr(m2), int(hit[0]), int(hit[1]), int(active)])


def write_ellipses(path: Path, points: int = 90) -> None:
    """Unit-normalised 2 and 3 sigma sets as circles in any whitened plane."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "angle", "x", "y"])
        for lvl in (2, 3):
            rad = math.sqrt(sigma_level_quantile(float(lvl), 4))
            for a in np.linspace(0.0, 2.0 * math.pi, points + 1):
                w.writerow([lvl, repr(float(a)), repr(rad * math.cos(a)), repr(rad * math.sin(a))])


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustcbf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit disturbance models from simulated data")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset", help="npz dataset to read (or write with --generate)")
    t.add_argument("--generate", action="store_true", help="synthesise a missing dataset")
    t.add_argument("--episodes", type=int)
    t.add_argument("--steps", type=int, help="SGD steps per restart")
    t.add_argument("--restarts", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="run a paired Monte-Carlo campaign")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=[*sim.MODES, "all"])
    r.add_argument("--trials", type=int)
    r.add_argument("--models", help="models.json written by `train`")
    r.add_argument("--jobs", type=int, help="worker processes")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="calibration report from a records file")
    c.add_argument("records")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
