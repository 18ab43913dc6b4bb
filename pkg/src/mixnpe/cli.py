"""Command-line interface: ``mixnpe <command> [options]``.

Commands: simulate, train, sample, logprob, calibrate, evaluate, benchmark.
Every command that writes files also writes ``resolved_config.json`` next to
its outputs. Tabular output is CSV with a header row; reports are JSON.

Exit codes: 0 success, 2 invalid input or configuration, 3 training
failure, 4 invalid reference posterior, 5 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibration_report
from .checkpoint import load_estimator
from .estimator import MNPE
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    InputError,
    ReferenceInvalidError,
    StabilityError,
    TrainingError,
)
from .metrics import c2st, c2st_mixed, encode_mixed, predictive_mse
from .presets import PRESETS, TRAINING_DEFAULTS, preset
from .reference import reference_for
from .simulators import MODEL_NAMES, Dataset, get_model, simulate_dataset

log = logging.getLogger("mixnpe")

OUTPUT_ROOT_ENV = "MIXNPE_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRAINING = 3
EXIT_REFERENCE = 4
EXIT_CHECKPOINT = 5

ARCHITECTURE_KEYS = {
    "hidden_features", "made_hidden_layers", "num_transforms", "num_bins",
    "flow_hidden_features", "flow_hidden_layers", "num_blocks", "tail_bound",
    "embedding_hidden", "embedding_features", "observation_transforms",
}
TRAINING_KEYS = set(TRAINING_DEFAULTS) | {"seed"}
EVALUATION_KEYS = {"n_test", "S", "n_bins", "n_obs", "n_samples", "budgets", "seeds",
                   "reference_budget"}
TOP_KEYS = {"model", "preset", "architecture", "training", "evaluation"}

EVALUATION_DEFAULTS = {"n_test": 500, "S": 1000, "n_bins": 10, "n_obs": 10,
                       "n_samples": 1000, "reference_budget": 200_000}


# -- configuration ----------------------------------------------------------


def _reject_unknown(block, allowed, where):
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def resolve_config(raw=None, model=None):
    """Validate a run config and fill in preset and default values."""
    raw = dict(raw or {})
    _reject_unknown(raw, TOP_KEYS, "config")
    model = raw.get("model", model)
    if model is None:
        raise ConfigurationError("config needs a 'model'")
    if model not in MODEL_NAMES:
        raise ConfigurationError(f"unknown model {model!r}; choose from {', '.join(MODEL_NAMES)}")
    preset_name = raw.get("preset", model)
    if preset_name not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset_name!r}")
    for key, allowed in (("architecture", ARCHITECTURE_KEYS), ("training", TRAINING_KEYS),
                         ("evaluation", EVALUATION_KEYS)):
        if not isinstance(raw.get(key, {}), dict):
            raise ConfigurationError(f"'{key}' must be an object")
        _reject_unknown(raw.get(key, {}), allowed, key)
    arch = dict(PRESETS[preset_name])
    arch.update(raw.get("architecture", {}))
    training = dict(TRAINING_DEFAULTS, seed=0)
    training.update(raw.get("training", {}))
    evaluation = dict(EVALUATION_DEFAULTS)
    evaluation.update(raw.get("evaluation", {}))
    return {"model": model, "preset": preset_name, "architecture": arch,
            "training": training, "evaluation": evaluation}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    return data


def estimator_params(config):
    params = preset(config["preset"], **config["architecture"], **config["training"])
    return params


# -- files --------------------------------------------------------------------


def output_dir(out, command):
    path = Path(out) if out else Path(os.environ.get(OUTPUT_ROOT_ENV, "mixnpe_runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def dataset_columns(dataset):
    l, k, d = dataset.theta_d.shape[1], dataset.theta_c.shape[1], dataset.x.shape[1]
    return ([f"theta_d_{i}" for i in range(l)] + [f"theta_c_{i}" for i in range(k)]
            + [f"x_{i}" for i in range(d)])


def save_dataset(dataset, path):
    """Dataset CSV (class indices for theta_d) plus a JSON metadata sidecar."""
    path = Path(path)
    rows = (list(a) + list(b) + list(c)
            for a, b, c in zip(dataset.theta_d, dataset.theta_c, dataset.x))
    write_csv(path, dataset_columns(dataset), rows)
    write_json(path.with_suffix(".json"), dataset.metadata)


def load_dataset(path):
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            values = np.array([[float(v) for v in row] for row in reader], dtype=float)
    except (OSError, StopIteration, ValueError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}") from exc
    values = values.reshape(-1, len(header))
    cols = {p: [i for i, h in enumerate(header) if h.startswith(p)]
            for p in ("theta_d_", "theta_c_", "x_")}
    if len(cols["x_"]) == 0 or sum(map(len, cols.values())) != len(header):
        raise InputError(f"dataset {path} needs theta_d_*, theta_c_* and x_* columns only")
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    theta_d = values[:, cols["theta_d_"]]
    if not np.all(theta_d == np.round(theta_d)):
        raise InputError("theta_d columns must hold integer class indices")
    return Dataset(theta_d.astype(np.int64), values[:, cols["theta_c_"]],
                   values[:, cols["x_"]], meta)


def parse_observations(text, dim):
    """Observations from a CSV file (one per row, header optional) or a
    comma-separated literal."""
    path = Path(text)
    if path.exists():
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    if rows:
                        raise InputError(f"non-numeric row in {path}: {row}") from None
        arr = np.array(rows, dtype=float)
    else:
        try:
            arr = np.array([float(v) for v in text.split(",")], dtype=float)
        except ValueError:
            raise InputError(f"--obs is neither a file nor comma-separated numbers: {text!r}") from None
    if arr.size == 0 or arr.size % dim:
        raise InputError(f"observations must have {dim} features per row")
    return arr.reshape(-1, dim)


def _load_ckpt(path):
    if not Path(path).exists():
        raise InputError(f"checkpoint {path} does not exist")
    return load_estimator(path)


# -- commands -------------------------------------------------------------------


def cmd_simulate(args):
    model = get_model(args.model)
    if args.n < 1:
        raise InputError("--n must be >= 1")
    out = output_dir(args.out, "simulate")
    dataset = simulate_dataset(model, args.n, args.seed)
    save_dataset(dataset, out / "dataset.csv")
    write_json(out / "resolved_config.json",
               {"command": "simulate", "model": args.model, "n": args.n, "seed": args.seed})
    log.info("wrote %d rows to %s (rejection fraction %.4f)", len(dataset),
             out / "dataset.csv", dataset.metadata["rejection_fraction"])
    return EXIT_OK


def cmd_train(args):
    dataset = load_dataset(args.data)
    config = resolve_config(load_config(args.config), dataset.metadata.get("simulator"))
    model = get_model(config["model"])
    out = output_dir(args.out, "train")
    write_json(out / "resolved_config.json", config)
    est = MNPE(space=model.space, **estimator_params(config))
    start = time.perf_counter()
    est.fit_dataset(dataset)
    est.save(out / "model.mnpe")
    rows = ((r["epoch"], r["train_loss"], r["validation_loss"])
            for r in est.training_log_.to_rows())
    write_csv(out / "training_log.csv", ["epoch", "train_loss", "validation_loss"], rows)
    log.info("trained %d epochs in %.1fs; best validation loss %.4f at epoch %d",
             est.training_log_.epochs_run, time.perf_counter() - start,
             est.training_log_.best_validation_loss, est.training_log_.best_epoch)
    return EXIT_OK


def cmd_sample(args):
    est = _load_ckpt(args.ckpt)
    X = parse_observations(args.obs, est.n_features_in_)
    if args.n < 1:
        raise InputError("--n must be >= 1")
    rng = np.random.default_rng(args.seed)
    theta_d, theta_c = est.sample(X, args.n, rng)
    space = est.space
    header = (["obs"] + [f"theta_d_{i}" for i in range(space.n_discrete)]
              + [f"theta_c_{i}" for i in range(space.n_continuous)])
    offsets = np.asarray(space.discrete.offsets if space.n_discrete else [], dtype=np.int64)
    rows = []
    for m in range(len(X)):
        for d, c in zip(theta_d[m] + offsets, theta_c[m]):
            rows.append([m] + list(d) + list(c))
    out = Path(args.out) if args.out else output_dir(None, "sample") / "samples.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, header, rows)
    write_json(out.parent / "resolved_config.json",
               {"command": "sample", "ckpt": str(args.ckpt), "obs": args.obs, "n": args.n,
                "seed": args.seed})
    return EXIT_OK


def cmd_logprob(args):
    est = _load_ckpt(args.ckpt)
    X = parse_observations(args.obs, est.n_features_in_)
    space = est.space
    width = space.n_discrete + space.n_continuous
    try:
        theta = np.array([float(v) for v in args.theta.split(",")], dtype=float)
    except ValueError:
        raise InputError(f"--theta must be comma-separated numbers: {args.theta!r}") from None
    if theta.size != width:
        raise InputError(f"--theta needs {width} values ({space.n_discrete} discrete first)")
    raw_d = theta[: space.n_discrete]
    if not np.all(raw_d == np.round(raw_d)):
        raise InputError("discrete values must be integers")
    offsets = np.asarray(space.discrete.offsets if space.n_discrete else [], dtype=np.int64)
    theta_d = (raw_d.astype(np.int64) - offsets).reshape(1, -1)
    theta_c = theta[space.n_discrete :].reshape(1, -1)
    lp = est.log_prob(np.repeat(theta_d, len(X), 0), np.repeat(theta_c, len(X), 0), X)
    for v in np.atleast_1d(lp):
        print(repr(float(v)))
    return EXIT_OK


def _posterior_for(args, model):
    if args.reference:
        return reference_for(model)
    if not args.ckpt:
        raise InputError("give --ckpt or --reference")
    return _load_ckpt(args.ckpt)


def cmd_calibrate(args):
    model = get_model(args.model)
    posterior = _posterior_for(args, model)
    out = output_dir(args.out, "calibrate")
    write_json(out / "resolved_config.json",
               {"command": "calibrate", "model": args.model, "ckpt": args.ckpt,
                "reference": args.reference, "n_test": args.n_test, "S": args.s,
                "n_bins": args.bins, "seed": args.seed})
    report = calibration_report(posterior, model, args.n_test, args.s, args.bins, args.seed)
    write_json(out / "report.json", report.to_dict())
    write_calibration_csvs(report, out)
    print(json.dumps({"passes": report.passes(), "eod": report.sbc.eod.tolist() if report.sbc else [],
                      "ece": [t.ece for t in report.reliability]}))
    return EXIT_OK


def write_calibration_csvs(report, out):
    if report.sbc is not None:
        sbc = report.sbc
        half = sbc.baseline.band_halfwidth
        rows = []
        for j, name in enumerate(sbc.names):
            for r in range(sbc.S + 1):
                diag = r / sbc.S
                rows.append([name, r, sbc.ecdf[j, r], diag, max(diag - half, 0.0),
                             min(diag + half, 1.0)])
        write_csv(out / "ecdf.csv", ["dim", "rank", "ecdf", "diagonal", "band_lower",
                                     "band_upper"], rows)
    rows = []
    for t in report.reliability:
        for b in range(len(t.counts)):
            rows.append([t.name, b, t.edges[b], t.edges[b + 1], t.counts[b],
                         "" if np.isnan(t.confidence[b]) else t.confidence[b],
                         "" if np.isnan(t.accuracy[b]) else t.accuracy[b],
                         int(t.rule_of_thumb[b])])
    if rows:
        write_csv(out / "reliability.csv", ["dim", "bin", "lower", "upper", "count",
                                            "confidence", "accuracy", "rule_of_thumb"], rows)


def evaluate_against_reference(posterior, model, n_obs, n_samples, seed, reference=None):
    """C2ST of ``posterior`` vs the model's reference on prior-predictive observations.

    Returns a list of per-observation dicts; observations where the
    reference is invalid are marked instead of scored.
    """
    rng = np.random.default_rng(seed)
    reference = reference or reference_for(model)
    counts = model.space.discrete.class_counts
    theta_d, theta_c = model.sample_prior(n_obs, rng)
    X = model.simulate(theta_d, theta_c, rng)
    results = []
    for i, x in enumerate(X):
        try:
            ref = reference.sample(x, n_samples, rng)
        except ReferenceInvalidError as exc:
            results.append({"obs": i, "status": "reference_invalid", "detail": str(exc)})
            continue
        est = posterior.sample(x, n_samples, rng)
        enc_a, enc_b = encode_mixed(*est, counts), encode_mixed(*ref, counts)
        marg = []
        start = 0
        for c in counts:
            marg.append(c2st(enc_a[:, start:start + c], enc_b[:, start:start + c]).score)
            start += c
        for j in range(model.space.n_continuous):
            marg.append(c2st(est[1][:, j:j + 1], ref[1][:, j:j + 1]).score)
        results.append({
            "obs": i,
            "status": "ok",
            "c2st_joint": c2st_mixed(est, ref, counts).score,
            "c2st_marginals": float(np.mean(marg)),
        })
    return results


def cmd_evaluate(args):
    model = get_model(args.model)
    est = _load_ckpt(args.ckpt)
    if est.space != model.space:
        raise ConfigurationError("checkpoint was trained on a different parameter space")
    out = output_dir(args.out, "evaluate")
    write_json(out / "resolved_config.json",
               {"command": "evaluate", "model": args.model, "ckpt": args.ckpt,
                "n_obs": args.n_obs, "n_samples": args.n_samples, "seed": args.seed})
    results = evaluate_against_reference(est, model, args.n_obs, args.n_samples, args.seed)
    mse = predictive_mse(est, model, args.n_obs, np.random.default_rng(args.seed + 1))
    rows = [[r["obs"], r["status"], r.get("c2st_joint", ""), r.get("c2st_marginals", "")]
            for r in results]
    write_csv(out / "c2st.csv", ["obs", "status", "c2st_joint", "c2st_marginals"], rows)
    ok = [r["c2st_joint"] for r in results if r["status"] == "ok"]
    summary = {"c2st_joint_mean": float(np.mean(ok)) if ok else None,
               "n_valid": len(ok), "n_obs": len(results), "predictive_mse": mse.mse,
               "predictive_mse_per_feature": mse.per_feature.tolist(),
               "predictive_resampled": mse.n_resampled}
    write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK if ok else EXIT_REFERENCE


def cmd_benchmark(args):
    model = get_model(args.task)
    config = resolve_config(load_config(args.config), args.task)
    if config["model"] != args.task:
        raise ConfigurationError(f"config is for {config['model']}, not {args.task}")
    evaluation = config["evaluation"]
    budgets = _int_list(args.budgets) if args.budgets else evaluation.get("budgets", [1000])
    seeds = _int_list(args.seeds) if args.seeds else evaluation.get("seeds", [0])
    config["evaluation"].update({"budgets": budgets, "seeds": seeds})
    out = output_dir(args.out, "benchmark")
    write_json(out / "resolved_config.json", config)
    reference = reference_for(model)
    if hasattr(reference, "budget"):
        reference.budget = evaluation["reference_budget"]
    header = ["task", "budget", "seed", "status", "c2st_joint", "c2st_marginals", "eod", "ece"]
    rows, timings = [], []
    for budget in budgets:
        for seed in seeds:
            start = time.perf_counter()
            row = _benchmark_cell(model, config, reference, budget, seed, evaluation)
            rows.append([args.task, budget, seed] + row)
            timings.append([args.task, budget, seed, time.perf_counter() - start])
            log.info("%s budget=%d seed=%d -> %s", args.task, budget, seed, row)
    write_csv(out / "results.csv", header, rows)
    # Wall times vary run to run, so they live apart from the deterministic table.
    write_csv(out / "timings.csv", ["task", "budget", "seed", "wall_time"], timings)
    return EXIT_OK


def _benchmark_cell(model, config, reference, budget, seed, evaluation):
    params = estimator_params(config)
    params["seed"] = seed
    try:
        dataset = simulate_dataset(model, budget, seed)
        est = MNPE(space=model.space, **params).fit_dataset(dataset)
    except (TrainingError, ConfigurationError) as exc:
        log.warning("training failed: %s", exc)
        return ["training_failed", "", "", "", ""]
    results = evaluate_against_reference(est, model, evaluation["n_obs"],
                                         evaluation["n_samples"], 10_000 + seed, reference)
    ok = [r for r in results if r["status"] == "ok"]
    if len(ok) < len(results):
        return ["reference_invalid", "", "", "", ""]
    report = calibration_report(est, model, evaluation["n_test"], evaluation["S"],
                                evaluation["n_bins"], 20_000 + seed)
    eod = float(np.mean(report.sbc.eod)) if report.sbc else ""
    ece = float(np.mean([t.ece for t in report.reliability])) if report.reliability else ""
    return ["ok", float(np.mean([r["c2st_joint"] for r in ok])),
            float(np.mean([r["c2st_marginals"] for r in ok])), eod, ece]


def _int_list(text):
    try:
        return [int(float(v)) for v in text.split(",")]
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


# -- entry point ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mixnpe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a training dataset from a simulator")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit an estimator to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw posterior samples for observations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--obs", required=True, help="CSV file or comma-separated values")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("logprob", help="print the joint log density")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--theta", required=True, help="discrete values then continuous values")
    p.add_argument("--obs", required=True)
    p.set_defaults(func=cmd_logprob)

    p = sub.add_parser("calibrate", help="SBC and ECE diagnostics")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--ckpt")
    p.add_argument("--reference", action="store_true",
                   help="diagnose the model's reference posterior instead of a checkpoint")
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--s", type=int, default=1000)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="C2ST vs reference and predictive MSE")
    p.add_argument("--model", required=True, choices=MODEL_NAMES)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n-obs", type=int, default=10)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="budget x seed sweep")
    p.add_argument("--task", required=True, choices=MODEL_NAMES)
    p.add_argument("--budgets")
    p.add_argument("--seeds")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigurationError, StabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ReferenceInvalidError as exc:
        print(f"reference invalid: {exc}", file=sys.stderr)
        return EXIT_REFERENCE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
