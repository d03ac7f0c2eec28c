"""Command-line front end: coverage simulations and CSV data analysis.

Outputs are deterministic given the flags (timestamps live only in the
manifest); every file carries the manifest hash so runs can be matched
to their configuration.  Floats are serialized with full round-trip
precision.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .exceptions import EmptySelection
from .experiments import (ExperimentConfig, aggregate, derive_seed,
                          run_batch)
from .inference import infer_target
from .reconstruction import (build_kkt_map, decompose_target,
                             estimate_noise_variance, refit_unpenalized)
from .selector import (FORWARD_STEPWISE, LOGISTIC, SQUARED_ERROR,
                       PenaltySpec, RandomizationSpec, draw_randomization,
                       make_dataset, solve_randomized_program, tune_lambda)

LOSS_FLAGS = {"lasso": SQUARED_ERROR, "logistic": LOGISTIC,
              "fs": FORWARD_STEPWISE}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_EMPTY = 4


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _manifest_hash(payload):
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(out_dir, subcommand, config_dict, outputs):
    payload = {"subcommand": subcommand, "config": config_dict,
               "version": __version__}
    h = _manifest_hash(payload)
    manifest = dict(payload, hash=h, created=time.strftime("%Y-%m-%dT%H:%M:%S"),
                    outputs=sorted(outputs))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return h


def _write_csv(path, header, rows, manifest_hash):
    with open(path, "w", newline="") as fh:
        fh.write("# manifest=%s\n" % manifest_hash)
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_jsonl(path, records, manifest_hash):
    with open(path, "w") as fh:
        fh.write(json.dumps({"manifest": manifest_hash}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_records_jsonl(path):
    """Re-read a records.jsonl file written by simulate."""
    out = []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if "manifest" in obj and "j" not in obj:
                continue
            out.append(obj)
    return out


def aggregate_records_file(path):
    """Recompute the coverage table from serialized records."""
    rows = read_records_jsonl(path)
    if not rows:
        return None
    sel = [r["ci_lo"] <= r["truth"] <= r["ci_hi"] for r in rows]
    nai = [r["naive_lo"] <= r["truth"] <= r["naive_hi"] for r in rows]
    return {
        "coverage_selective": float(np.mean(sel)),
        "coverage_naive": float(np.mean(nai)),
        "length_selective": float(np.mean([r["ci_hi"] - r["ci_lo"] for r in rows])),
        "length_naive": float(np.mean([r["naive_hi"] - r["naive_lo"] for r in rows])),
        "n_targets": len(rows),
    }


def _ecdf_rows(kind, values):
    x = np.sort(np.asarray(values))
    n = x.size
    return [(kind, float(x[i]), (i + 1.0) / n) for i in range(n)]


def _record_dict(r):
    return {
        "rep": r.rep, "j": r.j, "T_obs": r.T_obs, "sigma": r.sigma_j,
        "ci_lo": r.ci[0], "ci_hi": r.ci[1], "mle": r.mle,
        "pvalue": r.pvalue_two_sided,
        "naive_lo": r.naive_ci[0], "naive_hi": r.naive_ci[1],
        "naive_est": r.naive_estimate, "truth": r.truth,
        "pivot_truth": r.pivot_truth,
        "naive_pivot_truth": r.naive_pivot_truth,
        "flags": r.flags,
    }


def _signal_arg(text):
    lo, _, hi = text.partition(":")
    return float(lo), float(hi)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="apxinf",
        description="Post-selection inference after randomized l1 selection "
                    "via a barrier-smoothed approximation of the selection "
                    "probability.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="coverage simulation batch")
    sim.add_argument("--loss", choices=sorted(LOSS_FLAGS), default="lasso")
    sim.add_argument("--rand", choices=["gaussian", "laplace"], default="gaussian")
    sim.add_argument("--tau", type=float, default=1.0)
    sim.add_argument("--c", type=float, default=1.2)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--p", type=int, default=500)
    sim.add_argument("--sparsity", type=int, default=0)
    sim.add_argument("--signal", type=_signal_arg, default=None,
                     metavar="LO:HI")
    sim.add_argument("--alpha", type=float, default=0.1)
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--grid-points", type=int, default=801)
    sim.add_argument("--grid-width", type=float, default=12.0)
    sim.add_argument("--sigma-known", type=float, default=1.0)
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out", default="out")

    ana = sub.add_parser("analyze", help="analyze a prepared numeric CSV")
    ana.add_argument("--data", required=True)
    ana.add_argument("--c", type=float, default=1.0)
    ana.add_argument("--tau", type=float, default=1.0)
    ana.add_argument("--alpha", type=float, default=0.1)
    ana.add_argument("--seed", type=int, default=0)
    ana.add_argument("--grid-points", type=int, default=801)
    ana.add_argument("--grid-width", type=float, default=12.0)
    ana.add_argument("--sigma-known", type=float, default=None)
    ana.add_argument("--out", default="out")
    return parser


def run_simulate(args):
    try:
        if args.reps < 1:
            raise ValueError("--reps must be >= 1")
        config = ExperimentConfig(
            loss_kind=LOSS_FLAGS[args.loss],
            rand_kind=args.rand,
            tau=args.tau,
            n=args.n, p=args.p, c=args.c,
            sparsity=args.sparsity,
            signal=args.signal,
            alpha=args.alpha,
            n_reps=args.reps,
            seed=args.seed,
            grid_points=args.grid_points,
            grid_width_sd=args.grid_width,
            sigma_known=args.sigma_known,
        )
    except ValueError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(args.out, exist_ok=True)
    config_dict = {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(config).items()}
    outputs = ["coverage.csv", "coverage.json", "records.jsonl",
               "pivots.csv", "pivot_ecdf.csv"]
    h = _write_manifest(args.out, "simulate", config_dict, outputs)

    try:
        batch = run_batch(config, n_jobs=args.jobs)
        records = batch.records
        if records:
            row = aggregate(records, label=args.loss, c=config.c)
            coverage = dict(row.as_dict(), n_reps=config.n_reps,
                            n_empty=batch.n_empty,
                            n_failed=len(batch.failures))
        else:
            coverage = {"label": args.loss, "n_targets": 0,
                        "n_reps": config.n_reps, "n_empty": batch.n_empty,
                        "n_failed": len(batch.failures)}

        with open(os.path.join(args.out, "coverage.json"), "w") as fh:
            json.dump(dict(coverage, manifest=h), fh, indent=2)
            fh.write("\n")
        _write_csv(os.path.join(args.out, "coverage.csv"),
                   sorted(coverage), [[coverage[k] for k in sorted(coverage)]], h)
        _write_jsonl(os.path.join(args.out, "records.jsonl"),
                     [_record_dict(r) for r in records], h)
        _write_csv(os.path.join(args.out, "pivots.csv"),
                   ["rep", "j", "pivot_selective", "pivot_naive"],
                   [(r.rep, r.j, r.pivot_truth, r.naive_pivot_truth)
                    for r in records], h)
        ecdf_rows = (_ecdf_rows("selective", [r.pivot_truth for r in records])
                     + _ecdf_rows("naive", [r.naive_pivot_truth for r in records])
                     if records else [])
        _write_csv(os.path.join(args.out, "pivot_ecdf.csv"),
                   ["kind", "x", "y"], ecdf_rows, h)
    except Exception as exc:  # noqa: BLE001 - partial outputs stay on disk
        print("runtime failure: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _load_csv_matrix(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV")
        width = len(header)
        if width < 2:
            raise ValueError("need a response column plus predictors")
        rows = []
        for i, row in enumerate(reader):
            if len(row) != width:
                raise ValueError("ragged row %d" % (i + 2))
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError("non-numeric cell in row %d" % (i + 2))
    if not rows:
        raise ValueError("no data rows")
    M = np.array(rows)
    return header[1:], M[:, 1:], M[:, 0]


def run_analyze(args):
    try:
        names, X, y = _load_csv_matrix(args.data)
    except (OSError, ValueError) as exc:
        print("bad input: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG

    os.makedirs(args.out, exist_ok=True)
    config_dict = {"data": os.path.basename(args.data), "c": args.c,
                   "tau": args.tau, "alpha": args.alpha, "seed": args.seed,
                   "grid_points": args.grid_points,
                   "grid_width": args.grid_width,
                   "sigma_known": args.sigma_known}
    outputs = ["coefficients.json", "intervals.csv"]
    h = _write_manifest(args.out, "analyze", config_dict, outputs)

    try:
        try:
            data = make_dataset(X, y, SQUARED_ERROR)
        except ValueError as exc:
            print("bad input: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
        n = X.shape[0]
        rand = RandomizationSpec("gaussian", args.tau, X.shape[1])
        lam = tune_lambda(data, args.c, seed=derive_seed(args.seed, "tuning"))
        penalty = PenaltySpec(lam, 1.0 / np.sqrt(n))
        omega = draw_randomization(rand, derive_seed(args.seed, "omega"))
        try:
            event = solve_randomized_program(data, penalty, omega)
        except EmptySelection:
            print("empty selection: nothing to report", file=sys.stderr)
            return EXIT_EMPTY

        beta_bar = refit_unpenalized(data, event.E)
        kkt = build_kkt_map(data, event, beta_bar)
        sigma_sq = args.sigma_known
        if sigma_sq is None:
            sigma_sq = estimate_noise_variance(data, event.E, beta_bar)

        coef_records, interval_rows = [], []
        for j in event.E:
            ctx = decompose_target(kkt, data, j, rand, sigma_sq=sigma_sq)
            record, _ = infer_target(ctx, alpha=args.alpha,
                                     grid_points=args.grid_points,
                                     grid_width_sd=args.grid_width)
            name = names[j]
            coef_records.append({
                "name": name, "j": int(j),
                "T_obs": record.T_obs, "sigma": record.sigma_j,
                "ci_lo": record.ci[0], "ci_hi": record.ci[1],
                "mle": record.mle, "pvalue": record.pvalue_two_sided,
                "naive_lo": record.naive_ci[0], "naive_hi": record.naive_ci[1],
                "naive_est": record.naive_estimate,
                "flags": record.flags,
            })
            interval_rows.append((name, record.mle, record.ci[0], record.ci[1],
                                  record.naive_estimate, record.naive_ci[0],
                                  record.naive_ci[1]))

        with open(os.path.join(args.out, "coefficients.json"), "w") as fh:
            json.dump({"manifest": h, "lam": lam, "sigma_sq": sigma_sq,
                       "coefficients": coef_records}, fh, indent=2)
            fh.write("\n")
        _write_csv(os.path.join(args.out, "intervals.csv"),
                   ["name", "mle", "ci_lo", "ci_hi",
                    "naive_est", "naive_lo", "naive_hi"],
                   interval_rows, h)
    except Exception as exc:  # noqa: BLE001
        print("runtime failure: %s" % exc, file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if "SELECTIVE_SEED" in os.environ:
        args.seed = int(os.environ["SELECTIVE_SEED"])
    if args.subcommand == "simulate":
        return run_simulate(args)
    return run_analyze(args)


if __name__ == "__main__":
    sys.exit(main())
