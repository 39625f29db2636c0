"""Command-line interface.

Subcommands:
  simulate    emit synthetic multi-environment CSVs plus manifest and model
  fit         ingest a data directory and run one estimator, JSON output
  sweep       run an experiment sweep from a config file
  rank-edges  score (regulator, target) edges from expression matrices
  check       run the built-in identity self-tests

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure (every requested cell or target failed, or a self-check failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .core import fit_kl, pooled_theta
from .errors import IngestionError, KlRegressionError
from .harness import (
    ExperimentConfig,
    ingest_environments,
    ingest_expression,
    per_target_datasets,
    rank_edges,
    run_experiment,
)
from .lasso import LassoConfig, default_grid, fit_lasso, lambda_max, select_lambda_cross_fit
from .metrics import aupr, pr_curve
from .moments import estimate_moments
from .sem import (
    generate_baseline_model,
    generate_environment_noise,
    sample_environment,
)
from .selfcheck import run_all

FIT_ESTIMATORS = ("kl", "lasso_kl", "avg_ols", "pooled_theta")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="klreg",
        description="Invariant-coefficient estimation across confounded environments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="emit synthetic environments to CSVs")
    sim.add_argument("--d", type=int, default=20, help="covariate dimension")
    sim.add_argument("--q", type=int, default=2, help="latent dimension")
    sim.add_argument("--d0", type=int, default=10, help="number of nonzero true coefficients")
    sim.add_argument("--envs", type=int, default=4, help="number of environments")
    sim.add_argument("--n", type=int, default=1000, help="samples per environment")
    sim.add_argument("--diversity-t", type=float, default=1.0)
    sim.add_argument("--noise-df", type=float, default=None, help="Student-t degrees of freedom (Gaussian if omitted)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")

    fit = sub.add_parser("fit", help="ingest a data directory and run one estimator")
    fit.add_argument("--data", required=True, help="directory with manifest.json and CSVs")
    fit.add_argument("--estimator", choices=FIT_ESTIMATORS, default="kl")
    fit.add_argument("--lam", type=float, default=None, help="fixed penalty for lasso_kl (cross-fit if omitted)")
    fit.add_argument("--grid-size", type=int, default=20)
    fit.add_argument("--folds", type=int, default=2)
    fit.add_argument("--jitter", type=float, default=0.0)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--with-variance", action="store_true")
    fit.add_argument("--out", default=None, help="output JSON file (stdout if omitted)")

    sweep = sub.add_parser("sweep", help="run an experiment sweep from a config file")
    sweep.add_argument("--config", required=True, help="experiment config JSON")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.add_argument("--seed", type=int, default=None, help="override the config seed")
    sweep.add_argument("--estimators", default=None, help="comma-separated estimator override")
    sweep.add_argument("--jitter", type=float, default=None, help="override the config jitter")

    rank = sub.add_parser("rank-edges", help="rank (regulator, target) edges from expression CSVs")
    rank.add_argument("--data", required=True, help="directory with manifest.json and expression CSVs")
    rank.add_argument("--targets", required=True, help="comma-separated target gene names")
    rank.add_argument("--regulators", required=True, help="comma-separated regulator gene names")
    rank.add_argument("--truth", default=None, help="CSV of true regulator,target pairs (enables AUPR)")
    rank.add_argument("--grid-size", type=int, default=30)
    rank.add_argument("--grid-min-ratio", type=float, default=1e-4)
    rank.add_argument(
        "--grid-max-ratio", type=float, default=1.0,
        help="top of the ranking grid relative to the penalty anchor; values "
        "below 1 skip the earliest path entries",
    )
    rank.add_argument("--jitter", type=float, default=0.0)
    rank.add_argument("--out", required=True, help="output directory")

    check = sub.add_parser("check", help="run the built-in identity self-tests")
    check.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = generate_baseline_model(args.d, args.q, args.d0, args.seed)
    base = np.eye(args.d)
    noise_kind = "gaussian" if args.noise_df is None else "student_t"
    entries = []
    noises = []
    for e in range(args.envs):
        noise = generate_environment_noise(
            args.d, e, args.diversity_t, base, args.seed,
            noise_kind=noise_kind, df=args.noise_df,
        )
        noises.append(noise)
        data = sample_environment(model, noise, args.n, (args.seed, 1, e), env_id=f"e{e}")
        filename = f"env_e{e}.csv"
        with open(out / filename, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(args.d)] + ["y"])
            for xi, yi in zip(data.x, data.y):
                writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
        entries.append({"label": f"e{e}", "file": filename})
    (out / "manifest.json").write_text(json.dumps({"response": "y", "environments": entries}, indent=2))
    (out / "model.json").write_text(
        json.dumps(
            {
                "model": model.to_dict(),
                "noises": [n.to_dict() for n in noises],
                "seed": args.seed,
                "n_per_env": args.n,
                "diversity_t": args.diversity_t,
            },
            indent=2,
        )
    )
    print(f"wrote {args.envs} environments to {out}")
    return 0


def _cmd_fit(args) -> int:
    datasets = ingest_environments(args.data)
    moments = [estimate_moments(d, jitter=args.jitter) for d in datasets]
    payload = {"estimator": args.estimator, "environments": [d.env_id for d in datasets]}
    if args.estimator == "kl":
        result = fit_kl(moments, with_variance=args.with_variance)
        payload.update(result.to_dict())
    elif args.estimator == "lasso_kl":
        if args.lam is not None:
            lam = args.lam
        else:
            grid = default_grid(lambda_max(moments), args.grid_size)
            lam = select_lambda_cross_fit(datasets, grid, folds=args.folds, seed=args.seed, jitter=args.jitter)
        result = fit_lasso(moments, LassoConfig(lam=lam))
        payload.update(result.to_dict())
    elif args.estimator == "avg_ols":
        payload["beta"] = np.mean([m.beta_e for m in moments], axis=0).tolist()
    else:
        payload["beta"] = pooled_theta(moments).tolist()
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _cmd_sweep(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        print(f"config file not found: {config_path}", file=sys.stderr)
        return 2
    try:
        cfg = ExperimentConfig.from_json(config_path.read_text())
        if args.seed is not None:
            cfg.seed = args.seed
        if args.estimators:
            cfg.estimators = tuple(args.estimators.split(","))
        if args.jitter is not None:
            cfg.jitter = args.jitter
        cfg.validate()
    except (ValueError, TypeError, KeyError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    report = run_experiment(cfg)
    path = report.save(args.out)
    print(f"wrote {len(report.rows)} rows ({len(report.failures)} failed cells) to {path}")
    if not report.rows:
        print("every cell failed", file=sys.stderr)
        return 3
    return 0


def _read_truth(path):
    pairs = set()
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if row[0] == "regulator":  # optional header
                continue
            pairs.add((row[0].strip(), row[1].strip()))
    return pairs


def _cmd_rank_edges(args) -> int:
    labels, gene_names, matrices = ingest_expression(args.data)
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    regulators = [g.strip() for g in args.regulators.split(",") if g.strip()]
    overlap = set(targets) & set(regulators)
    if overlap:
        raise ValueError(f"targets must be disjoint from regulators, got {sorted(overlap)[:5]}")
    per_target = per_target_datasets(matrices, gene_names, targets, regulators, env_ids=labels)
    moments_probe = [estimate_moments(d, jitter=args.jitter) for d in per_target[targets[0]]]
    anchor = args.grid_max_ratio * lambda_max(moments_probe)
    grid = default_grid(anchor, args.grid_size, args.grid_min_ratio / args.grid_max_ratio)
    truth = _read_truth(args.truth) if args.truth else ()
    ranking = rank_edges(per_target, targets, regulators, grid, jitter=args.jitter, truth=truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranking.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regulator", "target", "score"])
        for (reg, target), score in sorted(ranking.scores, key=lambda kv: -kv[1]):
            writer.writerow([reg, target, repr(score)])
    if ranking.skipped:
        with open(out / "skipped.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["target", "reason"])
            writer.writerows(ranking.skipped)
    if truth:
        score = aupr(ranking)
        with open(out / "pr_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall"])
            for row in pr_curve(ranking):
                writer.writerow([repr(v) for v in row])
        print(f"AUPR: {score:.4f}")
    print(f"wrote {len(ranking.scores)} edges to {out / 'ranking.csv'}")
    return 0


def _cmd_check(args) -> int:
    results = run_all(seed=args.seed)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: {res.detail}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed", file=sys.stderr)
        return 3
    print(f"all {len(results)} checks passed")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "sweep": _cmd_sweep,
    "rank-edges": _cmd_rank_edges,
    "check": _cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except IngestionError as exc:
        print(f"invalid input data: {exc}", file=sys.stderr)
        return 2
    except KlRegressionError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
