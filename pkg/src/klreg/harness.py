"""Declarative experiment runner, CSV ingestion and edge ranking.

Every simulation protocol is a sweep: one parameter varies over a list of
values while each replicate draws a fresh model that is shared across the
values, so sweeps isolate the swept parameter. Replicates derive disjoint
seeds from the config seed, which makes reports reproducible bit for bit
(wall-clock columns aside) from their embedded config.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .core import fit_kl, pooled_theta
from .errors import EmptyRankingError, IngestionError, KlRegressionError
from .lasso import LassoConfig, default_grid, fit_lasso, lambda_max, lasso_path, select_lambda_cross_fit
from .linalg import random_spd
from .metrics import EdgeRanking, mse, support_metrics
from .moments import estimate_moments
from .sem import (
    GAUSSIAN,
    STUDENT_T,
    EnvironmentData,
    derive_rng,
    generate_baseline_model,
    generate_environment_noise,
    perturb_model,
    sample_environment,
)

KINDS = (
    "sample",
    "diversity",
    "confounding_scale",
    "latent_dim",
    "sparsity",
    "split",
    "student_t",
    "misspecification",
    "real_data",
)
ESTIMATORS = ("kl", "lasso_kl", "avg_ols", "pooled_theta", "zero")

# seed-path tags so every random stream in a replicate is disjoint
_MODEL, _NOISE, _SAMPLE, _BASE, _SPLIT, _PERTURB, _CROSSFIT = range(7)


@dataclass
class ExperimentConfig:
    """Declarative sweep specification.

    Defaults mirror the baseline simulation configuration (d=100, q=2,
    d0=10, four environments of 5000 samples, 50 replicates); desk_config
    shrinks d and the replicate count so full sweeps run in seconds to
    minutes. sweep_values semantics depend on kind:

      sample           per-environment sample counts
      diversity        interpolation weights t in [0, 1]
      confounding_scale  scalings of the latent-to-response coefficient
      latent_dim       latent dimensions Q
      sparsity         numbers of nonzero true coefficients d0
      split            parts each environment is split into (1 = unsplit)
      student_t        degrees of freedom (inf or None = Gaussian)
      misspecification scales of the per-environment structural perturbation
      real_data        ignored (single cell over ingested data)
    """

    kind: str
    sweep_values: tuple = ()
    d: int = 100
    q: int = 2
    d0: int = 10
    e_count: int = 4
    n_per_env: int = 5000
    replicates: int = 50
    seed: int = 0
    estimators: tuple = ("kl",)
    lasso_lam: float | None = None  # None selects by cross-fitting
    lasso_grid_size: int = 20
    lasso_grid_min_ratio: float = 1e-4
    lasso_folds: int = 2
    lasso_max_iter: int = 10_000
    lasso_tol: float = 1e-8
    misspec_target: str = "b_xx"
    diversity_t: float = 1.0  # baseline: fully environment-specific covariances
    jitter: float = 0.0
    support_threshold: float = 1e-6
    data_path: str | None = None

    def __post_init__(self):
        self.sweep_values = tuple(self.sweep_values)
        self.estimators = tuple(self.estimators)

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if not self.sweep_values:
            raise ValueError("sweep_values must be nonempty")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}; expected subset of {ESTIMATORS}")
        if not 0 <= self.d0 <= self.d:
            raise ValueError("d0 must lie in [0, d]")
        if self.e_count < 1:
            raise ValueError("e_count must be at least 1")
        if self.kind == "diversity" and any(not 0 <= t <= 1 for t in self.sweep_values):
            raise ValueError("diversity sweep values must lie in [0, 1]")
        if self.kind == "split" and any(int(v) < 1 or int(v) != v for v in self.sweep_values):
            raise ValueError("split sweep values must be positive integers")
        if self.kind == "student_t":
            for v in self.sweep_values:
                if v is not None and np.isfinite(v) and v <= 2:
                    raise ValueError("student_t degrees of freedom must exceed 2")
        if self.kind == "real_data":
            if self.data_path is None:
                raise ValueError("real_data experiments need data_path")
            if self.replicates != 1 or len(self.sweep_values) != 1:
                raise ValueError("real_data experiments use one replicate and one sweep value")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sweep_values"] = [
            None if (v is None or (isinstance(v, float) and np.isinf(v))) else v
            for v in self.sweep_values
        ]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        data = dict(payload)
        data["sweep_values"] = tuple(data.get("sweep_values", ()))
        data["estimators"] = tuple(data.get("estimators", ("kl",)))
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def desk_config(kind, **overrides) -> ExperimentConfig:
    """Desk-scale preset: d=20 and 20 replicates instead of 100 and 50."""
    defaults = dict(d=20, replicates=20)
    defaults.update(overrides)
    return ExperimentConfig(kind=kind, **defaults)


@dataclass
class ResultRow:
    sweep_value: float
    replicate: int
    seed: int
    estimator: str
    mse: float
    support_f1: float
    wall_time: float


@dataclass
class FailedCell:
    sweep_value: float
    replicate: int
    estimator: str
    reason: str


@dataclass(eq=False)
class ExperimentReport:
    """Tabular sweep results plus the config that reproduces them."""

    config: ExperimentConfig
    rows: list
    failures: list

    def mses(self, sweep_value, estimator) -> np.ndarray:
        return np.array(
            [r.mse for r in self.rows if r.sweep_value == sweep_value and r.estimator == estimator]
        )

    def median_mse(self, sweep_value, estimator) -> float:
        values = self.mses(sweep_value, estimator)
        if len(values) == 0:
            return float("nan")
        return float(np.median(values))

    def summary(self) -> list:
        """Per (sweep value, estimator) cell: count, median and quartiles."""
        cells = {}
        for row in self.rows:
            cells.setdefault((row.sweep_value, row.estimator), []).append(row.mse)
        out = []
        for (value, estimator), data in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            arr = np.array(data)
            out.append(
                {
                    "sweep_value": value,
                    "estimator": estimator,
                    "count": len(arr),
                    "median_mse": float(np.median(arr)),
                    "q25_mse": float(np.percentile(arr, 25)),
                    "q75_mse": float(np.percentile(arr, 75)),
                }
            )
        return out

    def save(self, out_dir, stem="report"):
        """Write rows, failures and the config sidecar under out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows_path = out_dir / f"{stem}.csv"
        with open(rows_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sweep_value", "replicate", "seed", "estimator", "mse", "support_f1", "wall_time"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.sweep_value, r.replicate, r.seed, r.estimator, repr(r.mse), repr(r.support_f1), r.wall_time]
                )
        if self.failures:
            with open(out_dir / f"{stem}_failures.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["sweep_value", "replicate", "estimator", "reason"])
                for f in self.failures:
                    writer.writerow([f.sweep_value, f.replicate, f.estimator, f.reason])
        (out_dir / f"{stem}_config.json").write_text(self.config.to_json())
        return rows_path


def _cell_seed(cfg, r, vi) -> int:
    return int(np.random.SeedSequence([cfg.seed, r, vi]).generate_state(1)[0])


def _split_dataset(data, parts, rng):
    if parts == 1:
        return [data]
    perm = rng.permutation(data.n)
    chunks = np.array_split(perm, parts)
    return [
        EnvironmentData(data.x[idx], data.y[idx], env_id=f"{data.env_id}/{j}")
        for j, idx in enumerate(chunks)
    ]


def _replicate_cells(cfg, r):
    """Yield (value index, sweep value, true beta, datasets) for replicate r.

    The model is drawn once per replicate from (seed, r) and shared across
    sweep values; kinds that must rebuild it (latent_dim, sparsity) reuse
    the same seed, so the covariate connectivity draw is identical and only
    the swept parameter changes.
    """
    base_seed = (cfg.seed, r, _MODEL)
    noise_seed = (cfg.seed, r, _NOISE)
    kind = cfg.kind

    def noises(t, noise_kind=GAUSSIAN, df=None):
        base = np.eye(cfg.d) if t == 1.0 else random_spd(cfg.d, derive_rng((cfg.seed, r, _BASE)))
        return [
            generate_environment_noise(
                cfg.d, e, t, base, noise_seed, noise_kind=noise_kind, df=df
            )
            for e in range(cfg.e_count)
        ]

    def sampled(model, noise_specs, n, vi, models=None):
        return [
            sample_environment(
                models[e] if models else model,
                noise_specs[e],
                n,
                (cfg.seed, r, _SAMPLE, vi, e),
                env_id=f"r{r}/e{e}",
            )
            for e in range(cfg.e_count)
        ]

    if kind == "sample":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        specs = noises(cfg.diversity_t)
        for vi, v in enumerate(cfg.sweep_values):
            yield vi, float(v), model.beta_star, sampled(model, specs, int(v), vi)
    elif kind == "diversity":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        for vi, v in enumerate(cfg.sweep_values):
            yield vi, float(v), model.beta_star, sampled(model, noises(float(v)), cfg.n_per_env, vi)
    elif kind == "confounding_scale":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        specs = noises(cfg.diversity_t)
        for vi, v in enumerate(cfg.sweep_values):
            scaled = replace(model, eta0=float(v) * model.eta0)
            yield vi, float(v), scaled.beta_star, sampled(scaled, specs, cfg.n_per_env, vi)
    elif kind == "latent_dim":
        for vi, v in enumerate(cfg.sweep_values):
            model = generate_baseline_model(cfg.d, int(v), cfg.d0, base_seed)
            specs = noises(cfg.diversity_t)
            yield vi, float(v), model.beta_star, sampled(model, specs, cfg.n_per_env, vi)
    elif kind == "sparsity":
        specs = noises(cfg.diversity_t)
        for vi, v in enumerate(cfg.sweep_values):
            model = generate_baseline_model(cfg.d, cfg.q, int(v), base_seed)
            yield vi, float(v), model.beta_star, sampled(model, specs, cfg.n_per_env, vi)
    elif kind == "split":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        specs = noises(cfg.diversity_t)
        # one shared draw: the comparison is between splittings of the same data
        datasets = sampled(model, specs, cfg.n_per_env, 0)
        for vi, v in enumerate(cfg.sweep_values):
            parts = []
            for e, data in enumerate(datasets):
                parts.extend(_split_dataset(data, int(v), derive_rng((cfg.seed, r, _SPLIT, vi, e))))
            yield vi, float(v), model.beta_star, parts
    elif kind == "student_t":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        for vi, v in enumerate(cfg.sweep_values):
            gaussian = v is None or not np.isfinite(v)
            specs = noises(
                cfg.diversity_t,
                noise_kind=GAUSSIAN if gaussian else STUDENT_T,
                df=None if gaussian else float(v),
            )
            value = float("inf") if gaussian else float(v)
            yield vi, value, model.beta_star, sampled(model, specs, cfg.n_per_env, vi)
    elif kind == "misspecification":
        model = generate_baseline_model(cfg.d, cfg.q, cfg.d0, base_seed)
        specs = noises(cfg.diversity_t)
        for vi, v in enumerate(cfg.sweep_values):
            models = [
                perturb_model(model, cfg.misspec_target, float(v), (cfg.seed, r, _PERTURB, e))
                for e in range(cfg.e_count)
            ]
            yield vi, float(v), model.beta_star, sampled(None, specs, cfg.n_per_env, vi, models=models)
    else:  # pragma: no cover - validated before dispatch
        raise ValueError(f"unhandled kind {kind!r}")


def _run_lasso(cfg, datasets, moments, r, vi) -> np.ndarray:
    if cfg.lasso_lam is not None:
        lam = float(cfg.lasso_lam)
    else:
        grid = default_grid(lambda_max(moments), cfg.lasso_grid_size, cfg.lasso_grid_min_ratio)
        lam = select_lambda_cross_fit(
            datasets,
            grid,
            folds=cfg.lasso_folds,
            seed=(cfg.seed, r, _CROSSFIT, vi),
            jitter=cfg.jitter,
            max_iter=cfg.lasso_max_iter,
            tol=cfg.lasso_tol,
        )
    fit = fit_lasso(
        moments, LassoConfig(lam=lam, max_iter=cfg.lasso_max_iter, tol=cfg.lasso_tol)
    )
    return fit.beta


def _run_estimator(name, cfg, datasets, moments, r, vi) -> np.ndarray:
    if name == "zero":
        return np.zeros(datasets[0].d)
    if moments is None:
        raise KlRegressionError("moment estimation failed for this cell")
    if name == "kl":
        return fit_kl(moments).beta
    if name == "pooled_theta":
        return pooled_theta(moments)
    if name == "avg_ols":
        return np.mean([m.beta_e for m in moments], axis=0)
    if name == "lasso_kl":
        return _run_lasso(cfg, datasets, moments, r, vi)
    raise ValueError(f"unknown estimator {name!r}")


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the sweep and collect one row per (value, replicate, estimator).

    Estimator failures (singular covariances, ill-posed scaling matrices,
    solver non-convergence) become failure records rather than aborting the
    run, so rows + failures always account for every requested cell.
    """
    cfg.validate()
    if cfg.kind == "real_data":
        return _run_real_data(cfg)
    rows = []
    failures = []
    for r in range(cfg.replicates):
        for vi, value, beta_star, datasets in _replicate_cells(cfg, r):
            seed = _cell_seed(cfg, r, vi)
            try:
                moments = [estimate_moments(d, jitter=cfg.jitter) for d in datasets]
                moment_error = None
            except KlRegressionError as exc:
                moments, moment_error = None, str(exc)
            for est in cfg.estimators:
                start = time.perf_counter()
                try:
                    beta = _run_estimator(est, cfg, datasets, moments, r, vi)
                except (KlRegressionError, ValueError) as exc:
                    reason = str(exc) if moment_error is None else moment_error
                    failures.append(FailedCell(value, r, est, reason))
                    continue
                wall = time.perf_counter() - start
                rows.append(
                    ResultRow(
                        sweep_value=value,
                        replicate=r,
                        seed=seed,
                        estimator=est,
                        mse=mse(beta, beta_star),
                        support_f1=support_metrics(beta, beta_star, cfg.support_threshold).f1,
                        wall_time=wall,
                    )
                )
    rows.sort(key=lambda row: (row.sweep_value, row.replicate, row.estimator))
    failures.sort(key=lambda f: (f.sweep_value, f.replicate, f.estimator))
    return ExperimentReport(config=cfg, rows=rows, failures=failures)


def _run_real_data(cfg) -> ExperimentReport:
    datasets = ingest_environments(cfg.data_path)
    rows = []
    failures = []
    value = float(cfg.sweep_values[0]) if cfg.sweep_values else 0.0
    moment_error = None
    try:
        moments = [estimate_moments(d, jitter=cfg.jitter) for d in datasets]
    except KlRegressionError as exc:
        moments = None
        moment_error = str(exc)
    for est in cfg.estimators:
        start = time.perf_counter()
        try:
            _run_estimator(est, cfg, datasets, moments, 0, 0)
        except (KlRegressionError, ValueError) as exc:
            failures.append(FailedCell(value, 0, est, str(exc) if moments else moment_error))
            continue
        wall = time.perf_counter() - start
        # no ground truth for real data: error metrics stay undefined
        rows.append(ResultRow(value, 0, _cell_seed(cfg, 0, 0), est, float("nan"), float("nan"), wall))
    return ExperimentReport(config=cfg, rows=rows, failures=failures)


def ingest_environments(path) -> list:
    """Load one CSV per environment as described by a manifest.

    The manifest (manifest.json in the directory) names the response column
    and lists environments as {"label", "file"} records. Every CSV must
    carry the same ordered covariate columns; mismatches, non-numeric cells
    and environments with too few rows raise IngestionError with the file
    (and line) involved.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: invalid JSON ({exc})") from None
    response = manifest.get("response")
    entries = manifest.get("environments")
    if not response or not entries:
        raise IngestionError(f"{manifest_path}: needs 'response' and 'environments'")
    datasets = []
    covariates = None
    first_file = None
    for entry in entries:
        label, filename = entry["label"], entry["file"]
        file_path = root / filename
        if not file_path.exists():
            raise IngestionError(f"{file_path}: file listed in manifest is missing")
        header, matrix = _read_csv_matrix(file_path)
        if response not in header:
            raise IngestionError(f"{file_path}: response column {response!r} not found")
        y_col = header.index(response)
        cols = tuple(name for name in header if name != response)
        if covariates is None:
            covariates, first_file = cols, file_path
        elif cols != covariates:
            raise IngestionError(
                f"covariate columns of {file_path} do not match {first_file} "
                f"(same names in the same order are required)"
            )
        x = np.delete(matrix, y_col, axis=1)
        y = matrix[:, y_col]
        if x.shape[0] <= x.shape[1]:
            raise IngestionError(
                f"{file_path}: {x.shape[0]} rows with {x.shape[1]} covariates makes "
                "the covariance singular (need n > D)"
            )
        datasets.append(EnvironmentData(x=x, y=y, env_id=str(label)))
    return datasets


def ingest_expression(path):
    """Load expression CSVs (all columns numeric) listed in a manifest.

    Same directory layout as ingest_environments but without a response
    column: every column is a gene. Returns (labels, gene names, one matrix
    per environment).
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}: invalid JSON ({exc})") from None
    entries = manifest.get("environments")
    if not entries:
        raise IngestionError(f"{manifest_path}: needs 'environments'")
    labels = []
    matrices = []
    genes = None
    first = None
    for entry in entries:
        file_path = root / entry["file"]
        if not file_path.exists():
            raise IngestionError(f"{file_path}: file listed in manifest is missing")
        header, matrix = _read_csv_matrix(file_path)
        cols = tuple(header)
        if genes is None:
            genes, first = cols, file_path
        elif cols != genes:
            raise IngestionError(f"gene columns of {file_path} do not match {first}")
        labels.append(str(entry["label"]))
        matrices.append(matrix)
    return labels, list(genes), matrices


def _read_csv_matrix(file_path):
    with open(file_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{file_path}: empty file") from None
        header = [name.strip() for name in header]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{file_path}, line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(cell for cell in row if not _is_number(cell))
                raise IngestionError(
                    f"{file_path}, line {line_no}: non-numeric cell {bad!r}"
                ) from None
    if not rows:
        raise IngestionError(f"{file_path}: no data rows")
    return header, np.asarray(rows, dtype=float)


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def per_target_datasets(matrices, gene_names, targets, regulators, env_ids=None) -> dict:
    """Slice expression matrices into per-target regression datasets.

    matrices is one (n_e x n_genes) array per environment with columns in
    gene_names order; each target becomes the response regressed on the
    regulator columns.
    """
    gene_index = {name: i for i, name in enumerate(gene_names)}
    missing = [g for g in list(targets) + list(regulators) if g not in gene_index]
    if missing:
        raise ValueError(f"unknown gene names: {missing[:5]}")
    reg_idx = [gene_index[g] for g in regulators]
    env_ids = env_ids or [f"e{i}" for i in range(len(matrices))]
    out = {}
    for target in targets:
        t_idx = gene_index[target]
        out[target] = [
            EnvironmentData(x=m[:, reg_idx], y=m[:, t_idx], env_id=str(eid))
            for m, eid in zip(matrices, env_ids)
        ]
    return out


def rank_edges(datasets, targets, regulators, grid, jitter=0.0, max_iter=10_000, tol=1e-8, truth=()) -> EdgeRanking:
    """Score candidate (regulator, target) edges by penalty-path entry.

    For each target, a penalized path over `grid` is fitted to that target's
    environments and each regulator is scored by the largest penalty at
    which its coefficient is nonzero (earlier entry = stronger edge).
    Targets with degenerate data are skipped with a recorded reason; if all
    of them fail there is nothing to rank and EmptyRankingError is raised.
    """
    targets = list(targets)
    regulators = list(regulators)
    overlap = set(targets) & set(regulators)
    if overlap:
        raise ValueError(f"targets must be disjoint from regulators, got overlap {sorted(overlap)[:5]}")
    missing = [t for t in targets if t not in datasets]
    if missing:
        raise ValueError(f"no datasets for targets {missing[:5]}")
    scores = []
    skipped = []
    for target in targets:
        try:
            moments = [estimate_moments(d, jitter=jitter) for d in datasets[target]]
            path = lasso_path(moments, grid, max_iter=max_iter, tol=tol)
        except KlRegressionError as exc:
            skipped.append((target, str(exc)))
            continue
        for j, reg in enumerate(regulators):
            scores.append(((reg, target), float(path.entry_lambda[j])))
    if not scores:
        raise EmptyRankingError(
            "all targets failed: " + "; ".join(f"{t}: {r}" for t, r in skipped)
        )
    return EdgeRanking(scores=scores, truth=frozenset(truth), skipped=skipped)
