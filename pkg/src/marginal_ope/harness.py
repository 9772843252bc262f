"""Replication engine for estimator x environment x n x H experiment grids.

Every (H, n, replication) triple gets its own counter-derived seed, one batch
is sampled from it, and every configured estimator runs on that same batch.
Results are written as a flat CSV (one row per estimator run) and a JSON
summary of per-cell error aggregates with bootstrap confidence intervals.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from . import estimators as est
from .environments import ENVIRONMENTS, BenchmarkBundle, make_environment

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("env", "estimator", "n", "H", "seed", "estimate", "oracle", "clipped", "wall_ms")
EXTRA_COLUMNS = ("oracle_provenance", "degenerate_steps", "error")
METRICS = ("relative-rmse", "rmse", "bias", "variance")
BOOTSTRAP_RESAMPLES = 2000
CI_LEVEL = 0.95

# the only benchmark whose actions are continuous
CONTINUOUS_ACTION_ENVS = frozenset({"time-varying-chain"})


class ConfigError(ValueError):
    """The experiment config is malformed or references unknown ids."""


# -- estimator registry ---------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorEntry:
    run: Callable
    needs_finite_actions: bool
    options: frozenset
    summary: str


def _run_is(batch, bundle, seed):
    return est.naive_is(batch)


def _run_wis(batch, bundle, seed):
    return est.wis(batch)


def _fitted_q(batch, bundle, q):
    if q == "zero":
        return est.QEstimate.zeros(batch.horizon, batch.num_states, batch.num_actions)
    return est.fit_q_model(batch, bundle.target)


def _run_dr(batch, bundle, seed, q="fit"):
    return est.dr(batch, _fitted_q(batch, bundle, q))


def _run_wdr(batch, bundle, seed, q="fit"):
    return est.wdr(batch, _fitted_q(batch, bundle, q))


def _run_dm(batch, bundle, seed):
    return est.dm(batch, bundle.target)


def _run_mis(batch, bundle, seed, selfnorm=True, reward_table=True, use_schedule=True):
    schedule = bundle.schedule if use_schedule else None
    return est.mis(batch, selfnorm=selfnorm, reward_table=reward_table, schedule=schedule)


def _run_mdr(batch, bundle, seed, selfnorm=True, reward_table=True, use_schedule=True):
    schedule = bundle.schedule if use_schedule else None
    return est.mdr(batch, bundle.target, split_seed=seed, selfnorm=selfnorm,
                   reward_table=reward_table, schedule=schedule)


def _run_ssd(batch, bundle, seed):
    return est.ssd_is(batch)


ESTIMATORS: dict[str, EstimatorEntry] = {
    "is": EstimatorEntry(_run_is, False, frozenset(), "per-decision importance sampling"),
    "wis": EstimatorEntry(_run_wis, False, frozenset(), "weighted per-decision importance sampling"),
    "dr": EstimatorEntry(_run_dr, True, frozenset({"q"}), "doubly robust with a count-based Q model"),
    "wdr": EstimatorEntry(_run_wdr, True, frozenset({"q"}), "weighted doubly robust"),
    "dm": EstimatorEntry(_run_dm, True, frozenset(), "direct method on a count-based model"),
    "mis": EstimatorEntry(_run_mis, False, frozenset({"selfnorm", "reward_table", "use_schedule"}),
                          "marginalized importance sampling"),
    "mdr": EstimatorEntry(_run_mdr, True, frozenset({"selfnorm", "reward_table", "use_schedule"}),
                          "marginalized doubly robust with a two-way split"),
    "ssd-is": EstimatorEntry(_run_ssd, False, frozenset(), "stationary-distribution ratio IS"),
}


# -- config ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative experiment grid.

    Attributes
    ----------
    env : str
        Environment id, see :data:`marginal_ope.environments.ENVIRONMENTS`.
    estimators : tuple of str
        Estimator ids, see :data:`ESTIMATORS`.
    n_grid, H_grid : tuple of int
        Batch sizes and horizons; every combination is one cell per estimator.
    replications : int
        Seeded replications per cell (at least 2).
    seed : int
        Base seed from which all per-replication seeds are derived.
    clip : bool
        Project each estimate onto the feasible value range.
    attrition_threshold : float
        Largest tolerated fraction of failed runs in any cell.
    """

    env: str
    estimators: tuple
    n_grid: tuple
    H_grid: tuple
    env_params: dict = field(default_factory=dict)
    estimator_options: dict = field(default_factory=dict)
    replications: int = 128
    seed: int = 0
    out: Optional[str] = None
    metric: str = "relative-rmse"
    clip: bool = True
    attrition_threshold: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "n_grid", tuple(self.n_grid))
        object.__setattr__(self, "H_grid", tuple(self.H_grid))
        self.validate()

    def validate(self) -> None:
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env!r}; known: {sorted(ENVIRONMENTS)}")
        if not self.estimators:
            raise ConfigError("estimators must be a nonempty list")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimator ids must be unique")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {name!r}; known: {sorted(ESTIMATORS)}")
            if ESTIMATORS[name].needs_finite_actions and self.env in CONTINUOUS_ACTION_ENVS:
                raise ConfigError(f"estimator {name!r} needs finite actions, {self.env!r} has none")
        for name, opts in self.estimator_options.items():
            if name not in self.estimators:
                raise ConfigError(f"options given for unconfigured estimator {name!r}")
            if not isinstance(opts, dict):
                raise ConfigError(f"options for {name!r} must be an object")
            unknown = set(opts) - ESTIMATORS[name].options
            if unknown:
                raise ConfigError(f"unknown options for {name!r}: {sorted(unknown)}")
        for key in ("n_grid", "H_grid"):
            grid = getattr(self, key)
            if not grid:
                raise ConfigError(f"{key} must be nonempty")
            if any(not _is_int(v) or v < 1 for v in grid):
                raise ConfigError(f"{key} must hold positive integers, got {list(grid)}")
        if not _is_int(self.replications) or self.replications < 2:
            raise ConfigError("replications must be an integer >= 2")
        if not _is_int(self.seed) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not 0.0 <= self.attrition_threshold <= 1.0:
            raise ConfigError("attrition_threshold must lie in [0, 1]")
        if {"H", "horizon"} & set(self.env_params):
            raise ConfigError("set the horizon through H_grid, not env_params")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"env", "estimators", "n_grid", "H_grid"} - set(doc)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: malformed JSON: {exc.msg}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("estimators", "n_grid", "H_grid"):
            doc[key] = list(doc[key])
        return doc


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


# -- seeds and records ------------------------------------------------------------------


def replication_seed(base_seed: int, horizon: int, n: int, rep: int) -> int:
    """64-bit seed for one (H, n, replication) triple.

    The triple is used as a ``SeedSequence`` spawn key, so distinct triples
    get independent streams and worker scheduling never changes a seed.
    """
    ss = np.random.SeedSequence(base_seed, spawn_key=(horizon, n, rep))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ResultRecord:
    """One estimator evaluated on one sampled batch; failed runs carry ``error`` and a NaN estimate."""

    env: str
    estimator: str
    n: int
    H: int
    seed: int
    estimate: float
    oracle: float
    clipped: bool
    wall_ms: float
    oracle_provenance: str = ""
    degenerate_steps: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and math.isfinite(self.estimate)

    @property
    def cell(self) -> tuple:
        return (self.env, self.estimator, self.n, self.H)


def _run_task(task) -> list[ResultRecord]:
    bundle, n, seed, estimators, options, clip = task
    batch = bundle.sample(n, seed)
    out = []
    for name in estimators:
        start = time.perf_counter()
        error, value, clipped, degenerate = "", float("nan"), False, 0
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                result = ESTIMATORS[name].run(batch, bundle, seed, **options.get(name, {}))
            if clip:
                result = est.clip_output(result, bundle)
            value, clipped = float(result.estimate), bool(result.clipped)
            degenerate = len(result.degenerate_steps)
            if not math.isfinite(value):
                error = "non-finite estimate"
        except Exception as exc:  # recorded as attrition, never fatal
            error = f"{type(exc).__name__}: {exc}"
        wall = (time.perf_counter() - start) * 1e3
        out.append(ResultRecord(bundle.name, name, n, bundle.horizon, seed, value,
                                bundle.oracle_value, clipped, round(wall, 3),
                                bundle.oracle_provenance, degenerate, error))
    return out


def run_experiment(config: ExperimentConfig, workers: int = 1,
                   sink: Optional[Callable[[ResultRecord], None]] = None,
                   bundles: Optional[dict] = None) -> list[ResultRecord]:
    """Run the full grid and return records ordered by (H, n, replication, estimator).

    Parameters
    ----------
    workers : int
        Process count; results do not depend on it.
    sink : callable, optional
        Receives each record as soon as its task finishes, in output order.
    bundles : dict, optional
        Prebuilt environments keyed by horizon, to skip construction.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    bundles = dict(bundles or {})
    for H in config.H_grid:
        if H not in bundles:
            bundles[H] = make_environment(config.env, horizon=H, **config.env_params)
    tasks = [(bundles[H], n, replication_seed(config.seed, H, n, rep), config.estimators,
              config.estimator_options, config.clip)
             for H in config.H_grid for n in config.n_grid for rep in range(config.replications)]
    log.info("running %d tasks with %d worker(s)", len(tasks), workers)
    records: list[ResultRecord] = []
    if workers == 1:
        results = map(_run_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers)))
    try:
        for chunk in results:
            for rec in chunk:
                if sink is not None:
                    sink(rec)
                records.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return records


# -- aggregation ----------------------------------------------------------------------------


class RmseResult(NamedTuple):
    value: float
    ci_low: float
    ci_high: float
    relative: bool


def _ordered(records: Sequence[ResultRecord]) -> list[ResultRecord]:
    return sorted(records, key=lambda r: (r.seed, r.estimate))


def relative_rmse(records: Sequence[ResultRecord], resamples: int = BOOTSTRAP_RESAMPLES,
                  seed: int = 0, level: float = CI_LEVEL) -> RmseResult:
    """``sqrt(mean((v_hat - v)^2)) / |v|`` with a percentile-bootstrap CI.

    Failed runs are skipped. When the oracle value is zero the absolute RMSE
    is returned and ``relative`` is False. The result does not depend on the
    order of ``records``.
    """
    ok = [r for r in _ordered(records) if r.ok]
    if len(ok) < 2:
        raise ValueError(f"need at least two successful replications, got {len(ok)}")
    oracles = {r.oracle for r in ok}
    if len(oracles) != 1:
        raise ValueError("records mix different oracle values")
    v = oracles.pop()
    relative = v != 0.0
    scale = abs(v) if relative else 1.0
    err = np.array([r.estimate - v for r in ok])

    def statistic(e, axis=-1):
        return np.sqrt(np.mean(e**2, axis=axis)) / scale

    point = float(statistic(err))
    if np.all(err == err[0]):
        return RmseResult(point, point, point, relative)
    boot = stats.bootstrap((err,), statistic, n_resamples=resamples, confidence_level=level,
                           method="percentile", rng=np.random.default_rng(seed))
    lo, hi = boot.confidence_interval
    return RmseResult(point, float(lo), float(hi), relative)


def summarize_cell(records: Sequence[ResultRecord], resamples: int = BOOTSTRAP_RESAMPLES,
                   seed: int = 0) -> dict:
    """Aggregates for one (env, estimator, n, H) cell."""
    recs = _ordered(records)
    ok = [r for r in recs if r.ok]
    env, name, n, H = recs[0].cell
    doc = {"env": env, "estimator": name, "n": n, "H": H, "oracle": recs[0].oracle,
           "replications": len(recs), "succeeded": len(ok), "failed": len(recs) - len(ok),
           "attrition": (len(recs) - len(ok)) / len(recs)}
    if len(ok) >= 2:
        est_values = np.array([r.estimate for r in ok])
        rmse = relative_rmse(ok, resamples, seed)
        scale = abs(recs[0].oracle) if rmse.relative else 1.0
        doc.update({
            "relative": rmse.relative,
            "relative_rmse": rmse.value if rmse.relative else None,
            "rmse": rmse.value * scale,
            "ci_low": rmse.ci_low, "ci_high": rmse.ci_high,
            "bias": float(np.mean(est_values) - recs[0].oracle),
            "variance": float(np.var(est_values, ddof=1)),
        })
    return doc


def group_cells(records: Iterable[ResultRecord]) -> dict[tuple, list[ResultRecord]]:
    cells: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        cells.setdefault(r.cell, []).append(r)
    return dict(sorted(cells.items()))


def summarize(records: Iterable[ResultRecord], metric: str = "relative-rmse",
              config: Optional[dict] = None) -> dict:
    """Versioned summary document; an empty input gives an empty ``cells`` list."""
    cells = [summarize_cell(recs) for recs in group_cells(records).values()]
    return {
        "schema": "marginal-ope.summary",
        "schema_version": SCHEMA_VERSION,
        "metric": metric,
        "ci": {"method": "percentile-bootstrap", "level": CI_LEVEL,
               "resamples": BOOTSTRAP_RESAMPLES, "seed": 0},
        "config": config,
        "cells": cells,
    }


def max_attrition(summary: dict) -> float:
    return max((c["attrition"] for c in summary["cells"]), default=0.0)


# -- serialization ------------------------------------------------------------------------------


def records_to_csv(records: Iterable[ResultRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + EXTRA_COLUMNS)
    for r in records:
        writer.writerow([r.env, r.estimator, r.n, r.H, r.seed, repr(r.estimate), repr(r.oracle),
                         int(r.clipped), repr(r.wall_ms), r.oracle_provenance,
                         r.degenerate_steps, r.error])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ResultRecord]:
    rows = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(rows.fieldnames or ())
    if missing:
        raise ValueError(f"CSV lacks columns {sorted(missing)}")
    return [ResultRecord(row["env"], row["estimator"], int(row["n"]), int(row["H"]), int(row["seed"]),
                         float(row["estimate"]), float(row["oracle"]), bool(int(row["clipped"])),
                         float(row["wall_ms"]), row.get("oracle_provenance", ""),
                         int(row.get("degenerate_steps") or 0), row.get("error", ""))
            for row in rows]


def summary_to_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_results(records: Sequence[ResultRecord], out_dir, metric: str = "relative-rmse",
                 config: Optional[dict] = None) -> tuple[Path, Path]:
    """Write ``results.csv`` and ``summary.json`` under ``out_dir``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "results.csv", out / "summary.json"
    csv_path.write_text(records_to_csv(records))
    json_path.write_text(summary_to_json(summarize(records, metric, config)))
    return csv_path, json_path


def cell_table(summary: dict) -> str:
    """Plain-text table of the headline metric per cell.

    Cells whose oracle value is zero report absolute RMSE, marked with ``*``.
    """
    key = summary["metric"].replace("-", "_")
    lines = [f"{'env':<20}{'estimator':<10}{'H':>6}{'n':>8}{key:>16}{'95% ci':>26}{'fail':>6}"]
    for c in summary["cells"]:
        val, mark, ci = c.get(key), "", ""
        if key == "relative_rmse" and c.get("relative") is False:
            val, mark = c["rmse"], "*"
        if "ci_low" in c and key.endswith("rmse"):
            ci = f"[{c['ci_low']:.4g}, {c['ci_high']:.4g}]"
        shown = "n/a" if val is None else f"{val:.4g}{mark}"
        lines.append(f"{c['env']:<20}{c['estimator']:<10}{c['H']:>6}{c['n']:>8}{shown:>16}"
                     f"{ci:>26}{c['failed']:>6}")
    return "\n".join(lines)


def describe_environments() -> dict[str, str]:
    return {k: (f.__doc__ or "").strip().splitlines()[0] if f.__doc__ else ""
            for k, f in ENVIRONMENTS.items()}


__all__ = [
    "BenchmarkBundle", "CSV_COLUMNS", "ConfigError", "ESTIMATORS", "ExperimentConfig",
    "ResultRecord", "RmseResult", "emit_results", "records_from_csv", "records_to_csv",
    "relative_rmse", "replication_seed", "run_experiment", "summarize", "summary_to_json",
]
