"""Experiment configuration, multi-seed runs, stepsize sweeps and aggregation.

A run directory holds one CSV per (method, seed) with columns
``time, loss, grad_norm_sq, cumulative_stepsize, cycle_index`` and a
``summary.json`` (schema in the README).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import analysis
from .algorithms import ASGD_METHODS, METHODS, POLICIES, gamma_for_cycle_stepsize, make_strategy
from .data import LabeledDataset, load_idx_dataset, normalize_features, partition_by_label, synth_classification
from .engine import TimingModel, Trace, simulate
from .objectives import (
    AdditiveGaussian,
    Exact,
    GradientOracle,
    Minibatch,
    MlpModel,
    ObjectiveSuite,
    mlp_suite,
    quadratic_suite,
    weighted_minimizer,
)
from .timing import check_harmonic, timing_stats

log = logging.getLogger(__name__)

CSV_COLUMNS = ("time", "loss", "grad_norm_sq", "cumulative_stepsize", "cycle_index")
DEFAULT_GRID = tuple(10.0**k for k in range(-4, 1))


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    problem: Mapping[str, Any]
    taus: tuple[float, ...]
    horizon: float
    timing: str = "fixed"
    gamma: float | Mapping[str, float] | None = None
    alpha: float | None = None  # cycle stepsize; converted to gamma per method
    gamma_grid: tuple[float, ...] = ()
    seeds: tuple[int, ...] = (0,)
    sample_every: float | None = None
    output_dir: str | None = None
    name: str = "experiment"

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method required", "methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}", "methods")
        if not self.taus or min(self.taus) <= 0:
            raise ConfigError("computation times must be positive", "taus")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive", "horizon")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty", "seeds")
        if self.timing not in ("fixed", "exponential"):
            raise ConfigError("timing must be 'fixed' or 'exponential'", "timing")
        if any(not g > 0 for g in self.gamma_grid):
            raise ConfigError("sweep grid must be strictly positive", "gamma_grid")
        if self.sample_every is not None and not self.sample_every > 0:
            raise ConfigError("sample_every must be positive", "sample_every")
        if self.gamma is None and self.alpha is None and not self.gamma_grid:
            raise ConfigError("one of gamma, alpha or gamma_grid is required", "gamma")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha must be positive", "alpha")
        kind = self.problem.get("kind")
        if kind not in ("quadratic", "mlp"):
            raise ConfigError("problem.kind must be 'quadratic' or 'mlp'", "problem.kind")

    def step_for(self, method: str) -> float:
        """gamma for ASGD policies, alpha for round-based baselines."""
        if self.gamma is not None:
            g = self.gamma.get(method) if isinstance(self.gamma, Mapping) else self.gamma
            if g is not None:
                return float(g)
        if self.alpha is not None:
            if method in ASGD_METHODS and check_harmonic(self.taus):
                return gamma_for_cycle_stepsize(method, self.alpha, self.taus)
            return float(self.alpha)
        raise ConfigError(f"no stepsize for method {method!r}", "gamma")

    def digest(self) -> str:
        blob = json.dumps(config_to_dict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:10]


_CONFIG_KEYS = {f for f in ExperimentConfig.__dataclass_fields__}


def config_from_dict(raw: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}", sorted(unknown)[0])
    for key in ("methods", "problem", "taus", "horizon"):
        if key not in raw:
            raise ConfigError("missing required key", key)
    kw = dict(raw)
    try:
        methods = kw["methods"]
        kw["methods"] = (methods,) if isinstance(methods, str) else tuple(methods)
        kw["taus"] = tuple(float(t) for t in kw["taus"])
        kw["horizon"] = float(kw["horizon"])
        kw["seeds"] = tuple(int(s) for s in kw.get("seeds", (0,)))
        kw["gamma_grid"] = tuple(float(g) for g in kw.get("gamma_grid", ()))
        if not isinstance(kw["problem"], Mapping):
            raise ConfigError("must be a mapping", "problem")
        kw["problem"] = dict(kw["problem"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed value ({exc})") from exc
    return ExperimentConfig(**kw)


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["methods"] = list(config.methods)
    d["taus"] = list(config.taus)
    d["seeds"] = list(config.seeds)
    d["gamma_grid"] = list(config.gamma_grid)
    if isinstance(config.gamma, Mapping):
        d["gamma"] = dict(config.gamma)
    d["problem"] = dict(config.problem)
    return d


# ---------------------------------------------------------------------------
# problems


@dataclass
class Problem:
    suite: ObjectiveSuite
    noise: Any
    x0: np.ndarray

    def metric(self, x):
        F = self.suite.objective()
        g = F.grad(x)
        return F.value(x), float(g @ g)


def _dataset(spec: Mapping[str, Any]) -> LabeledDataset:
    if "idx_images" in spec:
        ds = load_idx_dataset(spec["idx_images"], spec["idx_labels"])
        limit = spec.get("max_per_class")
        if limit:
            keep = np.concatenate([np.flatnonzero(ds.labels == c)[: int(limit)] for c in np.unique(ds.labels)])
            ds = LabeledDataset(ds.features[np.sort(keep)], ds.labels[np.sort(keep)])
    else:
        ds = synth_classification(
            int(spec.get("classes", 10)),
            int(spec.get("dim", 20)),
            int(spec.get("per_class", 200)),
            float(spec.get("separation", 3.0)),
            int(spec.get("data_seed", 0)),
        )
    return normalize_features(ds, spec.get("norm_mean"), spec.get("norm_std"))


def build_problem(spec: Mapping[str, Any], n_workers: int, seed: int) -> Problem:
    kind = spec.get("kind")
    if kind == "quadratic":
        locals_ = []
        for k, item in enumerate(spec.get("locals", [])):
            if isinstance(item, Mapping):
                locals_.append((item["curvature"], item.get("center", 0.0), item.get("linear")))
            else:
                locals_.append(tuple(item))
        if len(locals_) != n_workers:
            raise ConfigError(f"{len(locals_)} local objectives for {n_workers} workers", "problem.locals")
        try:
            suite = quadratic_suite(locals_)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc), "problem.locals") from exc
        sigma_sq = float(spec.get("sigma_sq", 0.0))
        noise = AdditiveGaussian(sigma_sq) if sigma_sq > 0 else Exact()
        x0 = np.atleast_1d(np.asarray(spec.get("x0", 0.0), dtype=float))
        if x0.size == 1 and suite.dim > 1:
            x0 = np.full(suite.dim, x0[0])
        return Problem(suite, noise, x0)
    if kind == "mlp":
        ds = _dataset(spec)
        shards = partition_by_label(ds, n_workers, int(spec.get("data_seed", 0)))
        n_classes = int(ds.labels.max()) + 1
        model = MlpModel(ds.dim, int(spec.get("hidden", 32)), n_classes)
        batch = spec.get("batch_size", 64)
        noise = Minibatch(int(batch)) if batch else Exact()
        return Problem(mlp_suite(model, shards), noise, model.init(seed))
    raise ConfigError("problem.kind must be 'quadratic' or 'mlp'", "problem.kind")


# ---------------------------------------------------------------------------
# single runs


@dataclass
class RunResult:
    method: str
    seed: int
    step: float
    status: str
    message: str
    series: dict[str, np.ndarray]
    final_x: np.ndarray
    final_loss: float
    best_loss: float
    n_updates: int
    round_durations: list[float] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.status != "ok"


def _cycle_index(times: np.ndarray, tau_max: float) -> np.ndarray:
    return np.floor(times / tau_max + 1e-9).astype(int)


def run_single(config: ExperimentConfig, method: str, seed: int, step: float | None = None,
               trace_out: list | None = None) -> RunResult:
    """One simulation of ``method`` with stepsize ``step`` (default from the config)."""
    step = config.step_for(method) if step is None else float(step)
    problem = build_problem(config.problem, len(config.taus), seed)
    oracle = GradientOracle(problem.suite, problem.noise, seed)
    timing = TimingModel(config.taus, config.timing)
    strategy = make_strategy(method, step)
    with np.errstate(over="ignore", invalid="ignore"):
        trace = simulate(strategy, oracle, timing, config.horizon, problem.x0, seed=seed,
                         metric=problem.metric, sample_every=config.sample_every)
    if trace_out is not None:
        trace_out.append(trace)
    s = trace.sample_arrays()
    loss = s["loss"]
    status, message = trace.status, trace.message
    if status == "ok" and not (loss.size and np.all(np.isfinite(loss))):
        status, message = "diverged", "non-finite loss"
    series = {
        "time": s["time"],
        "loss": loss,
        "grad_norm_sq": s["grad_norm_sq"],
        "cumulative_stepsize": s["cumulative_stepsize"],
        "cycle_index": _cycle_index(s["time"], max(config.taus)),
    }
    finite = loss[np.isfinite(loss)]
    return RunResult(
        method=method,
        seed=seed,
        step=step,
        status=status,
        message=message,
        series=series,
        final_x=trace.final_x,
        final_loss=float(loss[-1]) if status == "ok" else math.inf,
        best_loss=float(finite.min()) if finite.size else math.inf,
        n_updates=trace.n_updates,
        round_durations=trace.round_durations,
    )


def _run_many(tasks, jobs: int):
    if jobs <= 1:
        return [run_single(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_star_run, tasks))


def _star_run(task):
    return run_single(*task)


# ---------------------------------------------------------------------------
# persistence


def write_series_csv(path, series: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in zip(*(series[c] for c in CSV_COLUMNS)):
            w.writerow([int(v) if c == "cycle_index" else repr(float(v)) for c, v in zip(CSV_COLUMNS, row)])


def read_series_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}
    out["cycle_index"] = out["cycle_index"].astype(int)
    return out


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _method_summary(config: ExperimentConfig, method: str, results: list[RunResult]) -> dict:
    finals = [r.final_loss for r in results]
    out: dict[str, Any] = {
        "step": results[0].step,
        "step_kind": "gamma" if method in ASGD_METHODS else "alpha",
        "seeds": {
            str(r.seed): {
                "status": r.status,
                "message": r.message,
                "final_loss": r.final_loss,
                "best_loss": r.best_loss,
                "updates": r.n_updates,
            }
            for r in results
        },
        "median_final_loss": float(np.median(finals)),
        "median_best_loss": float(np.median([r.best_loss for r in results])),
    }
    if results[0].final_x is not None and results[0].final_x.size <= 10:
        out["final_x"] = {str(r.seed): r.final_x for r in results}
    durations = [d for r in results for d in r.round_durations]
    if durations:
        out["mean_round_duration"] = float(np.mean(durations))
        out["rounds"] = len(durations)
    if method in POLICIES and check_harmonic(config.taus):
        policy = POLICIES[method](results[0].step)
        out["policy_constants"] = policy.constants(config.taus).as_dict()
        tw = analysis.target_weights(method, config.taus)
        out["target_weights"] = list(tw.weights)
        if config.problem.get("kind") == "quadratic":
            problem = build_problem(config.problem, len(config.taus), 0)
            out["target_minimizer"] = weighted_minimizer(problem.suite, tw.weights)
    return out


def run_dir_for(config: ExperimentConfig, base=None) -> Path:
    base = Path(base or config.output_dir or "runs")
    stamp = time.strftime("%Y%m%dT%H%M%S")
    return base / f"{config.name}-{config.digest()}-{stamp}"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: dict[str, list[RunResult]]
    summary: dict
    run_dir: Path | None = None

    @property
    def all_diverged(self) -> bool:
        return all(r.diverged for rs in self.runs.values() for r in rs)


def run_experiment(config: ExperimentConfig, run_dir=None, jobs: int = 1, write: bool = True) -> ExperimentResult:
    """Simulate every (method, seed) pair; optionally write CSVs and summary.json."""
    tasks = [(config, m, s) for m in config.methods for s in config.seeds]
    flat = _run_many(tasks, jobs)
    runs: dict[str, list[RunResult]] = {m: [] for m in config.methods}
    for r in flat:
        runs[r.method].append(r)
    summary = {
        "name": config.name,
        "config": config_to_dict(config),
        "config_hash": config.digest(),
        "timing_stats": timing_stats(config.taus).as_dict(),
        "harmonic": check_harmonic(config.taus),
        "methods": {m: _method_summary(config, m, rs) for m, rs in runs.items()},
    }
    out_dir = None
    if write:
        out_dir = Path(run_dir) if run_dir else run_dir_for(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        for m, rs in runs.items():
            for r in rs:
                write_series_csv(out_dir / f"{m}-seed{r.seed}.csv", r.series)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
    return ExperimentResult(config, runs, summary, out_dir)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    method: str
    grid: tuple[float, ...]
    median_final: tuple[float, ...]
    diverged: tuple[int, ...]  # diverged seed count per grid point
    best: float
    best_index: int

    @property
    def on_boundary(self) -> bool:
        return self.best_index in (0, len(self.grid) - 1)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "grid": list(self.grid),
            "median_final_loss": list(self.median_final),
            "diverged_seeds": list(self.diverged),
            "best": self.best,
            "on_boundary": self.on_boundary,
        }


def sweep_stepsize(config: ExperimentConfig, grid: Sequence[float] | None = None, jobs: int = 1) -> dict[str, SweepResult]:
    """Pick, per method, the grid value with the lowest median final loss across seeds."""
    grid = tuple(float(g) for g in (grid if grid is not None else config.gamma_grid))
    if not grid:
        raise ConfigError("sweep needs a non-empty grid", "gamma_grid")
    if any(not g > 0 for g in grid):
        raise ConfigError("sweep grid must be strictly positive", "gamma_grid")
    tasks = [(config, m, s, g) for m in config.methods for g in grid for s in config.seeds]
    flat = iter(_run_many(tasks, jobs))
    out = {}
    for m in config.methods:
        medians, diverged = [], []
        for _ in grid:
            rs = [next(flat) for _ in config.seeds]
            medians.append(float(np.median([r.final_loss for r in rs])))
            diverged.append(sum(r.diverged for r in rs))
        if all(not math.isfinite(v) for v in medians):
            raise ValueError(f"no stable stepsize for {m}")
        best = int(np.nanargmin(np.where(np.isfinite(medians), medians, np.inf)))
        out[m] = SweepResult(m, grid, tuple(medians), tuple(diverged), grid[best], best)
    return out


def tuned(config: ExperimentConfig, sweeps: Mapping[str, SweepResult]) -> ExperimentConfig:
    return replace(config, gamma={m: s.best for m, s in sweeps.items()}, alpha=None)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class AggregatedSeries:
    time: np.ndarray
    median: np.ndarray
    min: np.ndarray
    max: np.ndarray
    metric: str
    count: int


def _series_of(item, metric: str) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(item, RunResult):
        return item.series["time"], item.series[metric]
    if isinstance(item, Trace):
        s = item.sample_arrays()
        return s["time"], s[metric]
    return np.asarray(item["time"], dtype=float), np.asarray(item[metric], dtype=float)


def aggregate(traces: Sequence, grid: int = 200, metric: str = "loss", horizon: float | None = None) -> AggregatedSeries:
    """Interpolate each trace linearly onto a common grid, then take pointwise median/min/max.

    Traces that stopped early (divergence) count as +inf beyond their last sample.
    """
    if not traces:
        raise ValueError("no traces to aggregate")
    series = [_series_of(t, metric) for t in traces]
    if any(len(v) == 0 for _, v in series):
        raise ValueError("empty metric series")
    if horizon is None:
        horizon = max(float(t[-1]) for t, _ in series)
    if grid < 2:
        raise ValueError("grid needs at least two points")
    xs = np.linspace(0.0, horizon, grid)
    rows = []
    for t, v in series:
        row = np.interp(xs, t, v)
        row[np.isnan(row)] = math.inf
        row[xs > t[-1] * (1 + 1e-12)] = math.inf
        rows.append(row)
    stack = np.vstack(rows)
    return AggregatedSeries(xs, np.median(stack, axis=0), stack.min(axis=0), stack.max(axis=0), metric, len(rows))
