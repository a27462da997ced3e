"""Discrete-event simulation of a parameter server with heterogeneous workers.

Each worker reads the server model, spends one computation time on a
stochastic gradient and delivers it.  Deliveries are processed in time order;
simultaneous deliveries (within a relative tolerance) in ascending worker
order.  An asynchronous worker re-reads the model right after its own
gradient has been applied, so the delay of a delivery is the number of server
updates between the read and the application.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .objectives import DivergedError, GradientOracle
from .timing import CyclePlan, build_cycle_plan, check_harmonic, timing_stats

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9


@dataclass(frozen=True)
class TimingModel:
    taus: tuple[float, ...]
    variant: str = "fixed"  # fixed | exponential

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if not self.taus:
            raise ValueError("no workers")
        if min(self.taus) <= 0:
            raise ValueError("computation times must be positive")
        if self.variant not in ("fixed", "exponential"):
            raise ValueError(f"unknown timing variant {self.variant!r}")

    @classmethod
    def fixed(cls, taus):
        return cls(tuple(taus), "fixed")

    @classmethod
    def exponential(cls, taus):
        return cls(tuple(taus), "exponential")

    @property
    def n(self) -> int:
        return len(self.taus)

    def duration(self, seed: int, worker: int, index: int) -> float:
        tau = self.taus[worker - 1]
        if self.variant == "fixed":
            return tau
        return float(rng.stream(seed, rng.DURATION, worker, index).exponential(tau))

    def plan(self) -> CyclePlan | None:
        if self.variant == "fixed" and check_harmonic(self.taus):
            return build_cycle_plan(self.taus)
        return None


@dataclass(slots=True)
class TraceEvent:
    t: float
    worker: int
    delay: int
    stepsize: float  # 0.0 when the gradient was only buffered
    read_count: int  # server updates applied before the worker read its model
    update_index: int  # global index of the update this delivery triggered, -1 if none
    gradient: np.ndarray | None = None
    snapshot: np.ndarray | None = None


@dataclass(slots=True)
class UpdateRecord:
    t: float
    stepsize: float
    worker: int  # 0 for aggregated steps
    delay: int


@dataclass
class Trace:
    taus: tuple[float, ...]
    variant: str
    strategy: dict
    seed: int
    horizon: float
    x0: np.ndarray
    plan: CyclePlan | None
    events: list[TraceEvent] = field(default_factory=list)
    updates: list[UpdateRecord] = field(default_factory=list)
    models: dict[int, np.ndarray] = field(default_factory=dict)
    samples: dict[str, list] = field(
        default_factory=lambda: {"time": [], "loss": [], "grad_norm_sq": [], "cumulative_stepsize": [], "updates": []}
    )
    round_ends: list[float] = field(default_factory=list)
    cumulative_stepsize: float = 0.0
    final_x: np.ndarray | None = None
    status: str = "ok"
    message: str = ""

    @property
    def n_updates(self) -> int:
        return len(self.updates)

    @property
    def cycle_boundaries(self) -> list[int]:
        """Update counts at which a new cycle starts (Fixed harmonic timing only)."""
        if self.plan is None:
            return []
        return list(range(0, self.n_updates + 1, self.plan.K))

    @property
    def round_durations(self) -> list[float]:
        ends = [0.0] + self.round_ends
        return [b - a for a, b in zip(ends, ends[1:])]

    def sample_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=float) for k, v in self.samples.items()}


class _Server:
    def __init__(self, trace: Trace, x0, model_stride: int | None, record_vectors: bool):
        self.x = np.array(x0, dtype=float)
        self.trace = trace
        self.count = 0
        self.stride = model_stride
        self.record_vectors = record_vectors
        self.last_event: TraceEvent | None = None
        trace.models[0] = self.x.copy()

    def apply(self, stepsize: float, direction, t: float, worker: int = 0, delay: int = 0):
        with np.errstate(over="ignore", invalid="ignore"):
            self.x = self.x - stepsize * direction
        self.trace.updates.append(UpdateRecord(t, stepsize, worker, delay))
        self.trace.cumulative_stepsize += stepsize
        if self.last_event is not None and worker == self.last_event.worker:
            self.last_event.stepsize = stepsize
            self.last_event.update_index = self.count
        self.count += 1
        if self.stride and self.count % self.stride == 0:
            self.trace.models[self.count] = self.x.copy()
        if not np.all(np.isfinite(self.x)):
            raise DivergedError("diverged")


def simulate(
    strategy,
    oracle: GradientOracle,
    timing: TimingModel,
    horizon: float,
    x0,
    seed: int = 0,
    metric: Callable | None = None,
    sample_every: float | None = None,
    model_stride: int | None = None,
    record_vectors: bool = False,
) -> Trace:
    """Run one simulation up to wall-clock ``horizon``.

    ``metric(x) -> (loss, grad_norm_sq)`` is evaluated at t = 0, every
    ``sample_every`` time units (default: tau_max) and at the horizon, on the
    model after all deliveries at or before that time.  Full models are kept
    every ``model_stride`` updates (default: K under Fixed harmonic timing).
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if oracle.suite.n != timing.n:
        raise ValueError(f"suite has {oracle.suite.n} workers, timing model {timing.n}")
    taus = timing.taus
    n = timing.n
    plan = timing.plan()
    if model_stride is None and plan is not None:
        model_stride = plan.K
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (oracle.suite.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({oracle.suite.dim},)")

    trace = Trace(
        taus=taus, variant=timing.variant, strategy={}, seed=seed, horizon=float(horizon), x0=x0.copy(), plan=plan
    )
    server = _Server(trace, x0, model_stride, record_vectors)
    strategy.start(server, taus)
    trace.strategy = strategy.describe()

    if sample_every is None:
        sample_every = max(taus)
    sample_times = list(np.arange(0.0, horizon, sample_every)) + [float(horizon)]
    next_sample = 0

    def take_samples(upto: float, inclusive: bool):
        nonlocal next_sample
        while next_sample < len(sample_times):
            s = sample_times[next_sample]
            if inclusive:
                if s > upto:
                    break
            elif s >= upto * (1 - TIE_RTOL):
                break
            if metric is not None:
                loss, gns = metric(server.x)
            else:
                loss, gns = math.nan, math.nan
            smp = trace.samples
            smp["time"].append(s)
            smp["loss"].append(float(loss))
            smp["grad_norm_sq"].append(float(gns))
            smp["cumulative_stepsize"].append(trace.cumulative_stepsize)
            smp["updates"].append(server.count)
            next_sample += 1

    # per-worker state
    snapshot = [x0.copy() for _ in range(n)]
    read_count = [0] * n
    comp_index = [0] * n  # deliveries so far; keys the gradient noise
    launches = [0] * n  # computations started; keys the duration draw
    generation = [0] * n
    heap: list[tuple[float, int, int]] = []

    def launch(i: int, t: float):
        snapshot[i] = server.x.copy()
        read_count[i] = server.count
        generation[i] += 1
        duration = timing.duration(seed, i + 1, launches[i])
        launches[i] += 1
        heapq.heappush(heap, (t + duration, i + 1, generation[i]))

    for i in range(n):
        launch(i, 0.0)

    limit = horizon * (1 + TIE_RTOL)
    try:
        while heap and heap[0][0] <= limit:
            t0 = heap[0][0]
            batch = []
            while heap and heap[0][0] <= t0 * (1 + TIE_RTOL) + 1e-300:
                batch.append(heapq.heappop(heap))
            batch.sort(key=lambda e: e[1])
            take_samples(t0, inclusive=False)
            for t, worker, gen in batch:
                i = worker - 1
                if gen != generation[i]:
                    continue
                y = snapshot[i]
                grad = oracle.sample(worker, y, comp_index[i])
                comp_index[i] += 1
                delay = server.count - read_count[i]
                ev = TraceEvent(t, worker, delay, 0.0, read_count[i], -1)
                if record_vectors:
                    ev.gradient = grad
                    ev.snapshot = y
                trace.events.append(ev)
                server.last_event = ev
                keep_going = strategy.on_arrival(worker, grad, delay, t)
                server.last_event = None
                if keep_going:
                    launch(i, t)
                else:
                    generation[i] += 1  # idle until restarted
            if strategy.after_instant(t0):
                for i in range(n):
                    launch(i, t0)
        take_samples(horizon, inclusive=True)
    except DivergedError as exc:
        trace.status = "diverged"
        trace.message = str(exc)
        log.info("run diverged at %d updates", server.count)

    trace.round_ends = list(getattr(strategy, "round_ends", []))
    trace.final_x = server.x.copy()
    if trace.status == "ok":
        trace.models.setdefault(server.count, server.x.copy())
    return trace


# ---------------------------------------------------------------------------
# post-processing


@dataclass(frozen=True)
class DelayStats:
    worker: int
    count: int
    min: int
    mean: float
    max: int
    analytic: float | None = None

    def as_dict(self) -> dict:
        return {
            "worker": self.worker,
            "count": self.count,
            "min": self.min,
            "mean": self.mean,
            "max": self.max,
            "analytic": self.analytic,
        }


def measure_delays(trace: Trace, skip_cycles: int = 0) -> dict[int, DelayStats]:
    """Per-worker delay statistics over applied deliveries.

    ``skip_cycles`` drops deliveries before ``skip_cycles * tau_max`` (warm-up).
    The analytic per-worker delay is reported alongside for harmonic times.
    """
    if not trace.events:
        raise ValueError("empty trace")
    cutoff = skip_cycles * max(trace.taus) * (1 + TIE_RTOL)
    analytic = None
    if check_harmonic(trace.taus):
        st = timing_stats(trace.taus)
        analytic = [t * st.n / st.tau_H - 1.0 for t in trace.taus]
    per: dict[int, list[int]] = {}
    for ev in trace.events:
        if ev.t > cutoff:
            per.setdefault(ev.worker, []).append(ev.delay)
    out = {}
    for w in sorted(per):
        d = per[w]
        out[w] = DelayStats(
            worker=w,
            count=len(d),
            min=min(d),
            mean=float(np.mean(d)),
            max=max(d),
            analytic=None if analytic is None else analytic[w - 1],
        )
    return out


def cycle_iterates(trace: Trace, plan: CyclePlan | None = None) -> list[np.ndarray]:
    """Server models at the start of every completed cycle (x^0, x^1, ...)."""
    plan = plan or trace.plan
    if trace.variant != "fixed" or plan is None:
        raise ValueError("cycles undefined")
    out = []
    for count in range(0, trace.n_updates + 1, plan.K):
        if count not in trace.models:
            raise KeyError(f"model after {count} updates was not recorded")
        out.append(trace.models[count])
    return out


def delivered_order(trace: Trace) -> list[int]:
    return [ev.worker for ev in trace.events]
