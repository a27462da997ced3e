"""Stepsize policies and server strategies.

A strategy is driven by the engine's event loop.  It sees every delivered
gradient through ``on_arrival`` and changes the model only through
``server.apply``, so the engine can record every update in the trace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .timing import analytic_delays, build_cycle_plan, check_harmonic, timing_stats

METHODS = ("vanilla", "rescaled", "delay_adaptive", "naive_minibatch", "malenia", "ringleader")
ASGD_METHODS = ("vanilla", "rescaled", "delay_adaptive")


# ---------------------------------------------------------------------------
# stepsize formulas


def rescaled_stepsizes(gamma: float, taus: Sequence[float]) -> np.ndarray:
    """``gamma_i = gamma * tau_i * tau_H / (n * tau_max)``."""
    st = timing_stats(taus)
    base = gamma * st.tau_H / st.n
    # tau_i / tau_max first keeps gamma_i * K_i bit-identical for dyadic times
    return np.array([base * (t / st.tau_max) for t in taus])


def vanilla_stepsizes(gamma: float, K: float, n: int) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be at least 1")
    return np.full(n, gamma / K)


def delay_adaptive_stepsize(gamma: float, delay: float) -> float:
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    return gamma / (1.0 + delay)


def updates_per_cycle(taus: Sequence[float]) -> float:
    """``K = n tau_max / tau_H``; an integer for harmonic times."""
    st = timing_stats(taus)
    if check_harmonic(taus):
        return build_cycle_plan(taus).K
    return st.n * st.tau_max / st.tau_H


@dataclass(frozen=True)
class PolicyConstants:
    gammas: tuple[float, ...]  # per-worker (per-event average for delay-adaptive)
    Gammas: tuple[float, ...]  # aggregate per-worker stepsize over one cycle
    alpha: float
    A: float
    gamma_max: float
    K: float

    def as_dict(self) -> dict:
        return {
            "gammas": list(self.gammas),
            "Gammas": list(self.Gammas),
            "alpha": self.alpha,
            "A": self.A,
            "gamma_max": self.gamma_max,
            "K": self.K,
        }


def cycle_constants(gammas: Sequence[float], taus: Sequence[float]) -> PolicyConstants:
    """alpha = sum_i gamma_i K_i and A = sum_i gamma_i^2 K_i for static per-worker stepsizes."""
    g = np.asarray(gammas, dtype=float)
    st = timing_stats(taus)
    K_i = np.array([st.tau_max / t for t in taus])
    if check_harmonic(taus):
        K_i = np.array(build_cycle_plan(taus).K_i, dtype=float)
    return PolicyConstants(
        gammas=tuple(g.tolist()),
        Gammas=tuple((g * K_i).tolist()),
        alpha=float(np.sum(g * K_i)),
        A=float(np.sum(g**2 * K_i)),
        gamma_max=float(g.max()),
        K=float(K_i.sum()),
    )


# ---------------------------------------------------------------------------
# policies


@dataclass
class StepsizePolicy:
    gamma: float

    name = "abstract"
    dynamic = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        self._gammas = None

    def bind(self, taus: Sequence[float]) -> "StepsizePolicy":
        self._gammas = self.worker_stepsizes(taus)
        return self

    def worker_stepsizes(self, taus) -> np.ndarray:
        raise NotImplementedError

    def stepsize(self, worker: int, delay: int) -> float:
        return float(self._gammas[worker - 1])

    def constants(self, taus) -> PolicyConstants:
        return cycle_constants(self.worker_stepsizes(taus), taus)


class Vanilla(StepsizePolicy):
    name = "vanilla"

    def worker_stepsizes(self, taus):
        return vanilla_stepsizes(self.gamma, updates_per_cycle(taus), len(taus))


class Rescaled(StepsizePolicy):
    name = "rescaled"

    def worker_stepsizes(self, taus):
        return rescaled_stepsizes(self.gamma, taus)


class DelayAdaptive(StepsizePolicy):
    """Per-event ``gamma / (1 + delay)`` with the delay measured by the engine."""

    name = "delay_adaptive"
    dynamic = True

    def bind(self, taus):
        return self

    def stepsize(self, worker, delay):
        return delay_adaptive_stepsize(self.gamma, delay)

    def worker_stepsizes(self, taus):
        # steady-state per-event average, from the analytic per-worker delay
        return np.array([self.gamma / (1.0 + d) for d in analytic_delays(taus)])

    def constants(self, taus) -> PolicyConstants:
        """Analytic constants: Gamma_i = gamma tau_max tau_H / (n tau_i^2)."""
        st = timing_stats(taus)
        t = np.asarray(taus, dtype=float)
        Gammas = self.gamma * st.tau_max * st.tau_H / st.n / t**2
        gammas = self.worker_stepsizes(taus)
        return PolicyConstants(
            gammas=tuple(gammas.tolist()),
            Gammas=tuple(Gammas.tolist()),
            alpha=float(self.gamma * st.tau_max * st.tau_H / st.n * np.sum(t**-2.0)),
            A=float(self.gamma**2 * st.tau_max * st.tau_H**2 / st.n**2 * np.sum(t**-3.0)),
            gamma_max=self.gamma,
            K=float(updates_per_cycle(taus)),
        )


@dataclass
class PerWorker(StepsizePolicy):
    gamma: float = 1.0
    gammas: tuple = ()

    name = "per_worker"

    def __post_init__(self):
        if not self.gammas or min(self.gammas) <= 0:
            raise ValueError("per-worker stepsizes must be positive")
        self._gammas = None

    def worker_stepsizes(self, taus):
        if len(self.gammas) != len(taus):
            raise ValueError("one stepsize per worker required")
        return np.asarray(self.gammas, dtype=float)


POLICIES = {"vanilla": Vanilla, "rescaled": Rescaled, "delay_adaptive": DelayAdaptive}


def gamma_for_cycle_stepsize(method: str, alpha: float, taus) -> float:
    """Stepsize parameter giving cycle stepsize ``alpha`` for ``method``."""
    if method == "rescaled":
        return alpha / timing_stats(taus).tau_H
    if method == "delay_adaptive":
        return alpha / DelayAdaptive(1.0).constants(taus).alpha
    return alpha


# ---------------------------------------------------------------------------
# aggregated steps


class RoundIncomplete(ValueError):
    pass


def naive_minibatch_step(x, alpha: float, grads) -> np.ndarray:
    """One synchronous step ``x - alpha * mean(grads)``; ``grads`` holds one entry per worker."""
    if any(g is None for g in grads):
        raise RoundIncomplete("round incomplete")
    return np.asarray(x, dtype=float) - alpha * np.mean(grads, axis=0)


def malenia_step(x, alpha: float, grads_by_worker) -> np.ndarray:
    """Average within each worker first, then across workers."""
    if any(len(gs) == 0 for gs in grads_by_worker):
        raise RoundIncomplete("round incomplete")
    means = [np.mean(gs, axis=0) for gs in grads_by_worker]
    return np.asarray(x, dtype=float) - alpha * np.mean(means, axis=0)


# ---------------------------------------------------------------------------
# strategies


class ServerStrategy:
    """Base class.  ``on_arrival`` returns True when the worker keeps computing."""

    name = "abstract"
    synchronous = False

    def start(self, server, taus):
        self.server = server
        self.n = len(taus)
        self.round_ends: list[float] = []

    def on_arrival(self, worker: int, grad, delay: int, t: float) -> bool:
        raise NotImplementedError

    def after_instant(self, t: float) -> bool:
        """Called once all deliveries at time t are processed; True restarts every worker."""
        return False

    @property
    def round_durations(self) -> list[float]:
        ends = [0.0] + self.round_ends
        return [b - a for a, b in zip(ends, ends[1:])]

    def describe(self) -> dict:
        return {"strategy": self.name}


class AsgdImmediate(ServerStrategy):
    """Apply every gradient on arrival with the policy's stepsize."""

    def __init__(self, policy: StepsizePolicy):
        self.policy = policy

    @property
    def name(self):
        return self.policy.name

    def start(self, server, taus):
        super().start(server, taus)
        self.policy.bind(taus)

    def on_arrival(self, worker, grad, delay, t):
        step = self.policy.stepsize(worker, delay)
        self.server.apply(step, grad, t, worker=worker, delay=delay)
        return True

    def describe(self):
        return {"strategy": "asgd", "policy": self.policy.name, "gamma": self.policy.gamma}


class NaiveMinibatch(ServerStrategy):
    """One gradient per worker per round; fast workers wait for the slowest."""

    name = "naive_minibatch"
    synchronous = True

    def __init__(self, alpha: float):
        self.alpha = alpha

    def start(self, server, taus):
        super().start(server, taus)
        self.buffer = [None] * self.n

    def on_arrival(self, worker, grad, delay, t):
        self.buffer[worker - 1] = grad
        return False

    def after_instant(self, t):
        if any(g is None for g in self.buffer):
            return False
        direction = np.mean(self.buffer, axis=0)
        self.server.apply(self.alpha, direction, t)
        self.buffer = [None] * self.n
        self.round_ends.append(t)
        return True

    def describe(self):
        return {"strategy": self.name, "alpha": self.alpha}


class Malenia(ServerStrategy):
    """Workers keep computing at the round model until everyone delivered once."""

    name = "malenia"
    synchronous = True

    def __init__(self, alpha: float):
        self.alpha = alpha

    def start(self, server, taus):
        super().start(server, taus)
        self._reset()

    def _reset(self):
        self.sums = [None] * self.n
        self.counts = [0] * self.n

    def on_arrival(self, worker, grad, delay, t):
        i = worker - 1
        self.sums[i] = grad.copy() if self.sums[i] is None else self.sums[i] + grad
        self.counts[i] += 1
        return True

    def after_instant(self, t):
        if min(self.counts) == 0:
            return False
        direction = np.mean([s / c for s, c in zip(self.sums, self.counts)], axis=0)
        self.server.apply(self.alpha, direction, t)
        self.last_counts = list(self.counts)
        self._reset()
        self.round_ends.append(t)
        return True

    def describe(self):
        return {"strategy": self.name, "alpha": self.alpha}


class Ringleader(ServerStrategy):
    """Simplified gradient-table baseline.

    An initial gathering phase fills one table slot per worker (averaging a
    worker's arrivals at x0).  Afterwards every arrival overwrites its slot;
    the first arrival of each worker in a round triggers one update of
    ``alpha / n`` along the table mean, so a round has exactly n updates and
    ends when the slowest worker has contributed.  Slots are never cleared.
    """

    name = "ringleader"

    def __init__(self, alpha: float):
        self.alpha = alpha

    def start(self, server, taus):
        super().start(server, taus)
        self.table = [None] * self.n
        self.counts = [0] * self.n
        self.gathering = True
        self.triggered: set[int] = set()

    def on_arrival(self, worker, grad, delay, t):
        i = worker - 1
        if self.gathering:
            c = self.counts[i]
            self.table[i] = grad.copy() if c == 0 else (self.table[i] * c + grad) / (c + 1)
            self.counts[i] += 1
            if all(s is not None for s in self.table):
                self.gathering = False
                self.round_ends.append(t)
            return True
        self.table[i] = grad
        if i not in self.triggered:
            self.triggered.add(i)
            self.server.apply(self.alpha / self.n, np.mean(self.table, axis=0), t, worker=worker, delay=delay)
            if len(self.triggered) == self.n:
                self.triggered = set()
                self.round_ends.append(t)
        return True

    def describe(self):
        return {"strategy": self.name, "alpha": self.alpha}


def make_strategy(method: str, step: float) -> ServerStrategy:
    """``step`` is gamma for ASGD policies and the cycle stepsize alpha for baselines."""
    if method in POLICIES:
        return AsgdImmediate(POLICIES[method](step))
    if method == "naive_minibatch":
        return NaiveMinibatch(step)
    if method == "malenia":
        return Malenia(step)
    if method == "ringleader":
        return Ringleader(step)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
