"""Post-hoc checks on simulated traces: cycle-step decomposition, noise and bias
bounds, target weights, the two-worker counterexample and complexity terms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .algorithms import AsgdImmediate, PerWorker, StepsizePolicy
from .engine import TimingModel, Trace, cycle_iterates, simulate
from .objectives import (
    AdditiveGaussian,
    GradientOracle,
    HeterogeneityParams,
    ObjectiveSuite,
    quadratic_suite,
    weighted_objective,
)
from .timing import TimingStats, check_harmonic

# Constants (c0, c1, c2) produced by the convergence proof.
PROOF_CONSTANTS = (4.0, 6.0, 10.0)


# ---------------------------------------------------------------------------
# cycle-step decomposition


@dataclass
class CycleDecomposition:
    m: int
    x_m: np.ndarray
    S: np.ndarray
    ideal: np.ndarray
    bias: np.ndarray
    noise: np.ndarray
    alpha: float
    A: float
    weights: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.S - self.ideal - self.bias - self.noise

    @property
    def relative_residual(self) -> float:
        return float(np.linalg.norm(self.residual) / (1.0 + np.linalg.norm(self.S)))


def _cycle_events(trace: Trace, m: int):
    if trace.plan is None or trace.variant != "fixed":
        raise ValueError("cycles undefined")
    K = trace.plan.K
    lo, hi = m * K, (m + 1) * K
    evs = [ev for ev in trace.events if lo <= ev.update_index < hi]
    if len(evs) != K:
        raise ValueError(f"cycle {m} is not complete in this trace")
    if any(ev.gradient is None for ev in evs):
        raise ValueError("trace was recorded without gradient vectors")
    return evs


def decompose_cycle(trace: Trace, m: int, suite: ObjectiveSuite) -> CycleDecomposition:
    """Split the aggregate step of cycle m into ideal step, bias and noise.

    The ideal step is ``alpha * grad F_w(x^m)`` with target weights
    ``w_i = Gamma_i / alpha`` taken from the stepsizes actually applied.
    """
    if not suite.exact:
        raise ValueError("decomposition needs exact local gradients")
    evs = _cycle_events(trace, m)
    x_m = cycle_iterates(trace)[m]
    S = np.zeros_like(x_m)
    bias = np.zeros_like(x_m)
    noise = np.zeros_like(x_m)
    Gammas = np.zeros(suite.n)
    for ev in evs:
        g_y = suite.local_grad(ev.worker, ev.snapshot)
        g_x = suite.local_grad(ev.worker, x_m)
        S += ev.stepsize * ev.gradient
        noise += ev.stepsize * (ev.gradient - g_y)
        bias += ev.stepsize * (g_y - g_x)
        Gammas[ev.worker - 1] += ev.stepsize
    alpha = float(Gammas.sum())
    A = float(sum(ev.stepsize**2 for ev in evs))
    weights = Gammas / alpha
    ideal = alpha * weighted_objective(suite, weights).grad(x_m)
    return CycleDecomposition(m, x_m, S, ideal, bias, noise, alpha, A, weights)


# ---------------------------------------------------------------------------
# cycle noise


@dataclass
class NoiseStats:
    n_cycles: int
    A: float
    sigma_sq: float
    mean_noise: np.ndarray
    mean_sq_norm: float

    @property
    def bound(self) -> float:
        return self.A * self.sigma_sq

    @property
    def ratio(self) -> float:
        return self.mean_sq_norm / self.bound if self.bound > 0 else math.nan

    @property
    def mean_band(self) -> float:
        """Four standard errors of each coordinate of the mean."""
        d = self.mean_noise.size
        return 4.0 * math.sqrt(self.bound / (d * self.n_cycles))


def noise_monte_carlo(
    suite: ObjectiveSuite,
    taus: Sequence[float],
    policy: StepsizePolicy,
    sigma_sq: float,
    x0,
    n_cycles: int = 10_000,
    seed: int = 0,
) -> NoiseStats:
    """Cycle noise over independent gradient draws at frozen read points.

    One noiseless cycle from ``x0`` fixes the snapshots and stepsizes; each
    replicate redraws every gradient of that cycle with a fresh seed.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    tr = simulate(
        AsgdImmediate(policy), GradientOracle(suite), TimingModel.fixed(taus), max(taus), x0, record_vectors=True
    )
    events = _cycle_events(tr, 0)
    A = float(sum(ev.stepsize**2 for ev in events))
    exact = [suite.local_grad(ev.worker, ev.snapshot) for ev in events]
    total = np.zeros(suite.dim)
    total_sq = 0.0
    for r in range(n_cycles):
        oracle = GradientOracle(suite, AdditiveGaussian(sigma_sq), seed=seed + r)
        nu = np.zeros(suite.dim)
        for k, (ev, g) in enumerate(zip(events, exact)):
            nu += ev.stepsize * (oracle.sample(ev.worker, ev.snapshot, k) - g)
        total += nu
        total_sq += float(nu @ nu)
    return NoiseStats(n_cycles, A, sigma_sq, total / n_cycles, total_sq / n_cycles)


# ---------------------------------------------------------------------------
# cycle bias


@dataclass
class BiasCheck:
    measured: float  # sum over cycles of ||b_m||^2
    bound: float
    condition_met: bool  # gamma_max <= 1 / (2 K L rho)
    cycles: int
    series: np.ndarray

    @property
    def holds(self) -> bool:
        return self.measured <= self.bound


def bias_bound_check(
    trace: Trace, suite: ObjectiveSuite, params: HeterogeneityParams, sigma_sq: float, cycles: int
) -> BiasCheck:
    """Compare sum_m ||b_m||^2 with its analytic upper bound."""
    decs = [decompose_cycle(trace, m, suite) for m in range(cycles)]
    K = trace.plan.K
    A = decs[0].A
    gamma_max = max(ev.stepsize for ev in trace.events[: cycles * K])
    F = suite.objective()
    grad_sq = sum(float(np.sum(F.grad(d.x_m) ** 2)) for d in decs)
    c = A**2 * K**2 * params.L_max**2
    bound = 2 * c * cycles * (sigma_sq + params.zeta_sq) + 4 * c * params.rho_sq * grad_sq
    rho = math.sqrt(params.rho_sq)
    condition = rho == 0 or gamma_max <= 1.0 / (2 * K * params.L * rho)
    series = np.array([float(d.bias @ d.bias) for d in decs])
    return BiasCheck(float(series.sum()), float(bound), condition, cycles, series)


# ---------------------------------------------------------------------------
# counterexample


def counterexample_step(x0: float, gamma: float, c: float) -> float:
    """One cycle from x0 with tau = (1, 2), steps (gamma, 2 gamma), F_{1,2} = x^2/2 -+ c x."""
    return x0 * (1 - 4 * gamma + gamma**2) - gamma**2 * c


def counterexample_suite(c: float) -> ObjectiveSuite:
    return quadratic_suite([(1.0, 0.0, -c), (1.0, 0.0, c)])


def counterexample_simulate(x0: float, gamma: float, c: float) -> float:
    trace = simulate(
        AsgdImmediate(PerWorker(gammas=(gamma, 2 * gamma))),
        GradientOracle(counterexample_suite(c)),
        TimingModel.fixed((1.0, 2.0)),
        2.0,
        [x0],
    )
    return float(cycle_iterates(trace)[1][0])


def relative_difference(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def counterexample_threshold(x0: float, gamma: float, bound: float = 1.0) -> float:
    """Heterogeneity c beyond which |grad F(x^1)| exceeds ``bound``."""
    return (bound + abs(x0 * (1 - 4 * gamma + gamma**2))) / gamma**2


# ---------------------------------------------------------------------------
# target weights


@dataclass(frozen=True)
class TargetWeights:
    method: str
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("target weights must be nonnegative and sum to one")


def target_weights(method: str, taus: Sequence[float], gamma: float | None = None) -> TargetWeights:
    """Weights of the objective each ASGD variant converges to (gamma does not affect them)."""
    t = np.asarray(taus, dtype=float)
    if not check_harmonic(taus):
        raise ValueError("harmonic periods required")
    if method == "rescaled":
        w = np.ones_like(t)
    elif method == "vanilla":
        w = 1.0 / t
    elif method == "delay_adaptive":
        w = 1.0 / t**2
    else:
        raise ValueError(f"unsupported method {method!r}")
    return TargetWeights(method, tuple((w / w.sum()).tolist()))


def measured_target_weights(trace: Trace, skip_cycles: int = 1) -> TargetWeights:
    """Weights proportional to the aggregate stepsize each worker applied after warm-up."""
    cutoff = skip_cycles * max(trace.taus)
    Gammas = np.zeros(len(trace.taus))
    for ev in trace.events:
        if ev.t > cutoff * (1 + 1e-9):
            Gammas[ev.worker - 1] += ev.stepsize
    name = trace.strategy.get("policy", trace.strategy.get("strategy", "?"))
    return TargetWeights(name, tuple((Gammas / Gammas.sum()).tolist()))


# ---------------------------------------------------------------------------
# complexity and bounds


def leading_term(
    method: str,
    params: HeterogeneityParams,
    stats: TimingStats,
    eps: float,
    sigma_sq: float,
    L_prime: float | None = None,
) -> float:
    """Leading wall-clock complexity term ``Delta L sigma^2 / (n eps^2) * tau``.

    vanilla reports the frequency-weighted variant (tau_H); delay_adaptive the
    heterogeneous-time variant (tau_DA); ringleader uses L' (default L);
    concurrent carries sigma^2 + zeta^2 and tau_max.
    """
    for name, v in (("eps", eps), ("sigma_sq", sigma_sq), ("L", params.L), ("Delta", params.Delta)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    base = params.Delta * params.L * sigma_sq / (stats.n * eps**2)
    if method == "rescaled" or method == "malenia":
        return base * stats.tau_A
    if method == "naive_minibatch":
        return base * stats.tau_max
    if method == "vanilla":
        return base * stats.tau_H
    if method == "delay_adaptive":
        return base * stats.tau_DA
    if method == "ringleader":
        return base * stats.tau_A * (L_prime or params.L) / params.L
    if method == "concurrent":
        return base * stats.tau_max * (sigma_sq + params.zeta_sq) / sigma_sq
    raise ValueError(f"unknown method {method!r}")


def complexity_terms(
    method: str, params: HeterogeneityParams, stats: TimingStats, eps: float, sigma_sq: float
) -> tuple[float, float, float, float]:
    """All four wall-clock terms (constants dropped) for rescaled or vanilla."""
    D, L, Lm = params.Delta, params.L, params.L_max
    rho = math.sqrt(params.rho_sq)
    noise = math.sqrt(sigma_sq + params.zeta_sq)
    if method == "rescaled":
        ratio = stats.tau_max / stats.tau_H
        return (
            D * L * sigma_sq / (stats.n * eps**2) * stats.tau_A,
            D * Lm * noise / eps**1.5 * ratio * stats.tau_A,
            D * Lm * rho / eps * ratio * stats.tau_max,
            D * L / eps * stats.tau_max,
        )
    if method == "vanilla":
        return (
            D * L * sigma_sq / (stats.n * eps**2) * stats.tau_H,
            D * Lm * noise / eps**1.5 * stats.tau_max,
            D * Lm * rho / eps * stats.tau_max,
            D * L / eps * stats.tau_max,
        )
    raise ValueError(f"no complexity expansion for {method!r}")


def convergence_bound(alpha: float, A: float, K: float, params: HeterogeneityParams, sigma_sq: float, M: int,
                      constants=PROOF_CONSTANTS) -> float:
    """Right-hand side bounding the average squared gradient norm over M cycles."""
    c0, c1, c2 = constants
    r = A / alpha
    return (
        c0 * params.Delta / (alpha * M)
        + c1 * r * params.L * sigma_sq
        + c2 * r**2 * K**2 * params.L_max**2 * (sigma_sq + params.zeta_sq)
    )


def stepsize_conditions(alpha: float, gamma_max: float, K: float, params: HeterogeneityParams) -> dict:
    rho = math.sqrt(params.rho_sq)
    return {
        "alpha_ok": alpha <= 1.0 / (6 * params.L),
        "gamma_max_ok": rho == 0 or gamma_max <= 1.0 / (5 * K * params.L_max * rho),
    }


# ---------------------------------------------------------------------------
# stationarity


def stationarity_gap(iterates: Sequence[np.ndarray], objective) -> tuple[np.ndarray, np.ndarray]:
    """Per-cycle ``||grad F(x^m)||^2`` and its running average."""
    series = np.array([float(np.sum(objective.grad(x) ** 2)) for x in iterates])
    running = np.cumsum(series) / np.arange(1, len(series) + 1)
    return series, running
