"""Worker speed profiles and the deterministic cycle schedule.

Workers are numbered 1..n everywhere in the public API.  With harmonic
computation times every worker i delivers ``K_i = tau_max / tau_i`` gradients
per cycle of length ``tau_max`` and the order of deliveries repeats exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

HARMONIC_RTOL = 1e-9


@dataclass(frozen=True)
class WorkerProfile:
    id: int
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"worker {self.id}: tau must be positive, got {self.tau}")


def profiles(taus: Sequence[float]) -> list[WorkerProfile]:
    return [WorkerProfile(i + 1, float(t)) for i, t in enumerate(_checked(taus))]


@dataclass(frozen=True)
class TimingStats:
    n: int
    tau_max: float
    tau_min: float
    tau_A: float
    tau_H: float
    tau_DA: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "tau_max": self.tau_max,
            "tau_min": self.tau_min,
            "tau_A": self.tau_A,
            "tau_H": self.tau_H,
            "tau_DA": self.tau_DA,
        }


@dataclass(frozen=True)
class CyclePlan:
    taus: tuple[float, ...]
    K_i: tuple[int, ...]
    K: int
    order: tuple[int, ...]
    duration: float
    delivery_times: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.taus)


def _checked(taus: Sequence[float]) -> list[float]:
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("no workers")
    for t in taus:
        if not (t > 0 and math.isfinite(t)):
            raise ValueError(f"computation times must be positive and finite, got {t}")
    return taus


def _next_pow2(t: float) -> float:
    mantissa, exponent = math.frexp(t)
    if mantissa == 0.5:
        return t
    return math.ldexp(1.0, exponent)


def harmonize(taus: Sequence[float]) -> list[float]:
    """Round every computation time up to the next power of two."""
    return [_next_pow2(t) for t in _checked(taus)]


def _integer_ratio(big: float, small: float) -> int | None:
    r = big / small
    k = round(r)
    if k >= 1 and abs(r - k) <= HARMONIC_RTOL * r:
        return k
    return None


def check_harmonic(taus: Sequence[float]) -> bool:
    taus = _checked(taus)
    for a in range(len(taus)):
        for b in range(a + 1, len(taus)):
            hi, lo = max(taus[a], taus[b]), min(taus[a], taus[b])
            if _integer_ratio(hi, lo) is None:
                return False
    return True


def timing_stats(taus: Sequence[float]) -> TimingStats:
    t = np.asarray(_checked(taus), dtype=float)
    n = t.size
    inv = 1.0 / t
    return TimingStats(
        n=n,
        tau_max=float(t.max()),
        tau_min=float(t.min()),
        tau_A=float(t.mean()),
        tau_H=float(n / inv.sum()),
        tau_DA=float(n * np.sum(inv**3) / np.sum(inv**2) ** 2),
    )


def build_cycle_plan(taus: Sequence[float]) -> CyclePlan:
    """Enumerate one cycle of deliveries in ``(0, tau_max]``.

    All workers start at time 0 and worker i delivers at tau_i, 2 tau_i, ...
    Simultaneous deliveries are ordered by ascending worker index.
    """
    taus = _checked(taus)
    if not check_harmonic(taus):
        raise ValueError("harmonic periods required")
    tau_max = max(taus)
    K_i = [_integer_ratio(tau_max, t) for t in taus]
    # Exact rational keys: the j-th delivery of worker i sits at j/K_i of the cycle.
    slots = sorted(
        (Fraction(j, k), i + 1) for i, k in enumerate(K_i) for j in range(1, k + 1)
    )
    order = tuple(w for _, w in slots)
    times = tuple(float(frac * Fraction(tau_max)) for frac, _ in slots)
    return CyclePlan(
        taus=tuple(taus),
        K_i=tuple(K_i),
        K=sum(K_i),
        order=order,
        duration=tau_max,
        delivery_times=times,
    )


def analytic_delays(taus: Sequence[float]) -> list[float]:
    """Per-worker delay ``tau_i * n / tau_H - 1`` of the ascending-index schedule.

    For workers that deliver several times per cycle this is the per-cycle
    average; individual deliveries may differ (see ``engine.measure_delays``).
    """
    st = timing_stats(taus)
    return [t * st.n / st.tau_H - 1.0 for t in _checked(taus)]
