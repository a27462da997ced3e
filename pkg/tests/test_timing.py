import math

import pytest
from hypothesis import given, strategies as st

from asgdlab.timing import (
    analytic_delays,
    build_cycle_plan,
    check_harmonic,
    harmonize,
    profiles,
    timing_stats,
)
from oracles import exact_tau_stats, tick_order

pow2_taus = st.lists(st.sampled_from([1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]), min_size=1, max_size=8)


def test_two_worker_plan():
    plan = build_cycle_plan([1, 2])
    assert plan.K_i == (2, 1)
    assert plan.K == 3
    assert plan.order == (1, 1, 2)
    assert plan.delivery_times == (1.0, 2.0, 2.0)


def test_three_worker_order_matches_tick_oracle():
    plan = build_cycle_plan([1, 2, 4])
    assert list(zip(plan.delivery_times, plan.order)) == [(float(t), w) for t, w in tick_order((1, 2, 4), 4)]


def test_homogeneous_plan():
    plan = build_cycle_plan([3, 3, 3])
    assert plan.order == (1, 2, 3)
    assert plan.K == 3


def test_non_harmonic_rejected():
    assert not check_harmonic([2, 3])
    with pytest.raises(ValueError, match="harmonic periods required"):
        build_cycle_plan([2, 3])


def test_invalid_times():
    with pytest.raises(ValueError, match="no workers"):
        harmonize([])
    with pytest.raises(ValueError):
        profiles([1.0, -1.0])
    with pytest.raises(ValueError):
        timing_stats([0.0])


def test_harmonize_rounds_up():
    assert harmonize([1.5, 3]) == [2.0, 4.0]
    assert harmonize([1, 2, 4]) == [1.0, 2.0, 4.0]
    assert harmonize([0.3]) == [0.5]


@pytest.mark.parametrize(
    "taus, expected",
    [((1, 10), 1.96), ([1] + [2] * 9, 2.01)],
)
def test_tau_da_published_values(taus, expected):
    assert round(timing_stats(taus).tau_DA, 2) == expected


def test_means_match_exact_arithmetic():
    taus = (1, 2, 2, 8)
    tau_A, tau_H, tau_DA = exact_tau_stats(taus)
    st_ = timing_stats(taus)
    assert st_.tau_A == pytest.approx(float(tau_A), rel=1e-15)
    assert st_.tau_H == pytest.approx(float(tau_H), rel=1e-15)
    assert st_.tau_DA == pytest.approx(float(tau_DA), rel=1e-15)


def test_analytic_delays_two_workers():
    assert analytic_delays([1, 2]) == pytest.approx([0.5, 2.0])


@given(pow2_taus)
def test_plan_counts(taus):
    plan = build_cycle_plan(taus)
    st_ = timing_stats(taus)
    assert all(k * t == st_.tau_max for k, t in zip(plan.K_i, taus))
    assert plan.K == round(st_.n * st_.tau_max / st_.tau_H)
    assert math.isclose(plan.K, st_.n * st_.tau_max / st_.tau_H, rel_tol=1e-12)
    assert sorted(plan.order) == sorted(w for w, k in enumerate(plan.K_i, 1) for _ in range(k))
    assert list(plan.delivery_times) == sorted(plan.delivery_times)


@given(pow2_taus)
def test_mean_ordering(taus):
    s = timing_stats(taus)
    assert s.tau_min <= s.tau_H * (1 + 1e-12)
    assert s.tau_H <= s.tau_A * (1 + 1e-12)
    assert s.tau_A <= s.tau_max


@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=6))
def test_harmonized_times_are_harmonic(taus):
    rounded = harmonize(taus)
    assert check_harmonic(rounded)
    assert all(r >= t and r < 2 * t for r, t in zip(rounded, taus))
