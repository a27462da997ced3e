import numpy as np
import pytest
from hypothesis import given, strategies as st

from asgdlab import analysis
from asgdlab.algorithms import AsgdImmediate, Rescaled, Vanilla
from asgdlab.engine import TimingModel, cycle_iterates, simulate
from asgdlab.objectives import (
    AdditiveGaussian,
    GradientOracle,
    HeterogeneityParams,
    MlpModel,
    mlp_suite,
    quadratic_heterogeneity,
    quadratic_suite,
)
from asgdlab.data import partition_by_label, synth_classification
from asgdlab.timing import timing_stats


def suite5():
    rs = np.random.default_rng(4)
    return quadratic_suite([(float(a), rs.standard_normal(3)) for a in rs.uniform(0.5, 2.0, 5)])


def recorded(policy, taus, cycles, sigma_sq=0.0, suite=None, seed=0):
    suite = suite or suite5()
    noise = AdditiveGaussian(sigma_sq)
    tr = simulate(AsgdImmediate(policy), GradientOracle(suite, noise, seed), TimingModel.fixed(taus),
                  max(taus) * cycles, np.zeros(suite.dim), record_vectors=True)
    return tr, suite


def test_noise_vanishes_without_sampling_noise():
    tr, suite = recorded(Rescaled(0.05), (1, 2, 2, 4, 8), 3)
    for m in range(3):
        d = analysis.decompose_cycle(tr, m, suite)
        assert np.all(d.noise == 0)
        assert d.relative_residual <= 1e-10


def test_homogeneous_first_cycle_has_no_bias():
    tr, suite = recorded(Vanilla(0.05), (2, 2, 2, 2, 2), 2)
    d = analysis.decompose_cycle(tr, 0, suite)
    assert np.all(d.bias == 0)
    assert np.linalg.norm(analysis.decompose_cycle(tr, 1, suite).bias) > 0


def test_decomposition_weights_are_policy_targets():
    taus = (1, 2, 2, 4, 8)
    tr, suite = recorded(Rescaled(0.05), taus, 2, sigma_sq=1.0)
    d = analysis.decompose_cycle(tr, 1, suite)
    assert d.weights == pytest.approx([0.2] * 5)
    assert d.alpha == pytest.approx(Rescaled(0.05).constants(taus).alpha)


def test_decomposition_needs_exact_gradients():
    ds = synth_classification(2, 3, 5, 1.0, 0)
    model = MlpModel(3, 4, 2)
    suite = mlp_suite(model, partition_by_label(ds, 2))
    tr = simulate(AsgdImmediate(Vanilla(0.1)), GradientOracle(suite), TimingModel.fixed((1, 2)), 4,
                  model.init(0), record_vectors=True)
    with pytest.raises(ValueError, match="exact local gradients"):
        analysis.decompose_cycle(tr, 0, suite)


def test_decomposition_needs_recorded_vectors():
    suite = suite5()
    tr = simulate(AsgdImmediate(Vanilla(0.1)), GradientOracle(suite), TimingModel.fixed((1,) * 5), 3, np.zeros(3))
    with pytest.raises(ValueError, match="without gradient vectors"):
        analysis.decompose_cycle(tr, 0, suite)
    with pytest.raises(ValueError, match="not complete"):
        analysis.decompose_cycle(recorded(Vanilla(0.1), (1,) * 5, 2)[0], 5, suite)


def test_noise_monte_carlo_small():
    suite = suite5()
    ns = analysis.noise_monte_carlo(suite, (1, 2, 2, 4, 8), Rescaled(0.05), 1.0, np.zeros(3), n_cycles=2000)
    assert 0 < ns.ratio <= 1.15
    assert np.all(np.abs(ns.mean_noise) <= ns.mean_band)
    assert ns.A == pytest.approx(Rescaled(0.05).constants((1, 2, 2, 4, 8)).A)


def test_bias_bound_holds():
    taus = (1, 2, 2, 4, 8)
    suite = suite5()
    params = quadratic_heterogeneity(suite, np.zeros(3))
    tr, _ = recorded(Rescaled(0.01), taus, 20, sigma_sq=1.0, suite=suite)
    bc = analysis.bias_bound_check(tr, suite, params, 1.0, 20)
    assert bc.condition_met
    assert bc.holds
    assert bc.series.shape == (20,)


def test_counterexample_closed_form():
    assert analysis.counterexample_step(0.0, 0.3, 0.0) == 0.0
    assert analysis.counterexample_step(1.0, 1.0, 2.0) == -4.0
    assert analysis.counterexample_step(0.5, 0.1, 10.0) == pytest.approx(0.205, rel=1e-14)
    assert analysis.counterexample_simulate(0.5, 0.1, 10.0) == pytest.approx(0.205, rel=1e-12)


@given(st.floats(-5, 5), st.floats(0.01, 0.99), st.floats(0, 100))
def test_counterexample_engine_matches(x0, gamma, c):
    closed = analysis.counterexample_step(x0, gamma, c)
    sim = analysis.counterexample_simulate(x0, gamma, c)
    assert abs(closed - sim) <= 1e-12 * max(abs(closed), abs(sim)) + 1e-300


@given(st.floats(-2, 2), st.floats(0.5, 50))
def test_counterexample_blowup(x0, excess):
    gamma = 0.1
    c = analysis.counterexample_threshold(x0, gamma) + excess
    x1 = analysis.counterexample_step(x0, gamma, c)
    # grad F = x for the equal-weighted average of the two local functions
    assert abs(x1) > 1.0


def test_target_weights_examples():
    assert analysis.target_weights("rescaled", (1, 2, 4)).weights == pytest.approx((1 / 3,) * 3)
    assert analysis.target_weights("vanilla", (1, 2)).weights == pytest.approx((2 / 3, 1 / 3))
    assert analysis.target_weights("delay_adaptive", (1, 100)).weights == pytest.approx((10000 / 10001, 1 / 10001))
    with pytest.raises(ValueError, match="unsupported"):
        analysis.target_weights("malenia", (1, 2))
    with pytest.raises(ValueError, match="harmonic"):
        analysis.target_weights("vanilla", (2, 3))


@given(st.lists(st.sampled_from([1, 2, 4, 8]), min_size=1, max_size=6), st.sampled_from([0.5, 2.0, 8.0]))
def test_target_weight_invariances(taus, scale):
    n = len(taus)
    assert analysis.target_weights("rescaled", taus).weights == pytest.approx((1 / n,) * n)
    a = analysis.target_weights("vanilla", taus).weights
    b = analysis.target_weights("vanilla", [t * scale for t in taus]).weights
    assert a == pytest.approx(b)


def test_measured_weights_match_targets():
    for policy, method in [(Vanilla(0.01), "vanilla"), (Rescaled(0.01), "rescaled")]:
        tr, _ = recorded(policy, (1, 2, 4, 4, 8), 5)
        measured = analysis.measured_target_weights(tr).weights
        assert measured == pytest.approx(analysis.target_weights(method, (1, 2, 4, 4, 8)).weights, rel=1e-12)


PARAMS = HeterogeneityParams(zeta_sq=1.0, rho_sq=2.0, L=3.0, L_max=5.0, Delta=7.0)


def test_leading_term_ratios():
    st_ = timing_stats((1, 2, 4, 16))
    r = analysis.leading_term("rescaled", PARAMS, st_, 0.1, 2.0)
    assert r / analysis.leading_term("naive_minibatch", PARAMS, st_, 0.1, 2.0) == pytest.approx(st_.tau_A / st_.tau_max)
    assert analysis.leading_term("vanilla", PARAMS, st_, 0.1, 2.0) / r == pytest.approx(st_.tau_H / st_.tau_A)
    assert r == pytest.approx(7 * 3 * 2 / (4 * 0.01) * st_.tau_A)
    assert analysis.leading_term("concurrent", PARAMS, st_, 0.1, 2.0) == pytest.approx(
        7 * 3 * 3 / (4 * 0.01) * st_.tau_max
    )
    assert analysis.leading_term("ringleader", PARAMS, st_, 0.1, 2.0, L_prime=6.0) == pytest.approx(2 * r)


def test_leading_terms_coincide_for_equal_times():
    st_ = timing_stats((3, 3, 3))
    vals = [analysis.leading_term(m, PARAMS, st_, 0.1, 2.0) for m in ("rescaled", "vanilla", "delay_adaptive", "naive_minibatch")]
    assert max(vals) == pytest.approx(min(vals))


def test_leading_term_validation():
    with pytest.raises(ValueError):
        analysis.leading_term("rescaled", PARAMS, timing_stats((1,)), 0.0, 1.0)
    with pytest.raises(ValueError, match="unknown method"):
        analysis.leading_term("adam", PARAMS, timing_stats((1,)), 0.1, 1.0)


def test_complexity_terms():
    st_ = timing_stats((1, 4))
    t = analysis.complexity_terms("rescaled", PARAMS, st_, 0.01, 2.0)
    assert t[0] == pytest.approx(analysis.leading_term("rescaled", PARAMS, st_, 0.01, 2.0))
    assert t[3] == pytest.approx(7 * 3 / 0.01 * 4)
    v = analysis.complexity_terms("vanilla", PARAMS, st_, 0.01, 2.0)
    assert v[0] / t[0] == pytest.approx(st_.tau_H / st_.tau_A)


def test_convergence_bound_rescaled_form():
    taus = (1, 2, 4)
    st_ = timing_stats(taus)
    gamma, M, sigma_sq = 0.01, 50, 2.0
    c = Rescaled(gamma).constants(taus)
    got = analysis.convergence_bound(c.alpha, c.A, c.K, PARAMS, sigma_sq, M)
    want = (
        4 * PARAMS.Delta / (gamma * st_.tau_H * M)
        + 6 * gamma * st_.tau_A * PARAMS.L * sigma_sq / c.K
        + 10 * gamma**2 * st_.tau_A**2 * PARAMS.L_max**2 * (sigma_sq + PARAMS.zeta_sq)
    )
    assert got == pytest.approx(want, rel=1e-12)


def test_stepsize_conditions():
    ok = analysis.stepsize_conditions(0.01, 0.001, 7, PARAMS)
    assert ok == {"alpha_ok": True, "gamma_max_ok": True}
    assert not analysis.stepsize_conditions(1.0, 1.0, 7, PARAMS)["alpha_ok"]


def test_stationarity_gap():
    suite = quadratic_suite([(2.0, 1.0)])
    F = suite.objective()
    series, running = analysis.stationarity_gap([np.array([1.0]), np.array([2.0])], F)
    assert series == pytest.approx([0.0, 4.0])
    assert running == pytest.approx([0.0, 2.0])
    tr = simulate(AsgdImmediate(Vanilla(0.1)), GradientOracle(suite), TimingModel.fixed((1,)), 30, [3.0])
    s, r = analysis.stationarity_gap(cycle_iterates(tr), F)
    assert np.all(np.diff(r) <= 0)
    # x1 = 3 - 0.1 * 2 * (3 - 1) = 2.6, so F'(x1) = 3.2
    assert s[1] == pytest.approx(3.2**2)
