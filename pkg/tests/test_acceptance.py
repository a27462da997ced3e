"""Acceptance criteria, one test each.

Every test records a ``criterion N: PASS|FAIL ...`` line (printed in the
pytest terminal summary) before asserting, so a failing criterion is reported
rather than hidden.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import os
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from asgdlab import analysis
from asgdlab.algorithms import AsgdImmediate, Rescaled, make_strategy
from asgdlab.engine import TimingModel, delivered_order, simulate
from asgdlab.experiments import DEFAULT_GRID, build_problem, run_experiment, run_single, sweep_stepsize
from asgdlab.objectives import GradientOracle, MlpModel, quadratic_heterogeneity
from asgdlab.data import synth_classification
from asgdlab.presets import preset
from asgdlab.timing import build_cycle_plan, timing_stats
from conftest import ACCEPTANCE_LINES

JOBS = max(1, min(4, os.cpu_count() or 1))


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_harmonic_taus(rs, max_n=8, max_exp=6):
    n = int(rs.integers(1, max_n + 1))
    return [float(2 ** int(e)) for e in rs.integers(0, max_exp + 1, n)]


def test_criterion_01_objective_inconsistency():
    t0 = time.perf_counter()
    res = run_experiment(preset("appendix-f1"), write=False)
    elapsed = time.perf_counter() - t0
    xr = cycle_final(res, "rescaled")
    xv = cycle_final(res, "vanilla")
    ok = abs(xr + 2 / 3) <= 0.02 and abs(xv - 0.5) <= 0.02 and elapsed < 1.0
    record(1, ok, f"rescaled x={xr:.4f} (target -2/3), vanilla x={xv:.4f} (target 1/2), {elapsed:.2f}s")


def cycle_final(res, method):
    # horizon is a whole number of cycles, so the final model is a cycle iterate
    return float(res.runs[method][0].final_x[0])


def test_criterion_02_delay_adaptive_bias():
    t0 = time.perf_counter()
    res = run_experiment(preset("appendix-f2"), write=False)
    elapsed = time.perf_counter() - t0
    w = analysis.target_weights("delay_adaptive", (1, 100)).weights
    target = w[0] - w[1]
    x = cycle_final(res, "delay_adaptive")
    ok = abs(x - target) <= 0.05 and abs(target - 0.9998) < 1e-4 and elapsed < 5.0
    record(2, ok, f"delay-adaptive x={x:.5f} (target {target:.5f}), {elapsed:.2f}s")


def test_criterion_03_counterexample_oracle():
    rs = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x0 = float(rs.uniform(-10, 10))
        gamma = float(rs.uniform(1e-3, 1 - 1e-3))
        c = float(rs.uniform(0, 100))
        closed = analysis.counterexample_step(x0, gamma, c)
        sim = analysis.counterexample_simulate(x0, gamma, c)
        worst = max(worst, analysis.relative_difference(closed, sim))
    elapsed = time.perf_counter() - t0
    record(3, worst <= 1e-12 and elapsed < 1.0, f"max relative error {worst:.2e} over 100 triples, {elapsed:.2f}s")


def test_criterion_04_schedule_invariants():
    rs = np.random.default_rng(4)
    t0 = time.perf_counter()
    problems = []
    for _ in range(200):
        taus = random_harmonic_taus(rs)
        plan = build_cycle_plan(taus)
        st = timing_stats(taus)
        tau_max = st.tau_max
        if any(k * t != tau_max for k, t in zip(plan.K_i, taus)):
            problems.append(f"K_i {taus}")
        tau_H = Fraction(len(taus)) / sum(1 / Fraction(t) for t in taus)
        if plan.K != len(taus) * Fraction(tau_max) / tau_H:
            problems.append(f"K {taus}")
        suite_spec = {"kind": "quadratic", "locals": [[1.0, float(i)] for i in range(len(taus))]}
        problem = build_problem(suite_spec, len(taus), 0)
        tr = simulate(make_strategy("vanilla", 0.01), GradientOracle(problem.suite), TimingModel.fixed(taus),
                      5 * tau_max, problem.x0)
        if max(e.delay for e in tr.events) > plan.K:
            problems.append(f"delay {taus}")
        order = delivered_order(tr)
        if len(order) != 5 * plan.K or any(
            tuple(order[m * plan.K : (m + 1) * plan.K]) != plan.order for m in range(5)
        ):
            problems.append(f"order {taus}")
    elapsed = time.perf_counter() - t0
    record(4, not problems and elapsed < 10.0, f"{len(problems)} violations over 200 sets, {elapsed:.2f}s {problems[:3]}")


def test_criterion_05_stepsize_identities():
    rs = np.random.default_rng(5)
    worst = {"GK": 0.0, "alpha": 0.0, "A": 0.0}
    for _ in range(100):
        taus = random_harmonic_taus(rs)
        gamma = float(10 ** rs.uniform(-4, 0))
        st = timing_stats(taus)
        plan = build_cycle_plan(taus)
        c = Rescaled(gamma).constants(taus)
        prods = [g * k for g, k in zip(c.gammas, plan.K_i)]
        worst["GK"] = max(worst["GK"], (max(prods) - min(prods)) / max(prods))
        worst["alpha"] = max(worst["alpha"], abs(c.alpha - gamma * st.tau_H) / (gamma * st.tau_H))
        want_A = gamma**2 * st.tau_H * st.tau_A / plan.K
        worst["A"] = max(worst["A"], abs(c.A - want_A) / want_A)
    ok = worst["GK"] <= 1e-15 and worst["alpha"] <= 1e-12 and worst["A"] <= 1e-12
    record(5, ok, "max relative errors " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def _decompose_run(cycles):
    cfg = preset("decompose")
    problem = build_problem(cfg.problem, len(cfg.taus), cfg.seeds[0])
    gamma = cfg.step_for("rescaled")
    tr = simulate(AsgdImmediate(Rescaled(gamma)), GradientOracle(problem.suite, problem.noise, cfg.seeds[0]),
                  TimingModel.fixed(cfg.taus), max(cfg.taus) * cycles, problem.x0, record_vectors=True)
    return cfg, problem, gamma, tr


def test_criterion_06_cycle_decomposition():
    cfg, problem, _, tr = _decompose_run(50)
    worst = max(analysis.decompose_cycle(tr, m, problem.suite).relative_residual for m in range(50))
    record(6, worst <= 1e-10 and problem.suite.n == 5, f"max relative residual {worst:.2e} over 50 cycles")


def test_criterion_07_noise_bound():
    cfg = preset("decompose")
    problem = build_problem(cfg.problem, len(cfg.taus), 0)
    t0 = time.perf_counter()
    ns = analysis.noise_monte_carlo(problem.suite, cfg.taus, Rescaled(cfg.step_for("rescaled")), 1.0, problem.x0,
                                    n_cycles=10_000, seed=7)
    elapsed = time.perf_counter() - t0
    worst = float(np.abs(ns.mean_noise).max())
    ok = 0 < ns.mean_sq_norm <= 1.05 * ns.bound and worst <= ns.mean_band and elapsed < 30.0
    record(7, ok, f"mean|nu|^2/(A sigma^2)={ns.ratio:.4f}, max|mean nu|={worst:.2e} <= {ns.mean_band:.2e}, {elapsed:.1f}s")


def test_criterion_08_bias_bound():
    cfg, problem, gamma, tr = _decompose_run(100)
    params = quadratic_heterogeneity(problem.suite, problem.x0)
    bc = analysis.bias_bound_check(tr, problem.suite, params, float(cfg.problem["sigma_sq"]), 100)
    record(8, bc.condition_met and bc.holds, f"sum|b_m|^2={bc.measured:.3e} <= bound {bc.bound:.3e}, condition met={bc.condition_met}")


def test_criterion_09_tau_da():
    a = timing_stats((1, 10)).tau_DA
    b = timing_stats([1] + [2] * 9).tau_DA
    record(9, round(a, 2) == 1.96 and round(b, 2) == 2.01, f"tau_DA(1,10)={a:.4f}, tau_DA(1,2x9)={b:.4f}")


def test_criterion_10_cumulative_stepsize_rate():
    cfg = preset("appendix-f1", methods=["rescaled"], horizon=400.0, sample_every=0.5)
    r = run_single(cfg, "rescaled", 0)
    alpha, tau_max = 0.01, 2.0
    t, cum = r.series["time"], r.series["cumulative_stepsize"]
    line = alpha / tau_max * t
    within = bool(np.all(np.abs(cum - line) <= alpha * (1 + 1e-12)))
    boundary = np.isclose(t % tau_max, 0.0) & (t > 0)
    exact = bool(np.all(np.abs(cum[boundary] - line[boundary]) <= 1e-12 * line[boundary]))
    record(10, within and exact, f"max gap {np.abs(cum - line).max():.2e} (one cycle alpha={alpha}); boundaries exact={exact}")


def test_criterion_11_desk_scale_mlp():
    t0 = time.perf_counter()
    fixed = preset("mnist-style-fixed", methods=["rescaled"])
    sweep = sweep_stepsize(fixed, DEFAULT_GRID, jobs=JOBS)["rescaled"]
    gamma = sweep.best
    tuned_fixed = replace(fixed, gamma=gamma)
    runs_fixed = run_experiment(tuned_fixed, write=False, jobs=JOBS).runs["rescaled"]
    initial = np.median([r.series["loss"][0] for r in runs_fixed])
    final_fixed = float(np.median([r.final_loss for r in runs_fixed]))

    fluct = preset("mnist-style-fluctuating", methods=["rescaled", "malenia", "ringleader"])
    alpha = Rescaled(gamma).constants(fluct.taus).alpha
    fluct = replace(fluct, gamma={"rescaled": gamma, "malenia": alpha, "ringleader": alpha})
    res = run_experiment(fluct, write=False, jobs=JOBS)
    final_fluct = float(np.median([r.final_loss for r in res.runs["rescaled"]]))
    tau_max = max(fluct.taus)
    rounds = {m: float(np.mean([d for r in res.runs[m] for d in r.round_durations])) for m in ("malenia", "ringleader")}
    elapsed = time.perf_counter() - t0

    c_loss = final_fixed < 0.5 * initial
    c_robust = abs(final_fluct - final_fixed) <= 0.15 * final_fixed
    c_rounds = all(v > tau_max for v in rounds.values())
    ok = c_loss and c_robust and c_rounds and elapsed < 300
    record(
        11,
        ok,
        f"gamma={gamma:g} (boundary={sweep.on_boundary}); loss {initial:.3f}->{final_fixed:.3f}; "
        f"fluctuating {final_fluct:.3f} ({(final_fluct / final_fixed - 1) * 100:+.1f}%); "
        f"mean rounds malenia={rounds['malenia']:.2f} ringleader={rounds['ringleader']:.2f} > {tau_max:g}; {elapsed:.0f}s",
    )


def test_criterion_12_mlp_gradient():
    cfg = preset("mnist-style-fixed")
    ds = synth_classification(10, 20, 50, 3.0, 0)
    model = MlpModel(20, int(cfg.problem["hidden"]), 10)
    theta = model.init(0)
    _, g = model.loss_and_grad(theta, ds.features, ds.labels)
    rs = np.random.default_rng(12)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        v = rs.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        fd = (model.loss(theta + h * v, ds.features, ds.labels) - model.loss(theta - h * v, ds.features, ds.labels)) / (2 * h)
        worst = max(worst, abs(fd - g @ v) / max(abs(fd), abs(g @ v)))
    record(12, worst <= 1e-5, f"max relative directional error {worst:.2e} over 20 directions")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
