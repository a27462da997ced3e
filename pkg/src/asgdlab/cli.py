"""Command-line interface: ``asgdlab <subcommand> ...``.

Exit codes: 0 success, 1 every run diverged, 2 configuration error,
3 non-harmonic computation times, 4 exact local gradients unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis, presets
from .algorithms import ASGD_METHODS, POLICIES, make_strategy
from .engine import TimingModel, simulate
from .experiments import (
    ConfigError,
    ExperimentConfig,
    _jsonable,
    aggregate,
    build_problem,
    config_from_dict,
    read_series_csv,
    run_dir_for,
    run_experiment,
    sweep_stepsize,
)
from .objectives import GradientOracle, quadratic_heterogeneity
from .timing import build_cycle_plan, check_harmonic, harmonize, timing_stats

log = logging.getLogger("asgdlab")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_NONHARMONIC, EXIT_INEXACT = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config loading


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise CliError(f"--set {key}: {p} is not a mapping", EXIT_CONFIG)
    d[parts[-1]] = value


def load_raw_config(target: str) -> dict:
    path = Path(target)
    if path.is_file():
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
            raise CliError(f"{path}: malformed config at {where}: {getattr(exc, 'problem', exc)}", EXIT_CONFIG)
        if not isinstance(raw, dict):
            raise CliError(f"{path}: top level must be a mapping", EXIT_CONFIG)
        return raw
    if target in presets.PRESETS:
        return presets.preset_dict(target)
    raise CliError(f"config file not found and no preset named {target!r}", EXIT_CONFIG)


def resolve_config(args) -> tuple[ExperimentConfig, list[str]]:
    raw = load_raw_config(args.config)
    echoed = []
    if getattr(args, "gamma", None) is not None:
        raw["gamma"] = args.gamma
        raw.pop("alpha", None)
        echoed.append(f"gamma={args.gamma}")
    if getattr(args, "alpha", None) is not None:
        raw["alpha"] = args.alpha
        raw.pop("gamma", None)
        echoed.append(f"alpha={args.alpha}")
    if getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed]
        echoed.append(f"seeds=[{args.seed}]")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        key, value = item.split("=", 1)
        _set_dotted(raw, key.strip(), yaml.safe_load(value))
        echoed.append(item)
    try:
        config = config_from_dict(raw)
    except ConfigError as exc:
        raise CliError(f"{args.config}: invalid config: {exc}", EXIT_CONFIG)
    if getattr(args, "harmonize", False):
        config = replace(config, taus=tuple(harmonize(config.taus)))
    return config, echoed


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--{name}: expected comma-separated numbers, got {text!r}", EXIT_CONFIG)
    if not vals:
        raise CliError(f"--{name}: no values", EXIT_CONFIG)
    return vals


def _out_dir(args, config):
    return Path(args.run_dir) if getattr(args, "run_dir", None) else run_dir_for(config, getattr(args, "out", None))


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    config, echoed = resolve_config(args)
    out = _out_dir(args, config)
    result = run_experiment(config, run_dir=out, jobs=args.jobs)
    if echoed:
        result.summary["overrides"] = echoed
        with open(out / "summary.json", "w") as fh:
            json.dump(_jsonable(result.summary), fh, indent=2, sort_keys=True)
    print(f"run directory: {out}")
    if echoed:
        print("overrides: " + ", ".join(echoed))
    for m, s in result.summary["methods"].items():
        line = f"{m:16s} step={s['step']:.6g} median final loss={s['median_final_loss']:.6g}"
        if "final_x" in s and len(s["final_x"]) == 1:
            (x,) = s["final_x"].values()
            line += f" final x={np.array2string(np.asarray(x), precision=6)}"
        if "target_minimizer" in s:
            line += f" target={np.array2string(np.asarray(s['target_minimizer']), precision=6)}"
        statuses = {v["status"] for v in s["seeds"].values()}
        line += f" status={','.join(sorted(statuses))}"
        print(line)
    if result.all_diverged:
        print("error: every run diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, echoed = resolve_config(args)
    grid = _parse_floats(args.grid, "grid") if args.grid else list(config.gamma_grid)
    if not grid:
        raise CliError("sweep needs --grid or gamma_grid in the config", EXIT_CONFIG)
    try:
        sweeps = sweep_stepsize(config, grid, jobs=args.jobs)
    except ValueError as exc:
        if "no stable stepsize" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        raise
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config.digest(), "overrides": echoed, "sweeps": {m: s.as_dict() for m, s in sweeps.items()}}
    with open(out / "sweep.json", "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
    print(f"run directory: {out}")
    for m, s in sweeps.items():
        flag = " (on grid boundary)" if s.on_boundary else ""
        print(f"{m:16s} best={s.best:.6g}{flag}")
        for g, v, d in zip(s.grid, s.median_final, s.diverged):
            print(f"    {g:<10.4g} median final loss={v:.6g} diverged seeds={d}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    config, _ = resolve_config(args)
    if config.problem.get("kind") != "quadratic":
        raise CliError("decomposition needs exact local gradients (quadratic problems only)", EXIT_INEXACT)
    if not check_harmonic(config.taus):
        raise CliError("decomposition needs harmonic computation times; rerun with --harmonize", EXIT_NONHARMONIC)
    if config.timing != "fixed":
        raise CliError("decomposition needs fixed timing", EXIT_CONFIG)
    method = config.methods[0]
    if method not in POLICIES:
        raise CliError(f"decomposition needs an ASGD method, got {method!r}", EXIT_CONFIG)
    seed = config.seeds[0]
    problem = build_problem(config.problem, len(config.taus), seed)
    sigma_sq = float(config.problem.get("sigma_sq", 0.0))
    gamma = config.step_for(method)
    tau_max = max(config.taus)
    trace = simulate(
        make_strategy(method, gamma),
        GradientOracle(problem.suite, problem.noise, seed),
        TimingModel.fixed(config.taus),
        tau_max * args.cycles,
        problem.x0,
        seed=seed,
        record_vectors=True,
    )
    if trace.status != "ok":
        print(f"error: run diverged ({trace.message})", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{'cycle':>5} {'|S|':>12} {'|bias|':>12} {'|noise|':>12} {'residual':>10}")
    worst = 0.0
    for m in range(args.cycles):
        d = analysis.decompose_cycle(trace, m, problem.suite)
        worst = max(worst, d.relative_residual)
        if m < args.show or m == args.cycles - 1:
            print(
                f"{m:5d} {np.linalg.norm(d.S):12.5e} {np.linalg.norm(d.bias):12.5e} "
                f"{np.linalg.norm(d.noise):12.5e} {d.relative_residual:10.2e}"
            )
    print(f"max relative residual over {args.cycles} cycles: {worst:.3e}")
    policy = POLICIES[method](gamma)
    if sigma_sq > 0 and args.mc_cycles > 0:
        ns = analysis.noise_monte_carlo(problem.suite, config.taus, policy, sigma_sq, problem.x0, args.mc_cycles, seed)
        print(
            f"noise: mean|nu|^2={ns.mean_sq_norm:.6g} A*sigma^2={ns.bound:.6g} ratio={ns.ratio:.4f} "
            f"max|mean nu|={np.abs(ns.mean_noise).max():.3e} band={ns.mean_band:.3e}"
        )
    else:
        print("noise: sigma^2 = 0, nu = 0 on every cycle")
    params = quadratic_heterogeneity(problem.suite, problem.x0)
    bc = analysis.bias_bound_check(trace, problem.suite, params, sigma_sq, args.cycles)
    verdict = "holds" if bc.holds else "VIOLATED"
    cond = "met" if bc.condition_met else "not met"
    print(f"bias: sum|b_m|^2={bc.measured:.6g} bound={bc.bound:.6g} ({verdict}; stepsize condition {cond})")
    return EXIT_OK


def cmd_schedule(args) -> int:
    taus = _parse_floats(args.taus, "taus")
    if any(t <= 0 for t in taus):
        raise CliError("--taus: computation times must be positive", EXIT_CONFIG)
    if args.harmonize:
        rounded = harmonize(taus)
        print(f"harmonized: {taus} -> {rounded}")
        taus = rounded
    if not check_harmonic(taus):
        raise CliError(
            f"computation times {taus} are not harmonic; pass --harmonize to round up to powers of two",
            EXIT_NONHARMONIC,
        )
    plan = build_cycle_plan(taus)
    st = timing_stats(taus)
    print(f"taus: {plan.taus}")
    print(f"K_i: {list(plan.K_i)}")
    print(f"K: {plan.K}")
    print(f"order: {list(plan.order)}")
    print(f"tau_A: {st.tau_A:.6g}")
    print(f"tau_H: {st.tau_H:.6g}")
    print(f"tau_DA: {st.tau_DA:.6g}")
    return EXIT_OK


def cmd_counterexample(args) -> int:
    closed = analysis.counterexample_step(args.x0, args.gamma, args.c)
    simulated = analysis.counterexample_simulate(args.x0, args.gamma, args.c)
    rel = analysis.relative_difference(closed, simulated)
    print(f"closed form: {closed!r}")
    print(f"simulated:   {simulated!r}")
    print(f"relative difference: {rel:.3e}")
    print("PASS" if rel <= 1e-12 else "FAIL")
    return EXIT_OK if rel <= 1e-12 else EXIT_DIVERGED


def cmd_weights(args) -> int:
    taus = _parse_floats(args.taus, "taus")
    if not check_harmonic(taus):
        raise CliError(f"computation times {taus} are not harmonic", EXIT_NONHARMONIC)
    methods = [args.method] if args.method else list(ASGD_METHODS)
    for m in methods:
        tw = analysis.target_weights(m, taus)
        print(f"{m:16s} " + " ".join(f"{w:.6g}" for w in tw.weights))
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise CliError(f"{summary_path} not found", EXIT_CONFIG)
    summary = json.loads(summary_path.read_text())
    print(f"{summary['name']} ({summary['config_hash']})")
    for m, s in summary["methods"].items():
        series = [read_series_csv(p) for p in sorted(run_dir.glob(f"{m}-seed*.csv"))]
        agg = aggregate(series, grid=args.grid, metric=args.metric)
        out = run_dir / f"{m}-aggregate-{args.metric}.csv"
        with open(out, "w") as fh:
            fh.write("time,median,min,max\n")
            for row in zip(agg.time, agg.median, agg.min, agg.max):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        print(f"{m:16s} median final loss={s['median_final_loss']} -> {out.name}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("config", help="YAML config file or preset name")
    p.add_argument("--gamma", type=float, help="override the stepsize parameter")
    p.add_argument("--alpha", type=float, help="override with a cycle stepsize")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a (dotted) config key")
    p.add_argument("--harmonize", action="store_true", help="round computation times up to powers of two")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asgdlab", description="Asynchronous SGD simulation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate every method and seed in a config")
    _add_config_args(p)
    p.add_argument("--out", help="base directory for run directories")
    p.add_argument("--run-dir", help="exact output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="tune the stepsize over a grid")
    _add_config_args(p)
    p.add_argument("--grid", help="comma-separated stepsizes (default: config gamma_grid)")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("decompose", help="cycle-step decomposition, noise and bias checks")
    _add_config_args(p)
    p.add_argument("--cycles", type=int, default=50)
    p.add_argument("--mc-cycles", type=int, default=10_000)
    p.add_argument("--show", type=int, default=5, help="cycles to print")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("schedule", help="print the cycle schedule for given computation times")
    p.add_argument("--taus", required=True, help="comma-separated computation times")
    p.add_argument("--harmonize", action="store_true")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("counterexample", help="closed-form vs simulated one-cycle iterate")
    p.add_argument("--x0", type=float, default=presets.COUNTEREXAMPLE["x0"])
    p.add_argument("--gamma", type=float, default=presets.COUNTEREXAMPLE["gamma"])
    p.add_argument("--c", type=float, default=presets.COUNTEREXAMPLE["c"])
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("weights", help="target weights of the ASGD variants")
    p.add_argument("--taus", required=True)
    p.add_argument("--method", choices=ASGD_METHODS)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("report", help="aggregate a run directory into plot-ready CSVs")
    p.add_argument("run_dir")
    p.add_argument("--metric", default="loss", choices=["loss", "grad_norm_sq", "cumulative_stepsize"])
    p.add_argument("--grid", type=int, default=200)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
