"""Command-line runner for the full pipeline.

Every subcommand writes into one output directory: its data artifacts,
the resolved ``config.ini`` and a ``manifest.json`` listing the config,
derived seeds, package versions and artifact hashes.  Only the
``runtime`` block of the manifest varies between identical reruns.

Exit codes: 0 ok, 1 invalid config, 2 a numerical check failed,
3 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config as cfgmod, io
from .errors import ConfigError, ConvergenceError, EmbeddingError, LBMError
from .gmc import (FieldStack, ball_mass_scaling, ball_scaling_ensemble, build_measure,
                  build_stack, convergence_diagnostic, derive_seed, extend_stack)
from .kernels import oracle_gate
from .pcaf import (EnsembleConfig, lbm_ensemble, lbm_path, pcaf_integrate, pcaf_levels,
                   revuz_check, simulate_bm, uniform_clock)
from .potential import (bound_envelope, certify_bound, domination_slack, finite_energy,
                        log_potential, modulus_of_continuity, resolvent_potential)

OUTPUT_ROOT_ENV = "LBM_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3

# seed key paths below the master seed
ENV_KEY, PATH_KEY, BOOT_KEY, REVUZ_KEY = 0, 1, 4, 5


class Run:
    """Output directory, artifact bookkeeping and check results for one run."""

    def __init__(self, subcommand: str, cfg, out: Path, threads: int):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.artifacts: list = []
        self.seeds: dict = {}
        self.checks: dict = {}
        self.runtime_extra: dict = {}

    def file(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.out / name

    def json(self, name: str, obj) -> None:
        io.write_json(self.file(name), obj)

    def check(self, name: str, passed: bool) -> None:
        self.checks[name] = bool(passed)

    @property
    def status(self) -> int:
        return EXIT_OK if all(self.checks.values()) else EXIT_CHECK

    def say(self, msg: str) -> None:
        print(msg)


def _environment(run: Run, replica: int = 0, n: int | None = None) -> FieldStack:
    """Field stack of one environment; gamma = 0 needs no field."""
    cfg = run.cfg
    seed = derive_seed(cfg.run_master_seed, ENV_KEY, replica)
    if cfg.model_gamma == 0.0:
        return FieldStack.empty(cfg.grid(), cfg.cuts(), seed)
    n = cfg.model_n_levels if n is None else n
    return build_stack(cfg.grid(), n, cfg.cuts(), cfg.kernel(), seed)


def _stack_seeds(stack: FieldStack) -> dict:
    return {"environment": stack.master_seed, "bands": list(stack.seeds)}


# ---------------------------------------------------------------------------
# subcommands


def cmd_kernels_check(run: Run) -> None:
    rep = oracle_gate(run.cfg.kernel())
    io.write_csv(run.file("kernel_gate.csv"), ["r", "seed_kernel", "massive_green", "resolvent_kernel"],
                 zip(rep.radii, rep.seed_rel_err, rep.green_rel_err, rep.resolvent_rel_err))
    run.json("kernel_gate.json", {"m": run.cfg.model_m, "tol": rep.tol, "radii": len(rep.radii),
                                  "max_rel_err": rep.max_errors, "passed": rep.passed})
    run.say(f"{'r':>10} {'seed_kernel':>12} {'massive_green':>14} {'resolvent':>12}")
    for i in range(0, len(rep.radii), 20):
        run.say(f"{rep.radii[i]:10.4g} {rep.seed_rel_err[i]:12.3e} "
                f"{rep.green_rel_err[i]:14.3e} {rep.resolvent_rel_err[i]:12.3e}")
    for name, err in rep.max_errors.items():
        run.say(f"max rel err {name:<17} {err:.3e}  (tol {rep.tol:g})")
    run.check("kernel_oracle_gate", rep.passed)


def cmd_sample_field(run: Run) -> None:
    cfg = run.cfg
    grid = cfg.grid()
    stack = build_stack(grid, cfg.model_n_levels, cfg.cuts(), cfg.kernel(),
                        derive_seed(cfg.run_master_seed, ENV_KEY, 0))
    run.seeds.update(_stack_seeds(stack))
    X = np.asarray(stack.accumulated)
    io.write_grid_lbm1(run.file("field.lbm1"), grid, X, "field", cfg.model_gamma, stack.n,
                       stack.master_seed)
    io.write_grid_csv(run.file("field.csv"), grid, X)
    run.json("field.json", {"n": stack.n, "variance": stack.variance,
                            "sample_mean": float(X.mean()), "sample_var": float(X.var()),
                            "grid": io.grid_to_dict(grid), "seeds": _stack_seeds(stack)})
    run.say(f"field n={stack.n} variance={stack.variance:.6g} "
            f"sample mean={X.mean():.4g} var={X.var():.4g}")


def cmd_build_measure(run: Run) -> None:
    cfg = run.cfg
    stack = _environment(run)
    run.seeds.update(_stack_seeds(stack))
    mu = build_measure(stack, cfg.model_gamma, cfg.model_gamma_zero_diagnostic)
    window = cfg.window_mask()
    io.write_grid_lbm1(run.file("measure.lbm1"), mu.grid, mu.cell_mass, "measure", mu.gamma,
                       mu.n, stack.master_seed)
    io.write_grid_csv(run.file("measure.csv"), mu.grid, mu.cell_mass)
    run.json("measure.json", {"gamma": mu.gamma, "n": mu.n, "total_mass": mu.total,
                              "window": io.window_to_dict(window), "window_mass": mu.mass(window),
                              "grid": io.grid_to_dict(mu.grid), "seeds": _stack_seeds(stack)})
    ok = math.isfinite(mu.total) and mu.total > 0
    run.check("finite_positive_mass", ok)
    run.say(f"measure gamma={mu.gamma} n={mu.n} total mass={mu.total:.6g}")


def cmd_potentials(run: Run) -> None:
    cfg = run.cfg
    stack = _environment(run)
    run.seeds.update(_stack_seeds(stack))
    mu = build_measure(stack, cfg.model_gamma, cfg.model_gamma_zero_diagnostic)
    grid, window, depth = mu.grid, cfg.window_mask(), cfg.potentials_depth
    bound = certify_bound(grid, depth)
    lp = log_potential(mu, depth=depth)
    rp = resolvent_potential(mu, window, depth=depth)
    env = bound_envelope(mu, window, bound.c1, bound.c2, depth=depth, log_field=lp)
    slack = domination_slack(rp, env)
    violations = int(np.sum(slack < 0))
    energy = finite_energy(mu, window, bound, depth)
    for pf in (lp, rp, env):
        io.write_grid_lbm1(run.file(f"{pf.kind}.lbm1"), grid, pf.values, "potential", mu.gamma,
                           mu.n, stack.master_seed)
    finite = math.isfinite(energy.double_integral) and math.isfinite(energy.potential_sup)
    run.json("potentials.json", {
        "c1": bound.c1, "c2": bound.c2, "bound_verified": bound.verified,
        "ck": env.source["ck"], "violations": violations, "min_slack": float(slack.min()),
        "modulus_log_potential": modulus_of_continuity(lp),
        "modulus_resolvent_potential": modulus_of_continuity(rp),
        "energy": energy.to_dict(), "energy_finite": finite, "seeds": _stack_seeds(stack),
    })
    run.check("bound_verified", bound.verified)
    run.check("domination", violations == 0)
    run.check("finite_energy", finite)
    run.say(f"c1={bound.c1:.6g} c2={bound.c2:.6g} violations={violations} "
            f"min slack={slack.min():.3e}")
    run.say(f"energy={energy.double_integral:.6g} sup R1(1_G M)={energy.potential_sup:.6g}")


def cmd_simulate_lbm(run: Run) -> None:
    cfg = run.cfg
    stack = _environment(run)
    path_seed = derive_seed(cfg.run_master_seed, PATH_KEY, 0)
    run.seeds.update(_stack_seeds(stack), path=path_seed)
    start = cfg.point("path.start", cfg.path_start)
    path = simulate_bm(start, cfg.path_horizon, cfg.path_step(), path_seed)
    F = pcaf_integrate(path, stack, cfg.model_gamma, cfg.model_gamma_zero_diagnostic)
    if cfg.path_clock == "base":
        clock = path.times[path.times <= F.final]
    else:
        clock = uniform_clock(cfg.path_clock_step, cfg.path_clock_horizon)
    tc = lbm_path(path, F, clock)
    g, n = cfg.model_gamma, stack.n
    io.write_path_lbm1(run.file("bm_path.lbm1"), path.times, path.positions, g, n, path_seed)
    io.write_path_csv(run.file("bm_path.csv"), path.times, path.positions)
    io.write_path_lbm1(run.file("lbm_path.lbm1"), tc.lbm_times, tc.lbm_positions, g, n, path_seed)
    io.write_path_csv(run.file("lbm_path.csv"), tc.lbm_times, tc.lbm_positions)
    io.write_csv(run.file("pcaf.csv"), ["t", "F", "density"],
                 zip(path.times, F.values, F.density_trace))
    run.json("simulate.json", {"gamma": g, "n": n, "dt": path.dt, "steps": path.steps,
                               "start": list(start), "F_T": float(F.final),
                               "clock": cfg.path_clock, "clock_points": int(clock.size),
                               "levels": pcaf_levels(path, stack, g)["levels"] if n else [],
                               "seeds": dict(run.seeds)})
    run.say(f"simulated {path.steps} steps, F_T={F.final:.6g}, {clock.size} LBM points")


def _ensemble_config(cfg) -> EnsembleConfig:
    if cfg.ensemble_start == "uniform":
        start = None
    else:
        start = cfg.point("ensemble.start", cfg.ensemble_start)
    return EnsembleConfig(
        grid=cfg.grid(), kernel=cfg.kernel(), cuts=cfg.cuts(), n=cfg.model_n_levels,
        gamma=cfg.model_gamma, gamma_zero_diagnostic=cfg.model_gamma_zero_diagnostic,
        environments=cfg.ensemble_environments, paths_per_env=cfg.ensemble_paths_per_env,
        start=start, horizon=cfg.path_horizon, dt=cfg.path_step(),
        clock_step=cfg.path_clock_step, clock_horizon=cfg.path_clock_horizon,
        occupation_bins=cfg.ensemble_occupation_bins, on_exit=cfg.path_on_exit,
        master_seed=cfg.run_master_seed, permutations=cfg.ensemble_permutations)


def cmd_ensemble(run: Run) -> None:
    rep = lbm_ensemble(_ensemble_config(run.cfg), threads=run.threads)
    run.runtime_extra = rep.pop("runtime")
    run.seeds["environments"] = [e["seed"] for e in rep["per_environment"]]
    run.json("ensemble.json", rep)
    io.write_csv(run.file("msd.csv"), ["t", "msd", "count"],
                 zip(rep["clock"], rep["msd"], rep["msd_count"]))
    run.say(f"ensemble: {rep['paths']} paths, {rep['exits']} exits, "
            f"MSD at t={rep['clock'][-1]:.4g}: {rep['msd'][-1]:.4g}")
    for e, env in enumerate(rep["per_environment"]):
        run.say(f"  environment {e}: spearman={env['spearman']:.3f} p={env['p_value']:.3g}")


def _pair(run: Run, r: int) -> tuple:
    cfg = run.cfg
    coarse = _environment(run, r)
    fine = extend_stack(coarse, cfg.kernel(), cfg.model_n_levels + 1)
    return coarse, fine


def cmd_diagnostics(run: Run) -> None:
    cfg = run.cfg
    if cfg.model_gamma == 0.0:
        raise ConfigError("model.gamma: diagnostics need gamma > 0")
    gamma, R = cfg.model_gamma, cfg.diagnostics_replicas
    with ThreadPoolExecutor(max_workers=max(1, run.threads)) as pool:
        stacks = list(pool.map(lambda r: _pair(run, r), range(R)))
    run.seeds["environments"] = [c.master_seed for c, _ in stacks]
    pairs = [(build_measure(c, gamma), build_measure(f, gamma)) for c, f in stacks]
    grid = cfg.grid()
    conv = convergence_diagnostic(pairs, grid.concentric_windows(cfg.diagnostics_probe_windows))
    run.json("convergence.json", conv.to_dict())

    center = cfg.point("diagnostics.ball_center", cfg.diagnostics_ball_center)
    radii = cfg.ball_radii()
    boot_seed = derive_seed(cfg.run_master_seed, BOOT_KEY)
    run.seeds["bootstrap"] = boot_seed
    coarse = [c for c, _ in pairs]
    balls = ball_scaling_ensemble(coarse, center, radii, cfg.diagnostics_n_boot, boot_seed)
    balls["per_replica"] = [[b._asdict() for b in ball_mass_scaling(mu, center, radii)]
                            for mu in coarse]
    run.json("ball_scaling.json", balls)
    io.write_csv(run.file("ball_scaling.csv"), ["radius", "median_slope", "lower", "upper"],
                 zip(radii[1:], balls["median_slope"], balls["lower"], balls["upper"]))

    revuz_seed = derive_seed(cfg.run_master_seed, REVUZ_KEY, 0)
    run.seeds["revuz_paths"] = revuz_seed
    start = cfg.point("diagnostics.revuz_start", cfg.diagnostics_revuz_start)
    rz = revuz_check(stacks[0][0], gamma, start, cfg.diagnostics_revuz_times,
                     cfg.diagnostics_revuz_paths, cfg.diagnostics_revuz_dt, revuz_seed)
    run.json("revuz.json", rz)
    cols = ["t", "mc_mean", "se", "oracle", "dt_budget", "error"]
    io.write_csv(run.file("revuz.csv"), cols, ([row[c] for c in cols] for row in rz["rows"]))

    run.check("revuz", rz["passed"])
    run.say(f"convergence n={conv.n}->{conv.n + 1}: drift={conv.drift} over {R} replicas")
    run.say("ball slopes: " + ", ".join(f"{s:.3f}" for s in balls["median_slope"]))
    for row in rz["rows"]:
        run.say(f"revuz t={row['t']:g}: mc={row['mc_mean']:.6g} +- {row['se']:.2g} "
                f"oracle={row['oracle']:.6g} budget={row['dt_budget']:.2g} "
                f"{'ok' if row['passed'] else 'FAIL'}")


COMMANDS = {
    "kernels-check": cmd_kernels_check,
    "sample-field": cmd_sample_field,
    "build-measure": cmd_build_measure,
    "potentials": cmd_potentials,
    "simulate-lbm": cmd_simulate_lbm,
    "ensemble": cmd_ensemble,
    "diagnostics": cmd_diagnostics,
}


# ---------------------------------------------------------------------------
# driver


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override run.master_seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--gamma-zero-diagnostic", action="store_true",
                        help="run the gamma = 0 diagnostic (Lebesgue measure, F_t = t)")
    p = argparse.ArgumentParser(prog="lbm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__[4:].replace("_", "-"))
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return p


def resolve_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_values(run_master_seed=args.seed)
    if args.gamma_zero_diagnostic:
        cfg = cfg.with_values(model_gamma=0.0, model_gamma_zero_diagnostic=True)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg.validate()


def output_dir(args, cfg, command: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    if cfg.run_out:
        return Path(cfg.run_out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "lbm-output")) / command


def _config_dict(cfg) -> dict:
    out: dict = {}
    for section, key, *_ in cfgmod.SCHEMA:
        out.setdefault(section, {})[key] = cfg.values[f"{section}_{key}"]
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run: Run, code: int, error: str | None, wall: float, started: str) -> None:
    manifest = {
        "subcommand": run.subcommand,
        "status": code,
        "checks": run.checks,
        "error": error,
        "config": _config_dict(run.cfg),
        "seeds": {"master": run.cfg.run_master_seed, **run.seeds},
        "artifacts": {name: _sha256(run.out / name) for name in sorted(run.artifacts)},
        "versions": {"lbm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        # excluded from the determinism contract
        "runtime": {"started_utc": started, "wall_time_s": wall, "threads": run.threads,
                    **run.runtime_extra},
    }
    io.write_json(run.out / "manifest.json", manifest)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"lbm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(cfgmod.dumps(cfg))
        return EXIT_OK

    out = output_dir(args, cfg, args.command)
    cfg = cfg.with_values(run_out=str(out))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    run = Run(args.command, cfg, out, args.threads)
    run.artifacts.append("config.ini")
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    error, code = None, None
    try:
        COMMANDS[args.command](run)
    except ConfigError as exc:
        error, code = f"config error: {exc}", EXIT_CONFIG
    except (ConvergenceError, EmbeddingError) as exc:
        error, code = f"numerical check failed: {type(exc).__name__}: {exc}", EXIT_CHECK
    except (LBMError, ValueError, ArithmeticError) as exc:
        error, code = f"{type(exc).__name__}: {exc}", EXIT_RUNTIME
    if code is None:
        code = run.status
    write_manifest(run, code, error, time.perf_counter() - t0, started)
    if error:
        print(f"lbm {args.command}: {error}", file=sys.stderr)
    failed = [k for k, ok in run.checks.items() if not ok]
    if failed:
        print(f"lbm {args.command}: failed checks: {', '.join(failed)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
