"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every test prints one ``[PASS|FAIL] criterion N`` line, collected again in the
terminal summary.  Seeds are fixed once below and are never retuned.
"""
import filecmp
import json
import math
import shutil
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import record_acceptance
from lbm.cli import main
from lbm.gmc import (FieldStack, GridSpec, accumulate, build_measure, build_stack, derive_seed,
                     embedding_error, lebesgue_measure, sample_band)
from lbm.kernels import band_covariance, band_tail_bound, massive_green, oracle_gate
from lbm.pcaf import (evaluate_pcaf, invert_pcaf, lbm_path, pcaf_integrate, revuz_check,
                      simulate_bm)
from lbm.potential import (bound_envelope, certify_bound, domination_slack, finite_energy,
                           log_potential, resolvent_potential)
from test_potential import oracle_energy_unit_square

SEED = 20240601
EMBED_TOL = 1e-6
PADDINGS = (4, 8, 16)


def replica_bands(side, cells, n, replicas, cuts, kcfg, seed):
    """``(replicas, N, N)`` samples of each band ``1..n``.

    Each band is drawn on the smallest torus whose embedding passes the
    sampler's own check; the window cells are the same for every padding.
    """
    out = []
    for k in range(1, n + 1):
        for pad in PADDINGS:
            grid = GridSpec(side=side, cells_per_side=cells, padding_factor=pad)
            if embedding_error(grid, k, cuts, kcfg) <= EMBED_TOL * cuts.band_variance(k):
                break
        out.append(sample_band(grid, k, cuts, kcfg, derive_seed(seed, k), size=replicas))
    return out


def stack_from(grid, cuts, bands, r):
    stack = FieldStack.empty(grid, cuts)
    for b in bands:
        stack = accumulate(stack, b[r])
    return stack


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ---------------------------------------------------------------------------


def test_criterion_01_kernel_oracle_gate(kcfg):
    with Clock() as c:
        rep = oracle_gate(kcfg)
    worst = max(rep.max_errors.values())
    ok = rep.passed and len(rep.radii) == 200 and rep.tol <= 1e-8 and c.elapsed < 10
    record_acceptance(1, "kernel oracle gate", ok,
                      f"max rel err {worst:.2e} over {len(rep.radii)} radii, {c.elapsed:.1f} s")
    assert rep.radii.min() == pytest.approx(1e-3) and rep.radii.max() == pytest.approx(10)
    assert ok


def test_criterion_02_band_partition(cuts, kcfg):
    r = np.array([0.01, 0.1, 1.0])
    with Clock() as c:
        parts = np.cumsum([band_covariance(r, k, cuts, kcfg) for k in range(1, 9)], axis=0)
        G = massive_green(r, kcfg)
        tail = band_tail_bound(r, 8, cuts, kcfg)
    monotone = bool(np.all(np.diff(parts, axis=0) >= 0))
    bounded = bool(np.all(parts <= G))
    gap = G - parts[-1]
    within = bool(np.all(gap <= tail))
    ok = monotone and bounded and within and c.elapsed < 10
    record_acceptance(2, "band partition", ok,
                      f"gap at N=8 {np.array2string(gap, precision=3)} <= tail "
                      f"{np.array2string(tail, precision=3)}, {c.elapsed:.2f} s")
    assert ok


def test_criterion_03_variance_ladder(small_grid, cuts, kcfg):
    R = 10_000
    lags = [(1, 0), (0, 1), (1, 1), (2, 0), (1, 2), (3, 0), (2, 3), (4, 1), (0, 5), (5, 5)]
    worst_var, worst_cov = 0.0, 0.0
    with Clock() as c:
        for n in range(1, 7):
            Y = sample_band(small_grid, n, cuts, kcfg, derive_seed(SEED, 3, n), size=R)
            y0 = Y[:, 0, 0]
            v = y0.var(ddof=1)
            se = v * math.sqrt(2 / (R - 1))
            worst_var = max(worst_var, abs(v - 1.0) / se)
            for dx, dy in lags:
                prod = y0 * Y[:, dx, dy]
                target = float(band_covariance(small_grid.h * math.hypot(dx, dy), n, cuts, kcfg))
                z = abs(prod.mean() - target) / (prod.std(ddof=1) / math.sqrt(R))
                worst_cov = max(worst_cov, z)
    ok = worst_var <= 3 and worst_cov <= 3 and c.elapsed < 120
    record_acceptance(3, "variance ladder", ok,
                      f"worst |Var-1|/se {worst_var:.2f}, worst covariance z {worst_cov:.2f} "
                      f"(6 bands x 10 lags), {c.elapsed:.1f} s")
    assert ok


def test_criterion_04_chaos_mean(cuts, kcfg):
    R, n, N = 200, 6, 64
    with Clock() as c:
        X = sum(replica_bands(1.0, N, n, R, cuts, kcfg, derive_seed(SEED, 4)))
        var = cuts.total_variance(n)
        rows = []
        for g in (0.5, 1.0, 1.5):
            M = np.exp(g * X - 0.5 * g * g * var).sum(axis=(1, 2)) / N ** 2
            se = M.std(ddof=1) / math.sqrt(R)
            rows.append((g, M.mean(), se, abs(M.mean() - 1) <= 3 * se))
    ok = all(r[3] for r in rows) and c.elapsed < 300
    detail = "; ".join(f"gamma {g}: {m:.4f} +- {s:.4f}" for g, m, s, _ in rows)
    record_acceptance(4, "chaos mean identity", ok, f"{detail}, {c.elapsed:.1f} s")
    assert ok


def test_criterion_05_chaos_second_moment(cuts, kcfg):
    g, n, N, R = 0.5, 3, 32, 8000
    a = 0.25  # the small square [0, a]^2; 16 disjoint copies tile the unit window
    with Clock() as c:
        def f(r):
            return math.exp(g * g * sum(float(band_covariance(r, k, cuts, kcfg))
                                        for k in range(1, n + 1)))
        # difference of two uniform points in the square has density (a-|u|)(a-|v|)
        oracle = 4 * integrate.dblquad(lambda v, u: f(math.hypot(u, v)) * (a - u) * (a - v),
                                       0, a, 0, a, epsabs=0, epsrel=1e-9)[0]
        X = sum(replica_bands(1.0, N, n, R, cuts, kcfg, derive_seed(SEED, 5)))
        dens = np.exp(g * X - 0.5 * g * g * cuts.total_variance(n)) / N ** 2
        k = int(a * N)
        M = dens.reshape(R, N // k, k, N // k, k).sum(axis=(2, 4))
        # stationarity: every copy has the same second moment
        est = (M ** 2).mean(axis=(1, 2))
        mc, se = est.mean(), est.std(ddof=1) / math.sqrt(R)
    rel = abs(mc / oracle - 1)
    ok = rel <= 0.05 and c.elapsed < 300
    record_acceptance(5, "chaos second moment", ok,
                      f"MC {mc:.6f} (se {se / mc:.1%}) vs oracle {oracle:.6f}, rel {rel:.2%}, "
                      f"{c.elapsed:.1f} s")
    assert ok


def test_criterion_06_potential_domination(cuts, kcfg):
    R, n, N, g = 20, 6, 128, 0.5
    grid = GridSpec(side=1.0, cells_per_side=N, padding_factor=16)
    violations, worst = 0, math.inf
    with Clock() as c:
        bands = replica_bands(1.0, N, n, R, cuts, kcfg, derive_seed(SEED, 6))
        bound = certify_bound(grid)
        windows = [None, grid.box_mask((0.25, 0.25), (0.75, 0.75))]
        for r in range(R):
            mu = build_measure(stack_from(grid, cuts, bands, r), g)
            lp = log_potential(mu)
            for w in windows:
                env = bound_envelope(mu, w, bound.c1, bound.c2, log_field=lp)
                slack = domination_slack(resolvent_potential(mu, w), env)
                violations += int(np.sum(slack < 0))
                worst = min(worst, float(slack.min()))
    ok = bound.verified and violations == 0 and c.elapsed < 300
    record_acceptance(6, "potential domination", ok,
                      f"{violations} violations over {R} replicas x 2 windows x {N}^2 cells, "
                      f"min slack {worst:.3g}, c1 {bound.c1:.4f} c2 {bound.c2:.4f}, "
                      f"{c.elapsed:.1f} s")
    assert ok


def test_criterion_07_finite_energy(cuts, kcfg):
    R, n, N, g = 100, 6, 64, 0.5
    grid = GridSpec(side=1.0, cells_per_side=N, padding_factor=16)
    with Clock() as c:
        bands = replica_bands(1.0, N, n, R, cuts, kcfg, derive_seed(SEED, 7))
        energies = np.array([finite_energy(build_measure(stack_from(grid, cuts, bands, r), g),
                                           None).double_integral for r in range(R)])
        finite = int(np.sum(np.isfinite(energies) & (energies > 0)))
        e0 = finite_energy(lebesgue_measure(grid), None).double_integral
        ref = oracle_energy_unit_square()
    rel = abs(e0 / ref - 1)
    ok = finite == R and rel <= 0.01 and c.elapsed < 300
    record_acceptance(7, "finite energy", ok,
                      f"{finite}/{R} finite (max {energies.max():.3g}); gamma 0: {e0:.6f} vs "
                      f"oracle {ref:.6f}, rel {rel:.1e}, {c.elapsed:.1f} s")
    assert ok


def test_criterion_08_time_change_algebra(wide_grid, cuts, kcfg):
    with Clock() as c:
        stack = build_stack(wide_grid, 4, cuts, kcfg, derive_seed(SEED, 8))
        worst = 0.0
        for p in range(20):
            path = simulate_bm((2.0, 2.0), 0.05, wide_grid.h ** 2 / 4, derive_seed(SEED, 8, p))
            F = pcaf_integrate(path, stack, 0.5)
            t = np.linspace(0, F.final, 501)[1:]
            s = path.times[1:]
            e1 = np.abs(evaluate_pcaf(F, invert_pcaf(F, t)) - t) / t
            e2 = np.abs(invert_pcaf(F, evaluate_pcaf(F, s)) - s) / s
            worst = max(worst, float(e1.max()), float(e2.max()))
        path = simulate_bm((2.0, 2.0), 0.05, wide_grid.h ** 2 / 4, derive_seed(SEED, 8, 99))
        F0 = pcaf_integrate(path, FieldStack.empty(wide_grid, cuts), 0.0,
                            gamma_zero_diagnostic=True)
        exact = (np.array_equal(F0.values, path.times)
                 and np.array_equal(lbm_path(path, F0, path.times).lbm_positions, path.positions))
    ok = worst <= 1e-12 and exact and c.elapsed < 30
    record_acceptance(8, "time-change algebra", ok,
                      f"worst relative identity error {worst:.1e} over 20 paths; "
                      f"gamma 0 collapse bitwise {exact}, {c.elapsed:.1f} s")
    assert ok


def test_criterion_09_revuz(cuts, kcfg):
    grid = GridSpec(side=4.0, cells_per_side=128, padding_factor=4)
    dt = 2.5e-4  # (cell width)^2 / 4 rounded so that every t is on the time grid
    with Clock() as c:
        stack = build_stack(grid, 4, cuts, kcfg, derive_seed(SEED, 9))
        rep = revuz_check(stack, 0.5, (2.03, 1.97), [0.01, 0.05, 0.1], 10_000, dt,
                          derive_seed(SEED, 9, 1))
    ok = rep["passed"] and c.elapsed < 300
    detail = "; ".join(f"t {r['t']}: |mc-oracle| {r['error']:.2e} <= 3se {3 * r['se']:.2e} + "
                       f"budget {r['dt_budget']:.1e}" for r in rep["rows"])
    record_acceptance(9, "Revuz diagnostic", ok, f"{detail}, {c.elapsed:.1f} s")
    assert ok


CLI_CONFIG = """\
[model]
n_levels = 3

[grid]
cells = 32
padding = 16

[ensemble]
paths_per_env = 8
permutations = 99

[diagnostics]
replicas = 4
n_boot = 200
revuz_paths = 500
"""

SUBCOMMANDS = ["kernels-check", "sample-field", "build-measure", "potentials", "simulate-lbm",
               "ensemble", "diagnostics"]


def _strip_runtime(path):
    m = json.loads(path.read_text())
    m.pop("runtime")
    return m


def test_criterion_10_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.ini"
    cfg.write_text(CLI_CONFIG)
    mismatched = []
    with Clock() as c:
        for cmd in SUBCOMMANDS:
            out = tmp_path / cmd
            first = tmp_path / f"{cmd}-first"
            for k, threads in enumerate(("1", "1", "3")):
                code = main([cmd, "--config", str(cfg), "--out", str(out), "--threads", threads])
                assert code == 0, cmd
                if k == 0:
                    shutil.copytree(out, first)
                    continue
                files = sorted(p.name for p in first.iterdir())
                assert files == sorted(p.name for p in out.iterdir())
                data = [f for f in files if f != "manifest.json"]
                _, bad, err = filecmp.cmpfiles(first, out, data, shallow=False)
                if bad or err or (_strip_runtime(first / "manifest.json")
                                  != _strip_runtime(out / "manifest.json")):
                    mismatched.append(f"{cmd} (threads {threads}): {bad + err or 'manifest'}")
    ok = not mismatched and c.elapsed < 60
    record_acceptance(10, "CLI determinism", ok,
                      f"{len(SUBCOMMANDS)} subcommands x (rerun, --threads 3): "
                      f"{'identical' if not mismatched else mismatched}, {c.elapsed:.1f} s")
    assert ok
