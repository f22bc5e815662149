"""Planar Brownian motion, the additive functional of the regularized
Liouville measure along it, its inverse, and the time-changed path.

Everything here is quenched: a :class:`~lbm.gmc.FieldStack` is one frozen
realization of the environment and paths are sampled given it.

The Brownian motion has generator ``Delta / 2``, so increments over a step
``dt`` are ``N(0, dt I)`` and ``E|B_t - B_0|^2 = 2t``.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, stats

from .errors import ConfigError, HorizonError, WindowExitError
from .gmc import (FieldStack, GridSpec, accumulate, build_measure, build_stack, check_gamma,
                  derive_seed)
from .kernels import CutoffSequence, KernelConfig


@dataclass(frozen=True)
class BrownianPath:
    """Sampled path (or batch of paths, leading axis) on a uniform time grid."""

    start: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    dt: float
    seed: int | None = None

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def segment(self, i: int, j: int) -> "BrownianPath":
        """Sub-path over grid indices ``i..j`` (inclusive), absolute times kept."""
        pos = self.positions[..., i:j + 1, :]
        return BrownianPath(pos[..., 0, :], self.times[i:j + 1], pos, self.dt, self.seed)


def simulate_bm(start, horizon: float, dt: float, seed: int,
                n_paths: int | None = None) -> BrownianPath:
    """Exact Gaussian-increment simulation on ``0, dt, ..., K dt = horizon``.

    ``dt`` is adjusted to ``horizon / round(horizon / dt)``.  With
    ``n_paths`` the positions have shape ``(n_paths, K + 1, 2)`` and
    ``start`` may be one point or one point per path.
    """
    horizon, dt = float(horizon), float(dt)
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if not (0 < dt <= horizon):
        raise ValueError(f"dt must lie in (0, horizon], got dt={dt!r} horizon={horizon!r}")
    K = max(1, int(round(horizon / dt)))
    dt = horizon / K
    times = dt * np.arange(K + 1)
    rng = np.random.default_rng(seed)
    lead = () if n_paths is None else (int(n_paths),)
    start = np.broadcast_to(np.asarray(start, dtype=float), lead + (2,))
    inc = math.sqrt(dt) * rng.standard_normal(lead + (K, 2))
    pos = np.empty(lead + (K + 1, 2))
    pos[..., 0, :] = start
    np.cumsum(inc, axis=-2, out=pos[..., 1:, :])
    pos[..., 1:, :] += start[..., None, :]
    return BrownianPath(np.array(start), times, pos, dt, seed)


# ---------------------------------------------------------------------------
# field along paths


def interpolation_hull(grid: GridSpec) -> tuple:
    """``(lo, hi)`` per axis: the square spanned by the outermost cell centers."""
    lo = np.asarray(grid.origin) + 0.5 * grid.h
    hi = np.asarray(grid.origin) + grid.side - 0.5 * grid.h
    return lo, hi


def first_exit(grid: GridSpec, positions: np.ndarray) -> np.ndarray:
    """Index of the first sample outside the hull along the time axis, or -1."""
    lo, hi = interpolation_hull(grid)
    out = np.any((positions < lo) | (positions > hi), axis=-1)
    idx = np.where(out.any(axis=-1), out.argmax(axis=-1), -1)
    return idx


def bilinear(grid: GridSpec, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of cell-center ``values`` at ``points`` (inside the hull)."""
    N, h = grid.cells_per_side, grid.h
    u = (points[..., 0] - grid.origin[0]) / h - 0.5
    v = (points[..., 1] - grid.origin[1]) / h - 0.5
    i = np.clip(np.floor(u).astype(np.intp), 0, N - 2)
    j = np.clip(np.floor(v).astype(np.intp), 0, N - 2)
    a, b = u - i, v - j
    return ((1 - a) * (1 - b) * values[i, j] + a * (1 - b) * values[i + 1, j]
            + (1 - a) * b * values[i, j + 1] + a * b * values[i + 1, j + 1])


def path_density(path_positions: np.ndarray, stack: FieldStack, gamma: float) -> np.ndarray:
    x = bilinear(stack.grid, stack.accumulated, path_positions)
    return np.exp(gamma * x - 0.5 * gamma * gamma * stack.variance)


@dataclass(frozen=True)
class AdditiveFunctional:
    path: BrownianPath
    values: np.ndarray
    density_trace: np.ndarray
    gamma: float

    @property
    def final(self):
        return self.values[..., -1]


def pcaf_integrate(path: BrownianPath, stack: FieldStack, gamma: float,
                   gamma_zero_diagnostic: bool = False) -> AdditiveFunctional:
    """``F_t = int_0^t exp(gamma X_n(B_s) - gamma^2/2 Var) ds`` by the trapezoid rule.

    The field along the path is the bilinear interpolant of the grid field.

    Raises
    ------
    WindowExitError
        If any path sample leaves the interpolation hull of the grid.
    """
    gamma = check_gamma(gamma, gamma_zero_diagnostic)
    exit_idx = first_exit(stack.grid, path.positions)
    if np.any(exit_idx >= 0):
        flat = np.atleast_1d(exit_idx)
        p = int(np.flatnonzero(flat >= 0)[0])
        t_exit = float(path.times[flat[p]])
        raise WindowExitError(
            f"path {p} leaves the field window at t={t_exit:.6g}; enlarge the window "
            "or stop the functional at the exit time",
            exit_time=t_exit, path_index=p if exit_idx.ndim else None)
    f = path_density(path.positions, stack, gamma)
    return AdditiveFunctional(path, _trapezoid(f, path.dt), f, gamma)


def _trapezoid(f: np.ndarray, dt: float) -> np.ndarray:
    half = 0.5 * (f[..., 1:] + f[..., :-1])
    out = np.zeros(f.shape)
    np.cumsum(half, axis=-1, out=out[..., 1:])
    # multiply once at the end so unit density reproduces k * dt bitwise
    return dt * out


# ---------------------------------------------------------------------------
# inverse and time change


def _locate(F: np.ndarray, t: np.ndarray):
    """Interval index and fraction of each clock time on the interpolant of ``F``."""
    K = F.size - 1
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise HorizonError("clock times must be nonnegative")
    if np.any(t > F[-1]):
        raise HorizonError(f"clock time {float(t.max()):.6g} exceeds F_T = {F[-1]:.6g}; "
                           "the base path is too short")
    idx = np.clip(np.searchsorted(F, t, side="right") - 1, 0, K - 1)
    frac = (t - F[idx]) / (F[idx + 1] - F[idx])
    return idx, frac, t == F[-1]


def invert_pcaf(F: AdditiveFunctional, new_clock) -> np.ndarray:
    """``F^{-1}(t) = inf{s : F_s > t}`` on the piecewise-linear interpolant of ``F``.

    The endpoint ``t = F_T`` maps to ``T`` by continuity.
    """
    values = np.asarray(F.values)
    if values.ndim != 1:
        raise ValueError("invert one path at a time")
    times = F.path.times
    idx, frac, last = _locate(values, new_clock)
    s = times[idx] + frac * (times[idx + 1] - times[idx])
    return np.where(last, times[-1], s)


def evaluate_pcaf(F: AdditiveFunctional, s) -> np.ndarray:
    """Piecewise-linear interpolant of ``F`` at base times ``s``."""
    return np.interp(s, F.path.times, F.values)


@dataclass(frozen=True)
class TimeChangedPath:
    lbm_times: np.ndarray
    lbm_positions: np.ndarray
    inverse_trace: np.ndarray


def lbm_path(path: BrownianPath, F: AdditiveFunctional, new_clock) -> TimeChangedPath:
    """Liouville Brownian motion ``B_{F^{-1}(t)}`` on ``new_clock``."""
    if path.positions.ndim != 2:
        raise ValueError("lbm_path works on a single path")
    clock = np.asarray(new_clock, dtype=float)
    idx, frac, last = _locate(np.asarray(F.values), clock)
    times, pos = path.times, path.positions
    s = np.where(last, times[-1], times[idx] + frac * (times[idx + 1] - times[idx]))
    b = pos[idx] + frac[:, None] * (pos[idx + 1] - pos[idx])
    b = np.where(last[:, None], pos[-1], b)
    return TimeChangedPath(clock, b, s)


def pcaf_levels(path: BrownianPath, stack: FieldStack, gamma: float) -> dict:
    """``F^(k)`` along one path for the nested fields ``X_1, ..., X_n`` of ``stack``.

    Level ``k`` reuses the first ``k`` bands, so the levels are coupled as in
    the construction.  The sup-distance between consecutive levels is
    reported as a Cauchy diagnostic in ``n``; no limit tolerance is implied.
    """
    if path.positions.ndim != 2:
        raise ValueError("pcaf_levels works on a single path")
    prefix = FieldStack.empty(stack.grid, stack.cuts, stack.master_seed)
    prev = None
    rows = []
    for k, band in enumerate(stack.bands, start=1):
        prefix = accumulate(prefix, band, stack.seeds[k - 1] if stack.seeds else None)
        F = pcaf_integrate(path, prefix, gamma).values
        step = math.nan if prev is None else float(np.max(np.abs(F - prev)))
        rows.append({"n": k, "F_T": float(F[-1]), "sup_diff_prev": step})
        prev = F
    return {"gamma": gamma, "levels": rows}


def uniform_clock(step: float, stop: float) -> np.ndarray:
    """``0, step, 2 step, ...`` up to and including ``stop`` when it is a multiple."""
    k = int(math.floor(stop / step + 1e-9))
    clock = step * np.arange(k + 1)
    return clock[clock <= stop]


# ---------------------------------------------------------------------------
# Revuz diagnostic


def _gauss_axis(breaks: np.ndarray, x: float, sigma: float, order: int):
    nodes, weights = leggauss(order)
    a, b = breaks[:-1, None], breaks[1:, None]
    pts = 0.5 * (b - a) * nodes + 0.5 * (a + b)
    w = 0.5 * (b - a) * weights
    pts, w = pts.ravel(), w.ravel()
    phi = np.exp(-0.5 * ((pts - x) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    return pts, w * phi


def heat_semigroup(stack: FieldStack, gamma: float, x, s: float, order: int = 8,
                   width: float = 6.0) -> float:
    """``E f(x + sqrt(s) Z)`` for the bilinear-interpolated chaos density ``f``.

    Deterministic tensor Gauss-Legendre quadrature on pieces delimited by
    the interpolation lattice and by ``x +- k sqrt(s)``, so the integrand
    is smooth on every piece.  The Gaussian is truncated at ``width``
    standard deviations and must stay inside the interpolation hull.
    """
    f0 = lambda pts: path_density(pts, stack, gamma)  # noqa: E731
    x = np.asarray(x, dtype=float)
    if s <= 0:
        return float(f0(x))
    grid = stack.grid
    sigma = math.sqrt(s)
    lo, hi = interpolation_hull(grid)
    axes = []
    for d in range(2):
        a, b = x[d] - width * sigma, x[d] + width * sigma
        if a < lo[d] or b > hi[d]:
            raise ValueError("heat kernel support leaves the field window")
        lattice = grid.axis_centers(d)
        brk = np.concatenate([[a, b], lattice[(lattice > a) & (lattice < b)],
                              x[d] + sigma * np.arange(-width + 1, width)])
        axes.append(_gauss_axis(np.unique(brk), x[d], sigma, order))
    (u, wu), (v, wv) = axes
    N, h = grid.cells_per_side, grid.h
    # bilinear interpolation on a tensor grid factorizes: A X B^T
    def weights(coord, origin):
        t = (coord - origin) / h - 0.5
        i = np.clip(np.floor(t).astype(np.intp), 0, N - 2)
        frac = t - i
        W = np.zeros((coord.size, N))
        W[np.arange(coord.size), i] = 1 - frac
        W[np.arange(coord.size), i + 1] += frac
        return W
    A, B = weights(u, grid.origin[0]), weights(v, grid.origin[1])
    xi = A @ stack.accumulated @ B.T
    f = np.exp(gamma * xi - 0.5 * gamma * gamma * stack.variance)
    return float(wu @ f @ wv)


def expected_pcaf_oracle(stack: FieldStack, gamma: float, x, t: float,
                         rel_tol: float = 1e-9) -> float:
    """``int_0^t int p_s(x, y) f(y) dy ds`` with the heat-kernel quadrature."""
    return integrate.quad(lambda s: heat_semigroup(stack, gamma, x, s), 0.0, t,
                          epsabs=0.0, epsrel=rel_tol, limit=200)[0]


def expected_pcaf_discrete(stack: FieldStack, gamma: float, x, times: np.ndarray) -> float:
    """Expectation of the trapezoid functional on ``times``: exact in distribution."""
    g = np.array([heat_semigroup(stack, gamma, x, float(s)) for s in times])
    return float(np.sum(0.5 * (g[1:] + g[:-1]) * np.diff(times)))


def revuz_check(stack: FieldStack, gamma: float, start, t_values, n_paths: int,
                dt: float, seed: int) -> dict:
    """Monte Carlo ``E_x F_t`` against the heat-kernel quadrature oracle.

    The dt budget at each ``t`` is the exact gap between the expected
    trapezoid functional and the continuous integral.  A time passes when
    ``|mc - oracle| <= 3 se + budget``.
    """
    t_values = sorted(float(t) for t in t_values)
    path = simulate_bm(start, t_values[-1], dt, seed, n_paths=n_paths)
    F = pcaf_integrate(path, stack, gamma)
    rows = []
    for t in t_values:
        k = int(round(t / path.dt))
        if not math.isclose(path.times[k], t, rel_tol=1e-9):
            raise ValueError(f"t={t} is not on the path time grid (dt={path.dt})")
        sample = F.values[:, k]
        mc = float(sample.mean())
        se = float(sample.std(ddof=1) / math.sqrt(sample.size))
        oracle = expected_pcaf_oracle(stack, gamma, start, t)
        discrete = expected_pcaf_discrete(stack, gamma, start, path.times[:k + 1])
        budget = abs(discrete - oracle)
        rows.append({"t": t, "mc_mean": mc, "se": se, "oracle": oracle,
                     "discrete_oracle": discrete, "dt_budget": budget,
                     "error": abs(mc - oracle), "passed": abs(mc - oracle) <= 3 * se + budget})
    return {"gamma": gamma, "n": stack.n, "start": [float(v) for v in start],
            "paths": int(n_paths), "dt": path.dt, "rows": rows,
            "passed": all(r["passed"] for r in rows)}


# ---------------------------------------------------------------------------
# ensemble harness


@dataclass(frozen=True)
class EnsembleConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(side=4.0, cells_per_side=64,
                                                            padding_factor=4))
    kernel: KernelConfig = field(default_factory=KernelConfig)
    cuts: CutoffSequence = field(default_factory=CutoffSequence.geometric)
    n: int = 4
    gamma: float = 0.5
    gamma_zero_diagnostic: bool = False
    environments: int = 2
    paths_per_env: int = 64
    start: tuple | None = None  # None: uniform over the interpolation hull
    horizon: float = 1.0
    dt: float | None = None  # None: (cell width)^2 / 4
    clock_step: float = 0.01
    clock_horizon: float = 0.5
    occupation_bins: int = 8
    on_exit: str = "error"
    master_seed: int = 0
    permutations: int = 999

    def validate(self) -> None:
        check_gamma(self.gamma, self.gamma_zero_diagnostic)
        if self.n > 0:
            self.cuts.check_band(self.n)
        if self.environments < 1 or self.paths_per_env < 1:
            raise ConfigError("environments and paths_per_env must be >= 1")
        if self.on_exit not in ("error", "stop"):
            raise ConfigError("on_exit must be 'error' or 'stop'")
        if not (self.clock_step > 0 and self.clock_horizon >= self.clock_step):
            raise ConfigError("need 0 < clock_step <= clock_horizon")
        if self.grid.cells_per_side % self.occupation_bins:
            raise ConfigError("occupation_bins must divide cells_per_side")
        if self.start is not None:
            lo, hi = interpolation_hull(self.grid)
            if np.any(np.asarray(self.start) < lo) or np.any(np.asarray(self.start) > hi):
                raise ConfigError("start lies outside the field window")
        if self.horizon <= 0 or (self.dt is not None and not 0 < self.dt <= self.horizon):
            raise ConfigError("need horizon > 0 and 0 < dt <= horizon")

    @property
    def step(self) -> float:
        return self.grid.h ** 2 / 4 if self.dt is None else self.dt


def _bin_sum(a: np.ndarray, bins: int) -> np.ndarray:
    N = a.shape[0]
    k = N // bins
    return a.reshape(bins, k, bins, k).sum(axis=(1, 3))


def _environment(cfg: EnsembleConfig, e: int) -> dict:
    grid = cfg.grid
    env_seed = derive_seed(cfg.master_seed, 0, e)
    if cfg.gamma == 0.0:
        stack = FieldStack.empty(grid, cfg.cuts, env_seed)
    else:
        stack = build_stack(grid, cfg.n, cfg.cuts, cfg.kernel, env_seed)
    P = cfg.paths_per_env
    if cfg.start is None:
        lo, hi = interpolation_hull(grid)
        rng = np.random.default_rng(derive_seed(cfg.master_seed, 2, e))
        starts = lo + (hi - lo) * rng.random((P, 2))
    else:
        starts = np.asarray(cfg.start, dtype=float)
    paths = simulate_bm(starts, cfg.horizon, cfg.step, derive_seed(cfg.master_seed, 1, e),
                        n_paths=P)
    clock = uniform_clock(cfg.clock_step, cfg.clock_horizon)
    msd = np.zeros(clock.size)
    count = np.zeros(clock.size)
    occ = np.zeros((cfg.occupation_bins,) * 2)
    exits = 0
    short = 0
    exit_idx = first_exit(grid, paths.positions)
    lo = np.asarray(grid.origin)
    for p in range(P):
        k_exit = int(exit_idx[p])
        stop = paths.steps if k_exit < 0 else k_exit - 1
        if k_exit >= 0:
            if cfg.on_exit == "error":
                raise WindowExitError(f"environment {e}, path {p} leaves the window",
                                      exit_time=float(paths.times[k_exit]), path_index=p)
            exits += 1
        if stop < 1:
            continue
        one = BrownianPath(paths.start[p], paths.times[:stop + 1],
                           paths.positions[p, :stop + 1], paths.dt, paths.seed)
        F = pcaf_integrate(one, stack, cfg.gamma, cfg.gamma_zero_diagnostic)
        usable = clock[clock <= F.values[-1]]
        if usable.size < clock.size:
            short += 1
        tc = lbm_path(one, F, usable)
        disp = tc.lbm_positions - tc.lbm_positions[0]
        msd[:usable.size] += (disp ** 2).sum(axis=1)
        count[:usable.size] += 1
        cells = np.floor((tc.lbm_positions - lo) / (grid.side / cfg.occupation_bins))
        cells = np.clip(cells.astype(np.intp), 0, cfg.occupation_bins - 1)
        np.add.at(occ, (cells[:, 0], cells[:, 1]), cfg.clock_step)
    measure = build_measure(stack, cfg.gamma, cfg.gamma_zero_diagnostic)
    return {"msd_sum": msd, "msd_count": count, "occupation": occ,
            "mass_bins": _bin_sum(np.asarray(measure.cell_mass), cfg.occupation_bins),
            "exits": exits, "short_paths": short, "seed": env_seed}


def _rank_test(occ: np.ndarray, mass: np.ndarray, permutations: int, seed: int) -> dict:
    a, b = occ.ravel(), mass.ravel()
    if np.all(a == a[0]) or np.all(b == b[0]):
        return {"spearman": math.nan, "p_value": math.nan}
    rho = float(stats.spearmanr(a, b).statistic)
    rng = np.random.default_rng(seed)
    rb = stats.rankdata(b)
    ra = stats.rankdata(a)
    null = np.array([np.corrcoef(ra, rng.permutation(rb))[0, 1] for _ in range(permutations)])
    p = float((1 + np.sum(null >= rho)) / (permutations + 1))
    return {"spearman": rho, "p_value": p}


def lbm_ensemble(cfg: EnsembleConfig, threads: int = 1) -> dict:
    """Run environments x paths and reduce in environment order.

    Returns the aggregate report (deterministic given ``cfg``) and, under
    ``"runtime"``, wall-clock metrics that are not.
    """
    cfg.validate()
    t0 = time.perf_counter()
    envs = range(cfg.environments)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda e: _environment(cfg, e), envs))
    else:
        results = [_environment(cfg, e) for e in envs]
    wall = time.perf_counter() - t0
    msd_sum = np.sum([r["msd_sum"] for r in results], axis=0)
    msd_count = np.sum([r["msd_count"] for r in results], axis=0)
    clock = uniform_clock(cfg.clock_step, cfg.clock_horizon)
    with np.errstate(invalid="ignore", divide="ignore"):
        msd = np.where(msd_count > 0, msd_sum / msd_count, math.nan)
    occupation = np.sum([r["occupation"] for r in results], axis=0)
    tests = [_rank_test(r["occupation"], r["mass_bins"], cfg.permutations,
                        derive_seed(cfg.master_seed, 3, e)) for e, r in enumerate(results)]
    total_paths = cfg.environments * cfg.paths_per_env
    return {
        "clock": clock.tolist(),
        "msd": msd.tolist(),
        "msd_count": msd_count.astype(int).tolist(),
        "occupation": occupation.tolist(),
        "per_environment": [
            {"seed": r["seed"], "exits": r["exits"], "short_paths": r["short_paths"],
             "occupation": r["occupation"].tolist(), "mass_bins": r["mass_bins"].tolist(),
             **t} for r, t in zip(results, tests)],
        "exits": int(sum(r["exits"] for r in results)),
        "paths": total_paths,
        "runtime": {"wall_time_s": wall, "paths_per_s": total_paths / wall if wall else math.inf,
                    "threads": threads},
    }
