"""Band fields, the regularized field and the regularized chaos measure.

Each band ``Y_n`` is a stationary centered Gaussian field with covariance
:func:`lbm.kernels.band_covariance`, sampled at cell centers of a square
window by circulant embedding on a padded torus.  Band seeds are pure
functions of ``(master seed, band index)`` so a stack at level ``n + 1``
extends the stack at level ``n`` without resampling.

Arrays are indexed ``[i, j]`` with ``i`` along ``x`` and ``j`` along ``y``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy import fft as sfft

from . import kernels
from .errors import EmbeddingError, NestingError, ResolutionError
from .kernels import CutoffSequence, KernelConfig

_CHUNK_ELEMENTS = 1 << 22


def derive_seed(master: int, *key: int) -> int:
    """64-bit stream seed derived from ``master`` and an integer key path."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridSpec:
    """Square window ``[x0, x0 + side] x [y0, y0 + side]`` split into cells."""

    origin: tuple = (0.0, 0.0)
    side: float = 1.0
    cells_per_side: int = 64
    padding_factor: int = 16

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 2:
            raise ValueError("origin must be a planar point")
        if not (self.side > 0 and math.isfinite(self.side)):
            raise ValueError(f"side must be positive, got {self.side!r}")
        n = int(self.cells_per_side)
        if n < 2 or n & (n - 1):
            raise ValueError(f"cells_per_side must be a power of two >= 2, got {n}")
        if int(self.padding_factor) < 2:
            raise ValueError("padding_factor must be an integer >= 2")

    @property
    def h(self) -> float:
        return self.side / self.cells_per_side

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @property
    def shape(self) -> tuple:
        return (self.cells_per_side, self.cells_per_side)

    @property
    def torus_cells(self) -> int:
        return self.cells_per_side * self.padding_factor

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.cells_per_side) + 0.5) * self.h

    def centers(self) -> tuple:
        """Cell-center coordinate arrays ``(X, Y)`` of shape ``grid.shape``."""
        return np.meshgrid(self.axis_centers(0), self.axis_centers(1), indexing="ij")

    def box_mask(self, lower, upper) -> np.ndarray:
        """Cells whose centers lie in the closed box ``[lower, upper]``."""
        X, Y = self.centers()
        return ((X >= lower[0]) & (X <= upper[0]) & (Y >= lower[1]) & (Y <= upper[1]))

    def full_mask(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool)

    def concentric_windows(self, k: int) -> list:
        """``k`` nested masks: squares about the window center of half-width
        ``side * j / (2k)``, ``j = 1..k``; the last one is the whole window."""
        cx = self.origin[0] + 0.5 * self.side
        cy = self.origin[1] + 0.5 * self.side
        out = []
        for j in range(1, k + 1):
            w = 0.5 * self.side * j / k
            out.append(self.box_mask((cx - w, cy - w), (cx + w, cy + w)))
        return out


# ---------------------------------------------------------------------------
# band sampling


def _torus_lags(grid: GridSpec) -> np.ndarray:
    M = grid.torus_cells
    k = np.arange(M)
    d = np.minimum(k, M - k) * grid.h
    return np.hypot(d[:, None], d[None, :])


@lru_cache(maxsize=32)
def _band_spectrum(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig):
    """Sampling amplitudes ``sqrt(lambda+)/M`` of the embedded covariance and
    the covariance error bound caused by clipping negative eigenvalues."""
    M = grid.torus_cells
    cov = kernels.band_covariance(_torus_lags(grid), n, cuts, cfg)
    lam = sfft.fft2(cov).real
    clip_err = float(-np.minimum(lam, 0.0).sum() / (M * M))
    amp = np.sqrt(np.maximum(lam, 0.0)) / M
    return _readonly(amp), clip_err


def embedding_error(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig) -> float:
    """Bound on ``max |C_embedded - C_n|`` caused by clipping negative eigenvalues."""
    cuts.check_band(n)
    return _band_spectrum(grid, n, cuts, cfg)[1]


def embedding_covariance(grid: GridSpec, n: int, cuts: CutoffSequence,
                         cfg: KernelConfig) -> np.ndarray:
    """Covariance realized by the embedding sampler at window lags ``(a h, b h)``,
    ``a, b = 0..N-1``."""
    amp, _ = _band_spectrum(grid, n, cuts, cfg)
    M = grid.torus_cells
    cov = sfft.ifft2((amp * M) ** 2).real
    N = grid.cells_per_side
    return cov[:N, :N]


def sample_band(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig,
                seed: int, size: int | None = None, embed_tol: float = 1e-6) -> np.ndarray:
    """Sample band field ``Y_n`` at the cell centers of ``grid``.

    Parameters
    ----------
    seed : int
        Stream seed; equal seeds give bitwise equal output.
    size : int, optional
        Number of independent realizations drawn from the stream.  The result
        has shape ``(size, N, N)``, or ``(N, N)`` when omitted.
    embed_tol : float
        Largest tolerated covariance error, relative to ``C_n(0)``, caused by
        clipping negative embedding eigenvalues.

    Raises
    ------
    EmbeddingError
        If the padded torus is too small for the band's correlation length.
    """
    cuts.check_band(n)
    amp, clip_err = _band_spectrum(grid, n, cuts, cfg)
    if clip_err > embed_tol * cuts.band_variance(n):
        raise EmbeddingError(
            f"band {n}: circulant embedding is not nonnegative definite "
            f"(covariance error {clip_err:.3g} with padding_factor={grid.padding_factor}); "
            f"increase padding_factor, e.g. to {2 * grid.padding_factor}")
    M, N = grid.torus_cells, grid.cells_per_side
    # Full spectrum amplitudes sqrt(lambda)/M; the real and imaginary parts of
    # the transformed complex white noise are two independent realizations.
    rng = np.random.default_rng(seed)
    count = 1 if size is None else int(size)
    pairs = (count + 1) // 2
    out = np.empty((2 * pairs, N, N))
    chunk = max(1, _CHUNK_ELEMENTS // (M * M))
    for start in range(0, pairs, chunk):
        b = min(chunk, pairs - start)
        xi = rng.standard_normal((b, 2, M, M))
        # only the N x N window is kept, so prune the second transform
        z = sfft.fft((xi[:, 0] + 1j * xi[:, 1]) * amp, axis=-1)[..., :N]
        z = sfft.fft(z, axis=-2)[:, :N]
        out[2 * start:2 * (start + b):2] = z.real
        out[2 * start + 1:2 * (start + b):2] = z.imag
    return out[0] if size is None else out[:count]


def dense_covariance(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig) -> np.ndarray:
    """Full ``N^2 x N^2`` covariance matrix of ``Y_n`` at cell centers (row-major cells)."""
    X, Y = grid.centers()
    pts = np.column_stack([X.ravel(), Y.ravel()])
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    return kernels.band_covariance(d, n, cuts, cfg)


def sample_band_dense(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig,
                      seed: int, size: int | None = None) -> np.ndarray:
    """Reference sampler by dense symmetric factorization (grids up to 64^2)."""
    N = grid.cells_per_side
    if N > 64:
        raise ValueError("dense sampling is limited to 64 x 64 grids")
    w, V = np.linalg.eigh(dense_covariance(grid, n, cuts, cfg))
    L = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    count = 1 if size is None else int(size)
    z = rng.standard_normal((count, N * N))
    out = (z @ L.T).reshape(count, N, N)
    return out[0] if size is None else out


# ---------------------------------------------------------------------------
# field stack


@dataclass(frozen=True)
class FieldStack:
    """Band samples ``Y_1..Y_n``, their sum ``X_n`` and ``Var X_n(z)``."""

    grid: GridSpec
    cuts: CutoffSequence
    bands: tuple
    accumulated: np.ndarray
    variance: float
    seeds: tuple = ()
    master_seed: int | None = None

    @classmethod
    def empty(cls, grid: GridSpec, cuts: CutoffSequence, master_seed: int | None = None):
        return cls(grid, cuts, (), _readonly(np.zeros(grid.shape)), 0.0, (), master_seed)

    @property
    def n(self) -> int:
        return len(self.bands)


def accumulate(stack: FieldStack, new_band: np.ndarray, seed: int | None = None) -> FieldStack:
    """``X_{n+1} = X_n + Y_{n+1}``; the variance grows by ``C_{n+1}(0)``."""
    new_band = np.array(new_band, dtype=float)
    if new_band.shape != stack.grid.shape:
        raise ValueError(f"band shape {new_band.shape} does not match grid {stack.grid.shape}")
    n = stack.n + 1
    return FieldStack(
        grid=stack.grid,
        cuts=stack.cuts,
        bands=stack.bands + (_readonly(new_band),),
        accumulated=_readonly(stack.accumulated + new_band),
        variance=stack.variance + stack.cuts.band_variance(n),
        seeds=stack.seeds + (seed,),
        master_seed=stack.master_seed,
    )


def extend_stack(stack: FieldStack, cfg: KernelConfig, n: int) -> FieldStack:
    """Sample the bands ``stack.n + 1 .. n`` from seeds derived from the master seed."""
    if stack.master_seed is None:
        raise ValueError("stack has no master seed to derive band seeds from")
    for k in range(stack.n + 1, n + 1):
        seed = derive_seed(stack.master_seed, k)
        stack = accumulate(stack, sample_band(stack.grid, k, stack.cuts, cfg, seed), seed)
    return stack


def build_stack(grid: GridSpec, n: int, cuts: CutoffSequence, cfg: KernelConfig,
                master_seed: int) -> FieldStack:
    return extend_stack(FieldStack.empty(grid, cuts, int(master_seed)), cfg, n)


# ---------------------------------------------------------------------------
# chaos measure


@dataclass(frozen=True)
class ChaosMeasure:
    """Cell masses of the regularized chaos measure on a grid."""

    grid: GridSpec
    gamma: float
    n: int
    cell_mass: np.ndarray
    total: float
    seeds: tuple = ()
    master_seed: int | None = None

    def mass(self, mask=None) -> float:
        if mask is None:
            return self.total
        return math.fsum(self.cell_mass[np.asarray(mask, dtype=bool)])

    def scaled(self, factor: float) -> "ChaosMeasure":
        cm = self.cell_mass * factor
        return ChaosMeasure(self.grid, self.gamma, self.n, _readonly(cm),
                            math.fsum(cm.ravel()), self.seeds, self.master_seed)


def check_gamma(gamma: float, gamma_zero_diagnostic: bool = False) -> float:
    gamma = float(gamma)
    if gamma == 0.0 and gamma_zero_diagnostic:
        return gamma
    if not (0.0 < gamma < 2.0):
        hint = " (gamma = 0 needs gamma_zero_diagnostic=True)" if gamma == 0.0 else ""
        raise ValueError(f"gamma must lie in the open interval (0, 2), got {gamma!r}{hint}")
    return gamma


def density(stack: FieldStack, gamma: float) -> np.ndarray:
    """``exp(gamma X_n - gamma^2/2 Var X_n)`` at cell centers."""
    return np.exp(gamma * stack.accumulated - 0.5 * gamma * gamma * stack.variance)


def build_measure(stack: FieldStack, gamma: float,
                  gamma_zero_diagnostic: bool = False) -> ChaosMeasure:
    """Midpoint rule: cell mass = density at the center times the cell area."""
    gamma = check_gamma(gamma, gamma_zero_diagnostic)
    cm = density(stack, gamma) * stack.grid.cell_area
    if not np.all(np.isfinite(cm)):
        raise FloatingPointError("chaos density overflowed")
    return ChaosMeasure(stack.grid, gamma, stack.n, _readonly(cm), math.fsum(cm.ravel()),
                        stack.seeds, stack.master_seed)


def lebesgue_measure(grid: GridSpec) -> ChaosMeasure:
    """The gamma = 0 measure: every cell carries its area."""
    cm = np.full(grid.shape, grid.cell_area)
    return ChaosMeasure(grid, 0.0, 0, _readonly(cm), math.fsum(cm.ravel()))


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ProbeSummary:
    area: float
    mass_n: np.ndarray
    mass_next: np.ndarray
    increment: np.ndarray
    running_mean_n: np.ndarray
    running_mean_next: np.ndarray
    mean_n: float
    mean_next: float
    se_n: float
    se_next: float
    increment_mean: float
    increment_std: float
    drift: bool

    def to_dict(self) -> dict:
        return {
            "area": self.area, "mean_n": self.mean_n, "mean_next": self.mean_next,
            "se_n": self.se_n, "se_next": self.se_next,
            "increment_mean": self.increment_mean, "increment_std": self.increment_std,
            "drift": self.drift,
            "mass_n": self.mass_n.tolist(), "mass_next": self.mass_next.tolist(),
        }


@dataclass
class ConvergenceReport:
    n: int
    gamma: float
    replicas: int
    probes: list
    warnings: list = field(default_factory=list)

    @property
    def drift(self) -> bool:
        return any(p.drift for p in self.probes)

    def to_dict(self) -> dict:
        return {"n": self.n, "gamma": self.gamma, "replicas": self.replicas,
                "drift": self.drift, "warnings": list(self.warnings),
                "probes": [p.to_dict() for p in self.probes]}


def _mean_se(x: np.ndarray) -> tuple:
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def check_nested(coarse: ChaosMeasure, fine: ChaosMeasure) -> None:
    if fine.n != coarse.n + 1:
        raise NestingError(f"levels {coarse.n} and {fine.n} are not consecutive")
    if fine.grid != coarse.grid or fine.gamma != coarse.gamma:
        raise NestingError("measures differ in grid or gamma")
    if tuple(fine.seeds[:coarse.n]) != tuple(coarse.seeds) or None in coarse.seeds:
        raise NestingError("seed records differ on the shared bands")


def convergence_diagnostic(pairs: Sequence, probe_sets: Sequence) -> ConvergenceReport:
    """Compare masses of nested level-n and level-(n+1) measures on probe sets.

    ``pairs`` holds one ``(measure_n, measure_{n+1})`` tuple per replica.
    A probe drifts when the two sample means differ by more than three
    combined standard errors.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one replica")
    for coarse, fine in pairs:
        check_nested(coarse, fine)
    notes = []
    if len(pairs) < 2:
        msg = "single replica: standard errors are degenerate (zero)"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    grid = pairs[0][0].grid
    probes = []
    for mask in probe_sets:
        mask = np.asarray(mask, dtype=bool)
        a = np.array([c.mass(mask) for c, _ in pairs])
        b = np.array([f.mass(mask) for _, f in pairs])
        inc = b - a
        count = np.arange(1, a.size + 1)
        ma, sa = _mean_se(a)
        mb, sb = _mean_se(b)
        combined = math.hypot(sa, sb)
        probes.append(ProbeSummary(
            area=float(mask.sum()) * grid.cell_area,
            mass_n=a, mass_next=b, increment=inc,
            running_mean_n=np.cumsum(a) / count, running_mean_next=np.cumsum(b) / count,
            mean_n=ma, mean_next=mb, se_n=sa, se_next=sb,
            increment_mean=float(inc.mean()),
            increment_std=float(inc.std(ddof=1)) if inc.size > 1 else 0.0,
            drift=bool(abs(mb - ma) > 3.0 * combined) if combined > 0 else False,
        ))
    c0 = pairs[0][0]
    return ConvergenceReport(c0.n, c0.gamma, len(pairs), probes, notes)


class BallMass(NamedTuple):
    radius: float
    mass: float
    slope: float


def _check_balls(grid: GridSpec, center, radii) -> np.ndarray:
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size == 0:
        raise ValueError("radii must be a nonempty list")
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    if radii[-1] < 2.0 * grid.h:
        raise ResolutionError(f"radius {radii[-1]:.3g} is below two cell widths ({2 * grid.h:.3g})")
    x0, y0 = grid.origin
    cx, cy = float(center[0]), float(center[1])
    r = radii[0]
    if (cx - r < x0 or cx + r > x0 + grid.side or cy - r < y0 or cy + r > y0 + grid.side):
        raise ValueError("balls must lie within the grid window")
    return radii


def _slopes(radii, masses) -> list:
    out = []
    for i, (r, mval) in enumerate(zip(radii, masses)):
        if i == 0:
            s = math.nan
        else:
            s = math.log(masses[i - 1] / mval) / math.log(radii[i - 1] / r)
        out.append(BallMass(float(r), float(mval), s))
    return out


def ball_mass_scaling(measure: ChaosMeasure, center, radii) -> list:
    """Masses of discretized balls ``B(center, r)`` and log-log slopes.

    A cell belongs to the ball when its center does.  ``slope[i]`` is the
    finite-difference slope between radii ``i - 1`` and ``i`` (NaN for the
    first radius).
    """
    grid = measure.grid
    radii = _check_balls(grid, center, radii)
    X, Y = grid.centers()
    d = np.hypot(X - center[0], Y - center[1]).ravel()
    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    cum = np.cumsum(measure.cell_mass.ravel()[order])
    idx = np.searchsorted(d_sorted, radii, side="right")
    masses = [float(cum[i - 1]) if i > 0 else 0.0 for i in idx]
    return _slopes(radii, masses)


def ball_mass_bruteforce(measure: ChaosMeasure, center, radii) -> list:
    """Same as :func:`ball_mass_scaling` by direct masking of every ball."""
    grid = measure.grid
    radii = _check_balls(grid, center, radii)
    X, Y = grid.centers()
    d = np.hypot(X - center[0], Y - center[1])
    masses = [float(measure.cell_mass[d <= r].sum()) for r in radii]
    return _slopes(radii, masses)


def ball_scaling_ensemble(measures: Sequence, center, radii, n_boot: int = 1000,
                          seed: int = 0, level: float = 0.95) -> dict:
    """Median slope per radius step over replicas, with a bootstrap band."""
    slopes = np.array([[b.slope for b in ball_mass_scaling(mu, center, radii)][1:]
                       for mu in measures])
    rng = np.random.default_rng(seed)
    R = slopes.shape[0]
    boot = np.median(slopes[rng.integers(0, R, size=(n_boot, R))], axis=1)
    q = (1 - level) / 2
    return {
        "radii": [float(r) for r in radii],
        "median_slope": np.median(slopes, axis=0).tolist(),
        "lower": np.quantile(boot, q, axis=0).tolist(),
        "upper": np.quantile(boot, 1 - q, axis=0).tolist(),
        "replicas": int(R),
    }
