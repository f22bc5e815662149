"""Log-potential, resolvent potential, their bound envelope and the
finite-energy double integral of a grid measure.

Cell contributions use the midpoint rule except in the cell(s) containing
the evaluation point, where the cell is split 4-fold recursively to depth
``depth`` (default 6) and its mass spread uniformly over the finest
sub-cells.  On the cell-center grid the potentials are discrete
convolutions and are evaluated by FFT; arbitrary points are summed
directly.

Because the log-potential and the resolvent potential share nodes and
weights, ``r_1 <= c1 log+(1/r) + c2`` at every node distance implies the
envelope dominates the resolvent potential term by term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.signal import fftconvolve

from .gmc import ChaosMeasure, GridSpec
from .kernels import LogBound, log_plus, resolvent_kernel, resolvent_log_bound

KINDS = ("log_potential", "resolvent_potential", "bound_envelope")
DEFAULT_DEPTH = 6


def _kernel(name: str, d):
    d = np.asarray(d, dtype=float)
    if name == "log":
        with np.errstate(divide="ignore"):
            return log_plus(1.0 / d)
    if name == "resolvent":
        return resolvent_kernel(d)
    raise ValueError(f"unknown kernel {name!r}")


@lru_cache(maxsize=16)
def subcell_offsets(h: float, depth: int = DEFAULT_DEPTH) -> np.ndarray:
    """Centers of the ``4**depth`` finest sub-cells relative to the cell center."""
    k = 1 << depth
    t = ((np.arange(k) + 0.5) / k - 0.5) * h
    U, V = np.meshgrid(t, t, indexing="ij")
    out = np.column_stack([U.ravel(), V.ravel()])
    out.setflags(write=False)
    return out


def singular_cell_value(name: str, h: float, depth: int = DEFAULT_DEPTH) -> float:
    """Kernel average over a cell seen from its own center."""
    off = subcell_offsets(h, depth)
    return float(_kernel(name, np.hypot(off[:, 0], off[:, 1])).mean())


@lru_cache(maxsize=16)
def _lag_kernel(name: str, h: float, n: int, depth: int) -> np.ndarray:
    a = np.arange(-(n - 1), n) * h
    d = np.hypot(a[:, None], a[None, :])
    d[n - 1, n - 1] = 1.0  # placeholder, replaced below
    K = _kernel(name, d)
    K[n - 1, n - 1] = singular_cell_value(name, h, depth)
    K.setflags(write=False)
    return K


def _convolve(mass: np.ndarray, K: np.ndarray) -> np.ndarray:
    n = mass.shape[0]
    full = fftconvolve(mass, K, mode="full")
    return np.maximum(full[n - 1:2 * n - 1, n - 1:2 * n - 1], 0.0)


def _direct(name: str, grid: GridSpec, mass: np.ndarray, points: np.ndarray, depth: int):
    X, Y = grid.centers()
    cx, cy = X.ravel(), Y.ravel()
    m = mass.ravel()
    half = 0.5 * grid.h
    off = subcell_offsets(grid.h, depth)
    out = np.empty(len(points))
    for p, (x, y) in enumerate(points):
        d = np.hypot(cx - x, cy - y)
        own = (np.abs(cx - x) <= half) & (np.abs(cy - y) <= half)
        d_safe = np.where(own, 1.0, d)
        vals = _kernel(name, d_safe)
        for c in np.flatnonzero(own):
            ds = np.hypot(cx[c] + off[:, 0] - x, cy[c] + off[:, 1] - y)
            vals[c] = _kernel(name, ds).mean()
        out[p] = float(np.dot(m, vals))
    return out


def _mask(grid: GridSpec, window) -> np.ndarray:
    if window is None:
        return grid.full_mask()
    window = np.asarray(window, dtype=bool)
    if window.shape != grid.shape:
        raise ValueError(f"window shape {window.shape} does not match grid {grid.shape}")
    return window


def _evaluate(name: str, measure: ChaosMeasure, window, points, depth: int):
    grid = measure.grid
    mass = np.where(_mask(grid, window), measure.cell_mass, 0.0)
    if points is None:
        X, Y = grid.centers()
        pts = np.stack([X, Y], axis=-1)
        if not mass.any():
            return pts, np.zeros(grid.shape)
        return pts, _convolve(mass, _lag_kernel(name, grid.h, grid.cells_per_side, depth))
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1:] != (2,):
        raise ValueError("points must have a trailing axis of length 2")
    flat = pts.reshape(-1, 2)
    if flat.shape[0] == 0:
        raise ValueError("no evaluation points")
    return pts, _direct(name, grid, mass, flat, depth).reshape(pts.shape[:-1])


def _source(measure: ChaosMeasure, window) -> dict:
    w = _mask(measure.grid, window)
    return {"gamma": measure.gamma, "n": measure.n, "master_seed": measure.master_seed,
            "window_cells": int(w.sum())}


@dataclass(frozen=True)
class PotentialField:
    """Values of a potential at evaluation points (``points[..., :]`` = (x, y))."""

    points: np.ndarray
    values: np.ndarray
    kind: str
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")


def log_potential(measure: ChaosMeasure, points=None,
                  depth: int = DEFAULT_DEPTH) -> PotentialField:
    """``x -> int log+(1/|x - y|) M(dy)``; cell centers when ``points`` is None."""
    pts, vals = _evaluate("log", measure, None, points, depth)
    return PotentialField(pts, vals, "log_potential", _source(measure, None))


def resolvent_potential(measure: ChaosMeasure, window=None, points=None,
                        depth: int = DEFAULT_DEPTH) -> PotentialField:
    """``R_1(1_G M)(x) = int_G r_1(x, y) M(dy)`` for a cell-union window ``G``."""
    pts, vals = _evaluate("resolvent", measure, window, points, depth)
    return PotentialField(pts, vals, "resolvent_potential", _source(measure, window))


def bound_envelope(measure: ChaosMeasure, window, c1: float, c2: float, points=None,
                   depth: int = DEFAULT_DEPTH, log_field: PotentialField | None = None
                   ) -> PotentialField:
    """``c1 * log_potential + c2 * M(window)``.

    A precomputed ``log_field`` on the same points may be passed to avoid
    recomputing the log-potential.
    """
    if log_field is None:
        log_field = log_potential(measure, points, depth)
    ck = c2 * measure.mass(_mask(measure.grid, window))
    vals = c1 * log_field.values + ck
    src = dict(_source(measure, window), c1=c1, c2=c2, ck=ck)
    return PotentialField(log_field.points, vals, "bound_envelope", src)


def realizable_separations(grid: GridSpec, depth: int = DEFAULT_DEPTH) -> np.ndarray:
    """Every node distance used by the cell-center potentials: center-to-center
    lags plus sub-cell distances inside the singular cell."""
    a = np.arange(grid.cells_per_side) * grid.h
    lag = np.hypot(a[:, None], a[None, :]).ravel()[1:]
    off = subcell_offsets(grid.h, depth)
    return np.unique(np.concatenate([lag, np.hypot(off[:, 0], off[:, 1])]))


def certify_bound(grid: GridSpec, depth: int = DEFAULT_DEPTH) -> LogBound:
    """Resolvent log bound fitted on :func:`realizable_separations`."""
    return resolvent_log_bound(realizable_separations(grid, depth))


def domination_slack(resolvent: PotentialField, envelope: PotentialField) -> np.ndarray:
    return envelope.values - resolvent.values


def modulus_of_continuity(pf: PotentialField) -> float:
    """Largest change between grid-adjacent evaluation points."""
    v = np.asarray(pf.values)
    if v.ndim != 2:
        raise ValueError("modulus of continuity needs grid-shaped values")
    return float(max(np.abs(np.diff(v, axis=0)).max(), np.abs(np.diff(v, axis=1)).max()))


# ---------------------------------------------------------------------------
# energy


@lru_cache(maxsize=16)
def cell_self_energy(name: str, h: float) -> float:
    """``h^-4 int_cell int_cell K(|x - y|) dx dy``.

    The difference of two uniform points in a square has density
    ``(h - |u|)(h - |v|) / h^4``; in polar coordinates about the origin the
    log singularity is integrable and the remaining integrand is smooth.
    """
    def inner(theta):
        c, s = math.cos(theta), math.sin(theta)
        rmax = h / c

        def f(rho):
            return float(_kernel(name, rho)) * (h - rho * c) * (h - rho * s) * rho

        return integrate.quad(f, 0.0, rmax, epsabs=0.0, epsrel=1e-11, limit=200)[0]

    val = integrate.quad(inner, 0.0, math.pi / 4, epsabs=0.0, epsrel=1e-11, limit=200)[0]
    return 8.0 * val / h ** 4


@lru_cache(maxsize=8)
def _energy_kernel(h: float, n: int, depth: int) -> np.ndarray:
    K = np.array(_lag_kernel("resolvent", h, n, depth))
    K[n - 1, n - 1] = cell_self_energy("resolvent", h)
    K.setflags(write=False)
    return K


def cross_energy(measure: ChaosMeasure, window_a, window_b,
                 depth: int = DEFAULT_DEPTH) -> float:
    """``int_{G_a} int_{G_b} r_1(x, y) M(dx) M(dy)``."""
    grid = measure.grid
    ma = np.where(_mask(grid, window_a), measure.cell_mass, 0.0)
    mb = np.where(_mask(grid, window_b), measure.cell_mass, 0.0)
    if not (ma.any() and mb.any()):
        return 0.0
    pot = _convolve(mb, _energy_kernel(grid.h, grid.cells_per_side, depth))
    return math.fsum((ma * pot).ravel())


@dataclass
class EnergyReport:
    window: np.ndarray
    double_integral: float
    potential_sup: float
    mass: float
    c1: float
    c2: float
    ck: float
    grid: GridSpec
    gamma: float
    n: int
    seed: int | None

    def to_dict(self) -> dict:
        from .io import grid_to_dict, window_to_dict
        return {
            "window": window_to_dict(self.window), "mass": self.mass,
            "double_integral": self.double_integral, "potential_sup": self.potential_sup,
            "c1": self.c1, "c2": self.c2, "ck": self.ck,
            "grid": grid_to_dict(self.grid), "gamma": self.gamma, "n": self.n,
            "seed": self.seed,
        }


def finite_energy(measure: ChaosMeasure, window, bound: LogBound | None = None,
                  depth: int = DEFAULT_DEPTH) -> EnergyReport:
    """Double integral of ``r_1`` against ``1_G M`` plus the boundedness check.

    ``potential_sup`` is the maximum of ``R_1(1_G M)`` over cell centers.
    """
    grid = measure.grid
    w = _mask(grid, window)
    if not w.any():
        raise ValueError("window must contain at least one cell")
    if bound is None:
        bound = certify_bound(grid, depth)
    mass = measure.mass(w)
    energy = cross_energy(measure, w, w, depth)
    sup = float(resolvent_potential(measure, w, depth=depth).values.max())
    return EnergyReport(w, energy, sup, mass, bound.c1, bound.c2, bound.c2 * mass,
                        grid, measure.gamma, measure.n, measure.master_seed)
