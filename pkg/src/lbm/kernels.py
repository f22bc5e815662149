"""Massive Green function, its seed kernel, band covariances and the
Brownian resolvent kernel.

All kernels are radial.  Each one is available in two forms:

* ``method="quad"`` integrates the defining integral adaptively;
* ``method="closed"`` uses modified Bessel functions,

    k_m(z)      = m|z| K_1(m|z|)
    G^(m)(r)    = K_0(m r)
    C_n(r)      = K_0(m r c_{n-1}) - K_0(m r c_n)
    r_1(r)      = K_0(sqrt(2) r) / pi

The closed forms are an acceleration only.  They are enabled for a given
:class:`KernelConfig` after :func:`oracle_gate` has confirmed them against
the quadratures on a log grid of radii.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

from .errors import ConvergenceError, LBMError, SingularityError

#: sup_x x K_1(x) exp(x/2), attained near x = 0.38134; rounded up.
SEED_KERNEL_ENVELOPE = 1.0672933

#: Relative tolerance every closed form must meet against its quadrature.
GATE_TOL = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    """Mass parameter and quadrature controls."""

    m: float = 1.0
    quad_rel_tol: float = 1e-10
    quad_max_subdiv: int = 200

    def __post_init__(self):
        if not (self.m > 0 and math.isfinite(self.m)):
            raise ValueError(f"mass m must be positive and finite, got {self.m!r}")
        if not (0 < self.quad_rel_tol <= 1e-4):
            raise ValueError(f"quad_rel_tol must lie in (0, 1e-4], got {self.quad_rel_tol!r}")
        if int(self.quad_max_subdiv) < 1:
            raise ValueError("quad_max_subdiv must be a positive integer")


@dataclass(frozen=True)
class CutoffSequence:
    """Cutoffs ``1 = c_0 < c_1 < ... < c_N``; band n covers ``[c_{n-1}, c_n]``."""

    values: tuple
    ratio: float | None = field(default=None)

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2:
            raise ValueError("a cutoff sequence needs at least one band")
        if vals[0] != 1.0:
            raise ValueError(f"cutoff sequence must start at 1, got {vals[0]!r}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("cutoff sequence must be strictly increasing")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("cutoffs must be finite")

    @classmethod
    def geometric(cls, ratio: float = math.e, n_max: int = 8) -> "CutoffSequence":
        if ratio <= 1:
            raise ValueError("geometric ratio must exceed 1")
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        return cls(tuple(float(ratio) ** k for k in range(n_max + 1)), float(ratio))

    @property
    def n_bands(self) -> int:
        return len(self.values) - 1

    def check_band(self, n: int) -> None:
        if not (1 <= n <= self.n_bands):
            raise IndexError(f"band index {n} outside 1..{self.n_bands}")

    def band_variance(self, n: int) -> float:
        """``C_n(0) = log(c_n / c_{n-1})``."""
        self.check_band(n)
        if self.ratio is not None:
            return math.log(self.ratio)
        return math.log(self.values[n] / self.values[n - 1])

    def total_variance(self, n: int) -> float:
        """Variance of the regularized field after ``n`` bands."""
        if n == 0:
            return 0.0
        self.check_band(n)
        return math.fsum(self.band_variance(k) for k in range(1, n + 1))


# ---------------------------------------------------------------------------
# quadrature helpers


def _quad(f, a, b, cfg: KernelConfig, what: str) -> float:
    out = integrate.quad(f, a, b, epsabs=0.0, epsrel=cfg.quad_rel_tol,
                         limit=int(cfg.quad_max_subdiv), full_output=1)
    y, abserr, info = out[0], out[1], out[2]
    if len(out) > 3:
        achieved = abserr / abs(y) if y else abserr
        raise ConvergenceError(f"{what}: quadrature did not converge ({out[3].strip()})",
                               achieved_tol=achieved)
    return y


# integrands below are in u = log s; beyond this both tails underflow
_U_MAX = 700.0


def _quad_line(f, peak: float, cfg: KernelConfig, what: str) -> float:
    """Integrate ``f`` over the real line, splitting at the unimodal peak."""
    return (_quad(f, -np.inf, peak, cfg, what)
            + _quad(f, peak, np.inf, cfg, what))


def _seed_quad(rho: float, cfg: KernelConfig) -> float:
    # s = e^u in  1/2 int_0^inf exp(-m^2 rho^2/(2s) - s/2) ds
    a = 0.5 * (cfg.m * rho) ** 2
    peak = math.log(1.0 + math.sqrt(1.0 + 2.0 * a))

    def f(u):
        if abs(u) > _U_MAX:
            return 0.0
        return 0.5 * math.exp(-a * math.exp(-u) - 0.5 * math.exp(u) + u)

    return _quad_line(f, peak, cfg, "seed kernel")


def _green_quad(r: float, cfg: KernelConfig) -> float:
    # s = e^u in  int_0^inf exp(-m^2 s/2 - r^2/(2s)) ds/(2s)
    m2, r2 = cfg.m ** 2, r * r
    peak = math.log(r / cfg.m)

    def f(u):
        if abs(u) > _U_MAX:
            return 0.0
        return 0.5 * math.exp(-0.5 * m2 * math.exp(u) - 0.5 * r2 * math.exp(-u))

    return _quad_line(f, peak, cfg, "massive Green function")


def _resolvent_quad(r: float, cfg: KernelConfig) -> float:
    # t = e^u in  int_0^inf e^{-t} (2 pi t)^{-1} exp(-r^2/(2t)) dt
    r2 = r * r
    peak = math.log(r / math.sqrt(2.0))

    def f(u):
        if abs(u) > _U_MAX:
            return 0.0
        return math.exp(-math.exp(u) - 0.5 * r2 * math.exp(-u)) / (2.0 * math.pi)

    return _quad_line(f, peak, cfg, "resolvent kernel")


# ---------------------------------------------------------------------------
# closed forms (unchecked)


def _seed_closed(x):
    """x K_1(x) with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore"):
        out = x * special.k1(x)
    return np.where(x == 0.0, 1.0, out)


def _green_closed(r, m):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(r == 0.0, np.inf, special.k0(m * r))


def _resolvent_closed(r):
    return special.k0(math.sqrt(2.0) * np.asarray(r, dtype=float)) / math.pi


# ---------------------------------------------------------------------------
# oracle gate


class GateReport(NamedTuple):
    radii: np.ndarray
    seed_rel_err: np.ndarray
    green_rel_err: np.ndarray
    resolvent_rel_err: np.ndarray
    tol: float

    @property
    def max_errors(self) -> dict:
        return {"seed_kernel": float(self.seed_rel_err.max()),
                "massive_green": float(self.green_rel_err.max()),
                "resolvent_kernel": float(self.resolvent_rel_err.max())}

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_errors.values())


def oracle_gate(cfg: KernelConfig, radii: Sequence[float] | None = None,
                tol: float = GATE_TOL) -> GateReport:
    """Compare every closed form against its defining quadrature.

    The default radii are 200 log-spaced points in ``[1e-3, 10]``.
    """
    if radii is None:
        radii = np.logspace(-3, 1, 200)
    radii = np.asarray(radii, dtype=float)

    def rel(a, b):
        return np.abs(a - b) / np.abs(b)

    seed_q = np.array([_seed_quad(r, cfg) for r in radii])
    green_q = np.array([_green_quad(r, cfg) for r in radii])
    res_q = np.array([_resolvent_quad(r, cfg) for r in radii])
    return GateReport(
        radii=radii,
        seed_rel_err=rel(_seed_closed(cfg.m * radii), seed_q),
        green_rel_err=rel(_green_closed(radii, cfg.m), green_q),
        resolvent_rel_err=rel(_resolvent_closed(radii), res_q),
        tol=tol,
    )


@lru_cache(maxsize=64)
def _gate_passed(cfg: KernelConfig) -> bool:
    report = oracle_gate(cfg)
    if not report.passed:
        raise ConvergenceError(
            f"closed-form kernels failed the oracle gate for {cfg}: {report.max_errors}",
            achieved_tol=max(report.max_errors.values()))
    return True


def _check_method(method: str, cfg: KernelConfig) -> None:
    if method == "closed":
        _gate_passed(cfg)
    elif method != "quad":
        raise ValueError(f"unknown method {method!r}; expected 'closed' or 'quad'")


def _scalar_or_array(out, like):
    return float(out) if np.ndim(like) == 0 else out


# ---------------------------------------------------------------------------
# public kernels


def seed_kernel(z, cfg: KernelConfig, method: str = "closed"):
    """Seed kernel ``k_m(z)`` for a planar vector (or array of them, last axis 2).

    ``k_m(0) = 1`` and ``0 < k_m <= 1`` everywhere.
    """
    _check_method(method, cfg)
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (2,):
        raise ValueError("z must be a planar vector with trailing axis of length 2")
    rho = np.hypot(z[..., 0], z[..., 1])
    if method == "closed":
        out = _seed_closed(cfg.m * rho)
    else:
        out = np.vectorize(lambda p: _seed_quad(float(p), cfg), otypes=[float])(rho)
    return _scalar_or_array(out, rho)


def seed_kernel_radial(rho, cfg: KernelConfig, method: str = "closed"):
    """``k_m`` as a function of ``|z|``."""
    rho = np.asarray(rho, dtype=float)
    return seed_kernel(np.stack([rho, np.zeros_like(rho)], axis=-1), cfg, method)


def massive_green(r, cfg: KernelConfig, method: str = "closed"):
    """Massive Green function ``G^(m)`` at separation ``r``; ``inf`` at ``r = 0``."""
    _check_method(method, cfg)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("separation must be nonnegative")
    if method == "closed":
        out = _green_closed(r, cfg.m)
    else:
        out = np.vectorize(lambda x: math.inf if x == 0 else _green_quad(float(x), cfg),
                           otypes=[float])(r)
    return _scalar_or_array(out, r)


def massive_green_seed_form(r: float, cfg: KernelConfig) -> float:
    """``int_1^inf k_m(s r)/s ds`` by quadrature over ``s = e^v``."""
    if r <= 0:
        return math.inf
    x = cfg.m * r
    # x K_1(x) < 1e-300 for x > 700
    upper = max(math.log(700.0 / x), 0.0)
    return _quad(lambda v: float(_seed_closed(x * math.exp(v))), 0.0, upper, cfg,
                 "seed-form Green function")


def band_covariance(r, n: int, cuts: CutoffSequence, cfg: KernelConfig,
                    method: str = "closed"):
    """Covariance of band ``n``: ``C_n(r) = int_{c_{n-1}}^{c_n} k_m(s r)/s ds``."""
    cuts.check_band(n)
    _check_method(method, cfg)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("separation must be nonnegative")
    lo, hi = cuts.values[n - 1], cuts.values[n]
    if method == "closed":
        with np.errstate(divide="ignore", invalid="ignore"):
            mr = cfg.m * r
            out = special.k0(mr * lo) - special.k0(mr * hi)
        out = np.where(r == 0.0, cuts.band_variance(n), np.clip(out, 0.0, None))
    else:
        def one(x):
            if x == 0.0:
                return cuts.band_variance(n)
            mx = cfg.m * x
            return _quad(lambda v: float(_seed_closed(mx * math.exp(v))),
                         math.log(lo), math.log(hi), cfg, "band covariance")
        out = np.vectorize(one, otypes=[float])(r)
    return _scalar_or_array(out, r)


def band_tail_bound(r, n_bands: int, cuts: CutoffSequence, cfg: KernelConfig):
    """Upper bound on ``int_{c_N}^inf k_m(s r)/s ds`` using
    ``k_m(z) <= min(1, kappa exp(-m|z|/2))``.
    """
    cuts.check_band(n_bands)
    r = np.asarray(r, dtype=float)
    c = cuts.values[n_bands]
    kappa = SEED_KERNEL_ENVELOPE
    with np.errstate(divide="ignore", invalid="ignore"):
        a = 0.5 * cfg.m * r
        s0 = math.log(kappa) / a  # where kappa exp(-a s) crosses 1
        below = np.log(np.maximum(s0, c) / c) + kappa * special.exp1(a * np.maximum(s0, c))
    out = np.where(r == 0.0, np.inf, below)
    return _scalar_or_array(out, r)


def truncated_green(r, cuts: CutoffSequence, cfg: KernelConfig, n_bands: int | None = None):
    """``(sum_{n<=N} C_n(r), tail bound)`` for the band-truncated Green function."""
    n_bands = cuts.n_bands if n_bands is None else n_bands
    total = sum(np.asarray(band_covariance(r, k, cuts, cfg)) for k in range(1, n_bands + 1))
    return _scalar_or_array(total, r), band_tail_bound(r, n_bands, cuts, cfg)


def resolvent_kernel(r, method: str = "closed", cfg: KernelConfig | None = None):
    """Planar Brownian resolvent density ``r_1`` at separation ``r > 0``.

    ``cfg`` only supplies quadrature controls; the kernel does not depend on ``m``.
    """
    cfg = KernelConfig() if cfg is None else cfg
    _check_method(method, cfg)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise SingularityError("resolvent kernel is singular at zero separation")
    if method == "closed":
        out = _resolvent_closed(r)
    else:
        out = np.vectorize(lambda x: _resolvent_quad(float(x), cfg), otypes=[float])(r)
    return _scalar_or_array(out, r)


def log_plus(x):
    """``max(log x, 0)``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(x), 0.0)


class LogBound(NamedTuple):
    c1: float
    c2: float
    verified: bool
    slack: np.ndarray


def resolvent_log_bound(radii) -> LogBound:
    """Fit ``r_1(r) <= c1 log+(1/r) + c2`` on the given radii and verify it.

    ``c2 = r_1(1)``, the supremum of ``r_1`` over ``r >= 1`` (``r_1`` is
    decreasing).  ``c1`` is the smallest slope covering every radius below 1;
    with no such radius the small-distance asymptote ``1/pi`` is used.
    """
    radii = np.asarray(radii, dtype=float).ravel()
    if radii.size == 0:
        raise ValueError("radii must be nonempty")
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    # bump by a few ulps so the tight radius keeps nonnegative slack
    bump = 1.0 + 8.0 * np.finfo(float).eps
    c2 = float(_resolvent_closed(1.0)) * bump
    r1 = _resolvent_closed(radii)
    small = radii < 1.0
    if small.any():
        c1 = float(np.max((r1[small] - c2) / np.log(1.0 / radii[small]))) * bump
        c1 = max(c1, np.finfo(float).tiny)
    else:
        c1 = 1.0 / math.pi
    slack = c1 * log_plus(1.0 / radii) + c2 - r1
    return LogBound(c1, c2, bool(np.all(slack >= 0)), slack)


__all__ = [
    "KernelConfig", "CutoffSequence", "GateReport", "LogBound", "LBMError",
    "oracle_gate", "seed_kernel", "seed_kernel_radial", "massive_green",
    "massive_green_seed_form", "band_covariance", "band_tail_bound", "truncated_green",
    "resolvent_kernel", "resolvent_log_bound", "log_plus", "SEED_KERNEL_ENVELOPE",
]
