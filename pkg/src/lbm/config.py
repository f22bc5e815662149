"""Experiment configuration: an INI file with fixed sections and keys.

Every key has a default, so an empty file is a valid config.  Parsing is
strict: unknown sections or keys and malformed values raise
:class:`~lbm.errors.ConfigError` naming the offending ``section.key``.
:func:`dumps` writes every key with its documentation, and
``parse(dumps(cfg)) == cfg`` holds for every valid config.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .gmc import GridSpec
from .kernels import CutoffSequence, KernelConfig

# (section, key, kind, default, doc); kinds are parsed by _PARSERS
SCHEMA = [
    ("model", "m", "float", 1.0, "mass parameter of the massive kernel"),
    ("model", "gamma", "float", 0.5, "chaos parameter, 0 <= gamma < 2 (0 needs gamma_zero_diagnostic)"),
    ("model", "n_levels", "int", 4, "number of field bands n"),
    ("model", "cutoffs", "str", "geometric", "'geometric' or an explicit list 1, c_1, ..., c_N"),
    ("model", "cutoff_ratio", "float", math.e, "ratio of geometric cutoffs c_n = ratio**n"),
    ("model", "cutoff_bands", "int", 8, "number of geometric bands N"),
    ("model", "gamma_zero_diagnostic", "bool", False, "allow gamma = 0 (Lebesgue measure, F_t = t)"),
    ("grid", "origin", "floats", (0.0, 0.0), "lower-left corner x, y"),
    ("grid", "side", "float", 1.0, "window side length"),
    ("grid", "cells", "int", 64, "cells per side, a power of two"),
    ("grid", "padding", "int", 16, "torus side for circulant embedding, in window sides"),
    ("path", "start", "str", "center", "'center' or a point x, y"),
    ("path", "horizon", "float", 0.01, "base Brownian horizon T"),
    ("path", "dt", "str", "auto", "'auto' for (cell width)**2 / 4, or a step"),
    ("path", "clock", "str", "base", "LBM clock: 'base' reuses the Brownian time grid, 'uniform' uses clock_step"),
    ("path", "clock_step", "float", 0.00025, "uniform clock step"),
    ("path", "clock_horizon", "float", 0.005, "uniform clock horizon"),
    ("path", "on_exit", "str", "error", "window exit policy in ensembles: 'error' or 'stop'"),
    ("ensemble", "environments", "int", 2, "independent field environments"),
    ("ensemble", "paths_per_env", "int", 64, "Brownian paths per environment"),
    ("ensemble", "start", "str", "center", "'center', 'uniform' or a point x, y"),
    ("ensemble", "occupation_bins", "int", 8, "occupation histogram bins per side"),
    ("ensemble", "permutations", "int", 999, "permutations for the rank test p-value"),
    ("potentials", "window", "str", "full", "'full' or a box x0, y0, x1, y1 (cells whose centers lie inside)"),
    ("potentials", "depth", "int", 6, "subdivision depth of the singular cell"),
    ("diagnostics", "replicas", "int", 8, "chaos replicas for convergence and ball scaling"),
    ("diagnostics", "probe_windows", "int", 3, "number of concentric probe windows"),
    ("diagnostics", "ball_center", "str", "center", "'center' or a point x, y"),
    ("diagnostics", "ball_radii", "str", "auto", "'auto' or a strictly decreasing list"),
    ("diagnostics", "n_boot", "int", 1000, "bootstrap resamples for the slope band"),
    ("diagnostics", "revuz_start", "str", "center", "'center' or a point x, y"),
    ("diagnostics", "revuz_times", "floats", (0.001, 0.002, 0.004), "times t for E_x F_t"),
    ("diagnostics", "revuz_paths", "int", 2000, "Brownian paths for the Revuz check"),
    ("diagnostics", "revuz_dt", "float", 5e-05, "path step for the Revuz check"),
    ("run", "master_seed", "int", 0, "master seed, 0 <= seed < 2**64"),
    ("run", "out", "str", "", "output directory; empty uses $LBM_OUTPUT_ROOT/<subcommand>"),
]
SECTIONS = tuple(dict.fromkeys(s for s, *_ in SCHEMA))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


_PARSERS = {"float": float, "int": int, "bool": _bool, "str": str.strip, "floats": _floats}


def _format(kind: str, value) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _attr(section: str, key: str) -> str:
    return f"{section}_{key}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat view of the INI file; attribute names are ``<section>_<key>``."""

    values: dict = field(default_factory=lambda: {_attr(s, k): d for s, k, _, d, _ in SCHEMA})

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def with_values(self, **kw) -> "ExperimentConfig":
        unknown = set(kw) - set(self.values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, values={**self.values, **kw})

    # ---- derived objects -------------------------------------------------

    def kernel(self) -> KernelConfig:
        return KernelConfig(m=self.model_m)

    def cuts(self) -> CutoffSequence:
        if self.model_cutoffs == "geometric":
            return CutoffSequence.geometric(self.model_cutoff_ratio, self.model_cutoff_bands)
        return CutoffSequence(_floats(self.model_cutoffs))

    def grid(self) -> GridSpec:
        return GridSpec(self.grid_origin, self.grid_side, self.grid_cells, self.grid_padding)

    def point(self, key: str, value: str) -> tuple:
        g = self.grid()
        if value == "center":
            return (g.origin[0] + g.side / 2, g.origin[1] + g.side / 2)
        pt = _floats(value)
        if len(pt) != 2:
            raise ConfigError(f"{key}: expected 'center' or x, y, got {value!r}")
        return pt

    def path_step(self) -> float:
        if self.path_dt == "auto":
            return self.grid().h ** 2 / 4
        return float(self.path_dt)

    def window_mask(self) -> np.ndarray:
        g = self.grid()
        if self.potentials_window == "full":
            return g.full_mask()
        box = _floats(self.potentials_window)
        if len(box) != 4:
            raise ConfigError("potentials.window: expected 'full' or x0, y0, x1, y1")
        return g.box_mask(box[:2], box[2:])

    def ball_radii(self) -> np.ndarray:
        g = self.grid()
        if self.diagnostics_ball_radii == "auto":
            # halving from a quarter of the window down to at least two cells
            k = max(1, int(math.floor(math.log2(g.side / 4 / (2 * g.h)))) + 1)
            return g.side / 4 * 0.5 ** np.arange(k)
        return np.asarray(_floats(self.diagnostics_ball_radii))

    # ---- validation ------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        """Check every downstream precondition; raise :class:`ConfigError`."""
        from .gmc import check_gamma
        from .pcaf import interpolation_hull

        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        try:
            self.kernel()
        except ValueError as exc:
            raise ConfigError(f"model.m: {exc}") from None
        try:
            cuts = self.cuts()
        except ValueError as exc:
            raise ConfigError(f"model.cutoffs: {exc}") from None
        need(1 <= self.model_n_levels <= cuts.n_bands, "model.n_levels",
             f"must lie in 1..{cuts.n_bands} (the number of cutoff bands)")
        try:
            check_gamma(self.model_gamma, self.model_gamma_zero_diagnostic)
        except ValueError as exc:
            raise ConfigError(f"model.gamma: {exc}") from None
        try:
            grid = self.grid()
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None
        lo, hi = interpolation_hull(grid)

        def inside(key, value):
            pt = np.asarray(self.point(key, value))
            need(np.all(pt >= lo) and np.all(pt <= hi), key, "point lies outside the field window")

        inside("path.start", self.path_start)
        need(self.path_horizon > 0, "path.horizon", "must be positive")
        if self.path_dt != "auto":
            try:
                float(self.path_dt)
            except ValueError:
                raise ConfigError("path.dt: expected 'auto' or a number") from None
        need(0 < self.path_step() <= self.path_horizon, "path.dt", "need 0 < dt <= horizon")
        need(self.path_clock in ("base", "uniform"), "path.clock", "must be 'base' or 'uniform'")
        need(0 < self.path_clock_step <= self.path_clock_horizon, "path.clock_step",
             "need 0 < clock_step <= clock_horizon")
        need(self.path_on_exit in ("error", "stop"), "path.on_exit", "must be 'error' or 'stop'")
        need(self.ensemble_environments >= 1, "ensemble.environments", "must be >= 1")
        need(self.ensemble_paths_per_env >= 1, "ensemble.paths_per_env", "must be >= 1")
        if self.ensemble_start != "uniform":
            inside("ensemble.start", self.ensemble_start)
        need(self.ensemble_occupation_bins >= 1
             and grid.cells_per_side % self.ensemble_occupation_bins == 0,
             "ensemble.occupation_bins", "must divide grid.cells")
        need(self.ensemble_permutations >= 1, "ensemble.permutations", "must be >= 1")
        need(self.window_mask().any(), "potentials.window", "selects no cells")
        need(0 <= self.potentials_depth <= 10, "potentials.depth", "must lie in 0..10")
        need(self.diagnostics_replicas >= 1, "diagnostics.replicas", "must be >= 1")
        need(self.diagnostics_probe_windows >= 1, "diagnostics.probe_windows", "must be >= 1")
        need(self.model_n_levels < cuts.n_bands, "model.n_levels",
             "diagnostics compare levels n and n + 1, so n must be below the band count")
        radii = self.ball_radii()
        need(radii.size >= 2 and np.all(np.diff(radii) < 0), "diagnostics.ball_radii",
             "need at least two strictly decreasing radii")
        need(radii[-1] >= 2 * grid.h, "diagnostics.ball_radii", "radii must be >= two cell widths")
        c = np.asarray(self.point("diagnostics.ball_center", self.diagnostics_ball_center))
        o = np.asarray(grid.origin)
        need(np.all(c - radii[0] >= o) and np.all(c + radii[0] <= o + grid.side),
             "diagnostics.ball_radii", "the largest ball leaves the window")
        need(self.diagnostics_n_boot >= 1, "diagnostics.n_boot", "must be >= 1")
        inside("diagnostics.revuz_start", self.diagnostics_revuz_start)
        times = self.diagnostics_revuz_times
        need(len(times) >= 1 and all(t > 0 for t in times), "diagnostics.revuz_times",
             "need positive times")
        dt = self.diagnostics_revuz_dt
        need(dt > 0 and all(abs(t / dt - round(t / dt)) < 1e-9 for t in times),
             "diagnostics.revuz_dt", "every revuz time must be a multiple of revuz_dt")
        need(self.diagnostics_revuz_paths >= 2, "diagnostics.revuz_paths", "must be >= 2")
        need(0 <= self.run_master_seed < 2 ** 64, "run.master_seed", "must lie in [0, 2**64)")
        return self


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    kinds = {(s, k): kind for s, k, kind, _, _ in SCHEMA}
    values = ExperimentConfig().values
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if (section, key) not in kinds:
                raise ConfigError(f"{section}.{key}: unknown key")
            try:
                values[_attr(section, key)] = _PARSERS[kinds[section, key]](raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from None
    return ExperimentConfig(values)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    current = None
    for section, key, kind, _, doc in SCHEMA:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"# {doc}")
        lines.append(f"{key} = {_format(kind, cfg.values[_attr(section, key)])}")
    return "\n".join(lines) + "\n"


def schema_text() -> str:
    """The default config, which documents every key."""
    return dumps(ExperimentConfig())


__all__ = ["ExperimentConfig", "SCHEMA", "parse", "load", "dumps", "schema_text"]
