"""Export formats: the ``LBM1`` binary grid/path format, CSV and JSON.

``LBM1`` layout (little-endian)::

    magic    4s   b"LBM1"
    version  u16  1
    kind     u16  0 field, 1 measure, 2 path, 3 potential
    rows     u32
    cols     u32
    gamma    f64
    n        u32  regularization level
    seed     u64  master seed (2**64 - 1 when absent)
    origin   2 x f64
    side     f64  window side (NaN for paths)
    data     rows * cols f64, row-major

Grids are stored with rows along ``x``; paths as rows ``(t, x, y)``.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LBM1"
VERSION = 1
KINDS = {"field": 0, "measure": 1, "path": 2, "potential": 3}
_HEADER = struct.Struct("<4sHHIIdIQddd")
_NO_SEED = 2 ** 64 - 1


def write_lbm1(path, data, kind: str, gamma: float = 0.0, n: int = 0, seed=None,
               origin=(math.nan, math.nan), side: float = math.nan) -> None:
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.ndim != 2:
        raise ValueError("LBM1 stores two-dimensional arrays")
    rows, cols = data.shape
    header = _HEADER.pack(MAGIC, VERSION, KINDS[kind], rows, cols, float(gamma), int(n),
                          _NO_SEED if seed is None else int(seed),
                          float(origin[0]), float(origin[1]), float(side))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_lbm1(path) -> tuple:
    """Return ``(header dict, array)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an LBM1 file")
    magic, version, kind, rows, cols, gamma, n, seed, ox, oy, side = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported LBM1 version {version}")
    names = {v: k for k, v in KINDS.items()}
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated data section")
    header = {"version": version, "kind": names[kind], "rows": rows, "cols": cols,
              "gamma": gamma, "n": n, "seed": None if seed == _NO_SEED else seed,
              "origin": (ox, oy), "side": side}
    return header, data.reshape(rows, cols).copy()


def write_grid_lbm1(path, grid, values, kind: str, gamma: float, n: int, seed=None) -> None:
    write_lbm1(path, values, kind, gamma, n, seed, grid.origin, grid.side)


def path_table(times, positions) -> np.ndarray:
    return np.column_stack([np.asarray(times), np.asarray(positions)])


def write_path_lbm1(path, times, positions, gamma: float, n: int, seed=None) -> None:
    write_lbm1(path, path_table(times, positions), "path", gamma, n, seed)


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(path, header: list, rows) -> None:
    """Floats are written with ``repr`` so they round-trip exactly."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_grid_csv(path, grid, values) -> None:
    X, Y = grid.centers()
    write_csv(path, ["x", "y", "value"],
              zip(X.ravel().tolist(), Y.ravel().tolist(), np.asarray(values).ravel().tolist()))


def write_points_csv(path, points, values) -> None:
    pts = np.asarray(points).reshape(-1, 2)
    write_csv(path, ["x", "y", "value"],
              zip(pts[:, 0].tolist(), pts[:, 1].tolist(), np.asarray(values).ravel().tolist()))


def write_path_csv(path, times, positions) -> None:
    write_csv(path, ["t", "x", "y"], path_table(times, positions).tolist())


def read_csv(path) -> tuple:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return header, data


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def grid_to_dict(grid) -> dict:
    return {"origin": list(grid.origin), "side": grid.side,
            "cells_per_side": grid.cells_per_side, "padding_factor": grid.padding_factor}


def window_to_dict(mask) -> dict:
    """Cell union as row spans ``[i, j_start, j_stop)``."""
    mask = np.asarray(mask, dtype=bool)
    spans = []
    for i, row in enumerate(mask):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        spans.extend([i, int(a), int(b)] for a, b in zip(edges[::2], edges[1::2]))
    return {"shape": list(mask.shape), "row_spans": spans, "cells": int(mask.sum())}


def window_from_dict(d: dict) -> np.ndarray:
    mask = np.zeros(tuple(d["shape"]), dtype=bool)
    for i, a, b in d["row_spans"]:
        mask[i, a:b] = True
    return mask


def potential_to_csv(path, pf) -> None:
    write_points_csv(path, pf.points, pf.values)


def potential_to_dict(pf) -> dict:
    v = np.asarray(pf.values)
    return {"kind": pf.kind, "source": pf.source, "shape": list(v.shape),
            "min": float(v.min()), "max": float(v.max()), "values": v.tolist()}
