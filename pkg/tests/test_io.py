import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lbm import io
from lbm.gmc import GridSpec


def test_lbm1_round_trip(tmp_path):
    grid = GridSpec(origin=(0.5, -1.0), side=2.0, cells_per_side=8)
    vals = np.random.default_rng(0).standard_normal(grid.shape)
    f = tmp_path / "g.lbm1"
    io.write_grid_lbm1(f, grid, vals, "measure", 0.75, 5, seed=123)
    head, data = io.read_lbm1(f)
    assert np.array_equal(data, vals)
    assert head == {"version": 1, "kind": "measure", "rows": 8, "cols": 8, "gamma": 0.75,
                    "n": 5, "seed": 123, "origin": (0.5, -1.0), "side": 2.0}


def test_lbm1_layout_is_little_endian_fixed_header(tmp_path):
    f = tmp_path / "p.lbm1"
    io.write_path_lbm1(f, [0.0, 0.5], [[1.0, 2.0], [3.0, 4.0]], 0.0, 0)
    raw = f.read_bytes()
    assert raw[:4] == b"LBM1"
    assert struct.unpack_from("<HHII", raw, 4) == (1, 2, 2, 3)
    size = struct.calcsize("<4sHHIIdIQddd")
    assert len(raw) == size + 6 * 8
    assert struct.unpack_from("<6d", raw, size) == (0.0, 1.0, 2.0, 0.5, 3.0, 4.0)
    head, _ = io.read_lbm1(f)
    assert head["seed"] is None and math.isnan(head["side"])


def test_lbm1_rejects_bad_files(tmp_path):
    f = tmp_path / "x.lbm1"
    io.write_lbm1(f, np.zeros((2, 2)), "field")
    raw = f.read_bytes()
    (tmp_path / "magic.lbm1").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.lbm1").write_bytes(raw[:-8])
    (tmp_path / "ver.lbm1").write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    for name in ("magic", "short", "ver"):
        with pytest.raises(ValueError):
            io.read_lbm1(tmp_path / f"{name}.lbm1")
    with pytest.raises(ValueError):
        io.write_lbm1(f, np.zeros(3), "field")


@given(arrays(np.float64, (5, 3), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_csv_round_trip_is_exact(tmp_path_factory, a):
    f = tmp_path_factory.mktemp("csv") / "a.csv"
    io.write_csv(f, ["a", "b", "c"], a.tolist())
    header, back = io.read_csv(f)
    assert header == ["a", "b", "c"]
    assert np.array_equal(back, a)


def test_grid_and_path_csv_columns(tmp_path):
    grid = GridSpec(cells_per_side=4)
    io.write_grid_csv(tmp_path / "g.csv", grid, np.arange(16.0).reshape(4, 4))
    header, data = io.read_csv(tmp_path / "g.csv")
    assert header == ["x", "y", "value"] and data.shape == (16, 3)
    assert data[1].tolist() == [0.125, 0.375, 1.0]
    io.write_path_csv(tmp_path / "p.csv", [0.0, 1.0], [[0.0, 0.0], [1.0, -1.0]])
    header, data = io.read_csv(tmp_path / "p.csv")
    assert header == ["t", "x", "y"] and data[1].tolist() == [1.0, 1.0, -1.0]


def test_json_is_sorted_and_handles_numpy():
    text = io.dumps({"b": np.float64(1.5), "a": np.arange(3), "c": (np.int64(2), np.bool_(True))})
    assert text.endswith("\n")
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": [2, True]}
    with pytest.raises(TypeError):
        io.dumps({"x": object()})


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_window_dict_round_trip(mask):
    d = io.window_to_dict(mask)
    assert d["cells"] == int(mask.sum())
    assert np.array_equal(io.window_from_dict(json.loads(io.dumps(d))), mask)
