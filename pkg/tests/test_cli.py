import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lbm import config as cfgmod, io
from lbm.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, OUTPUT_ROOT_ENV, main
from lbm.errors import ConfigError
from lbm.gmc import derive_seed

CHEAP = """\
[grid]
cells = 16
padding = 12

[model]
n_levels = 2
"""


def write_cfg(tmp_path, text, name="c.ini"):
    f = tmp_path / name
    f.write_text(text)
    return str(f)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# config


finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(st.fixed_dictionaries({
    "model_gamma": st.floats(0.0, 1.99), "model_n_levels": st.integers(1, 7),
    "grid_origin": st.tuples(finite, finite), "grid_side": st.floats(1e-3, 1e3),
    "grid_cells": st.sampled_from([8, 16, 64]), "path_dt": st.sampled_from(["auto", "0.001"]),
    "model_gamma_zero_diagnostic": st.booleans(), "run_master_seed": st.integers(0, 2 ** 64 - 1),
    "diagnostics_revuz_times": st.lists(st.floats(1e-4, 1.0), min_size=1, max_size=4).map(tuple),
    "path_start": st.sampled_from(["center", "0.25, 0.5"]),
}))
def test_config_round_trip(kw):
    cfg = cfgmod.ExperimentConfig().with_values(**kw)
    assert cfgmod.parse(cfgmod.dumps(cfg)) == cfg


def test_empty_config_is_default_and_valid():
    cfg = cfgmod.parse("")
    assert cfg == cfgmod.ExperimentConfig()
    cfg.validate()
    assert cfgmod.parse(cfgmod.schema_text()) == cfg


@pytest.mark.parametrize("text, field", [
    ("[model]\nbogus = 1\n", "model.bogus"),
    ("[nosuch]\n", "[nosuch]"),
    ("[model]\ngamma = abc\n", "model.gamma"),
    ("[model]\ngamma = 2.5\n", "model.gamma"),
    ("[model]\ngamma = 0\n", "model.gamma"),
    ("[model]\nn_levels = 8\n", "model.n_levels"),
    ("[path]\nstart = 5, 5\n", "path.start"),
    ("[path]\ndt = 1.0\n", "path.dt"),
    ("[path]\nclock = wall\n", "path.clock"),
    ("[ensemble]\noccupation_bins = 7\n", "ensemble.occupation_bins"),
    ("[potentials]\nwindow = 2, 2, 3, 3\n", "potentials.window"),
    ("[diagnostics]\nrevuz_times = 0.00012\n", "diagnostics.revuz_dt"),
    ("[diagnostics]\nball_radii = 0.1, 0.2\n", "diagnostics.ball_radii"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace("[", r"\[").replace("]", r"\]")):
        cfgmod.parse(text).validate()


# ---------------------------------------------------------------------------
# subcommands and exit codes


def test_kernels_check_prints_table(tmp_path, capsys):
    assert main(["kernels-check", "--out", str(tmp_path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "seed_kernel" in text and "max rel err" in text
    m = manifest(tmp_path)
    assert m["status"] == 0 and m["checks"] == {"kernel_oracle_gate": True}
    assert set(m["artifacts"]) == {"config.ini", "kernel_gate.csv", "kernel_gate.json"}


def test_manifest_contents(tmp_path):
    out = tmp_path / "f"
    assert main(["sample-field", "--config", write_cfg(tmp_path, CHEAP), "--seed", "9",
                 "--out", str(out)]) == EXIT_OK
    m = manifest(out)
    assert m["config"]["grid"]["cells"] == 16 and m["seeds"]["master"] == 9
    assert {"lbm", "numpy", "scipy", "python"} <= set(m["versions"])
    assert {"started_utc", "wall_time_s", "threads"} <= set(m["runtime"])
    head, data = io.read_lbm1(out / "field.lbm1")
    assert head["kind"] == "field" and head["seed"] == derive_seed(9, 0, 0) and data.shape == (16, 16)
    # the resolved config reproduces the run
    assert cfgmod.load(out / "config.ini").run_master_seed == 9


def test_invalid_config_exits_1(tmp_path, capsys):
    assert main(["sample-field", "--config", write_cfg(tmp_path, "[model]\ngamma = 3\n"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "model.gamma" in capsys.readouterr().err
    assert main(["sample-field", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["sample-field", "--threads", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_failed_numerical_check_exits_2(tmp_path):
    # a torus two windows wide cannot embed the band covariance
    cfg = write_cfg(tmp_path, "[grid]\ncells = 16\npadding = 2\n")
    out = tmp_path / "o"
    assert main(["sample-field", "--config", cfg, "--out", str(out)]) == EXIT_CHECK
    assert "EmbeddingError" in manifest(out)["error"]


def test_runtime_error_exits_3(tmp_path):
    cfg = write_cfg(tmp_path, CHEAP + "\n[path]\nhorizon = 1.0\n")
    out = tmp_path / "o"
    assert main(["simulate-lbm", "--config", cfg, "--out", str(out)]) == EXIT_RUNTIME
    assert "WindowExitError" in manifest(out)["error"]


def test_output_root_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["kernels-check"]) == EXIT_OK
    assert (tmp_path / "root" / "kernels-check" / "manifest.json").exists()


def test_show_config(capsys):
    assert main(["show-config", "--seed", "5"]) == EXIT_OK
    cfg = cfgmod.parse(capsys.readouterr().out)
    assert cfg.run_master_seed == 5


def test_gamma_zero_lbm_equals_bm(tmp_path):
    out = tmp_path / "g0"
    assert main(["simulate-lbm", "--gamma-zero-diagnostic", "--out", str(out)]) == EXIT_OK
    assert (out / "lbm_path.lbm1").read_bytes() == (out / "bm_path.lbm1").read_bytes()
    assert (out / "lbm_path.csv").read_bytes() == (out / "bm_path.csv").read_bytes()
    _, pcaf = io.read_csv(out / "pcaf.csv")
    assert np.array_equal(pcaf[:, 0], pcaf[:, 1])


def test_gamma_zero_measure_is_lebesgue(tmp_path):
    out = tmp_path / "m0"
    assert main(["build-measure", "--gamma-zero-diagnostic", "--config",
                 write_cfg(tmp_path, CHEAP), "--out", str(out)]) == EXIT_OK
    _, mass = io.read_lbm1(out / "measure.lbm1")
    assert np.allclose(mass, 1 / 256, rtol=1e-15, atol=0)


def test_potentials_checks(tmp_path):
    out = tmp_path / "p"
    assert main(["potentials", "--config", write_cfg(tmp_path, CHEAP), "--out", str(out)]) == EXIT_OK
    m = manifest(out)
    assert m["checks"] == {"bound_verified": True, "domination": True, "finite_energy": True}
    rep = json.loads((out / "potentials.json").read_text())
    assert math.isfinite(rep["energy"]["double_integral"])


def test_rerun_and_threads_are_deterministic(tmp_path):
    cfg = write_cfg(tmp_path, CHEAP + "\n[ensemble]\npaths_per_env = 8\npermutations = 9\n")
    out = tmp_path / "e"
    hashes = []
    for threads in ("1", "2", "1"):
        assert main(["ensemble", "--config", cfg, "--out", str(out), "--threads", threads]) == 0
        m = manifest(out)
        m.pop("runtime")
        hashes.append(m)
    assert hashes[0] == hashes[1] == hashes[2]
