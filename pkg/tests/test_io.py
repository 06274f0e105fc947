import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochastic_cs import io
from stochastic_cs.engine import StepConfig, TrajectoryRecord, init_uniform, simulate
from stochastic_cs.model import KernelSpec, ModelParams


def test_single_particle_two_snapshots(tmp_path):
    p = ModelParams(1.0, 0.5, n=1, dim=1)
    rec = TrajectoryRecord(np.array([0.0, 0.1]), np.array([[[1.0]], [[0.9]]]), np.array([[[0.0]], [[-0.1]]]), 5, p)
    path = tmp_path / "traj.csv"
    io.write_trajectory(rec, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,particle,x1,v1"
    assert len(lines) == 3
    assert lines[2] == "0.1,0,0.9,-0.1"


def test_trajectory_round_trip_exact(tmp_path):
    p = ModelParams(1.3, 0.4, KernelSpec.algebraic_quarter(), n=5, dim=3)
    rec = simulate(init_uniform(5, 3, 2.0, 1), p, StepConfig(0.01, 0.2, record_every=3, seed=8))
    path = tmp_path / "t.csv"
    written = io.write_trajectory(rec, path, {"S": 1.5})
    assert [w.name for w in written] == ["t.csv", "t.json"]
    assert io.read_trajectory(path, p, rec.noise_seed) == rec
    side = json.loads((tmp_path / "t.json").read_text())
    assert side["seed"] == 8 and side["snapshots"] == len(rec) and side["final_diagnostics"] == {"S": 1.5}
    assert side["params"]["kernel"] == "algebraic-quarter"


@settings(max_examples=50)
@given(arrays(float, (6, 3), elements=st.floats(allow_nan=False, allow_infinity=True, width=64)))
def test_table_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("tab") / "a.csv"
    tab = io.Table(("t", "a", "b"), rows)
    io.write_table(tab, path)
    assert io.read_table(path) == tab


def test_int_columns_written_as_ints(tmp_path):
    io.write_table(io.Table(("n", "err"), [[8, 0.5]]), tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "8,0.5"


def test_diagnostics_columns():
    tab = io.diagnostics_table([[0.0, 1.0, 2.0, -1.0, 0.5, 0.4]])
    assert tab.columns == ("t", "S", "lyapunov_V", "generator_LV", "L_std", "L_tilde")


def test_json_nonfinite_and_numpy():
    text = io.dumps({"b": np.float64(np.inf), "a": np.int64(3), "c": np.array([1.0, np.nan]), "k": KernelSpec.constant(2.0)})
    back = json.loads(text)
    assert back == {"a": 3, "b": "inf", "c": [1.0, "nan"], "k": "constant:2.0"}
    assert text.index('"a"') < text.index('"b"')


def test_manifest_deterministic(tmp_path):
    io.write_text("hello\n", tmp_path / "x.txt")
    io.write_text("world\n", tmp_path / "sub" / "y.txt")
    files = [tmp_path / "sub" / "y.txt", tmp_path / "x.txt"]
    io.write_manifest(tmp_path, files, {"seed": 1}, timestamp="2020-01-01T00:00:00+00:00")
    first = (tmp_path / "manifest.json").read_bytes()
    io.write_manifest(tmp_path, files[::-1], {"seed": 1}, timestamp="2099-01-01T00:00:00+00:00")
    assert (tmp_path / "manifest.json").read_bytes() == first
    m = json.loads(first)
    assert sorted(m["files"]) == ["sub/y.txt", "x.txt"]
    assert m["files"]["x.txt"] == io.sha256(tmp_path / "x.txt")
    assert "timestamp" not in m
    assert json.loads((tmp_path / "run_info.json").read_text())["timestamp"].startswith("2099")


def test_unwritable_path_raises_output_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(io.OutputError, match="file"):
        io.write_text("x", blocker / "inside.txt")
