import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflab.errors import ConfigError, InvalidMeasure
from mflab.flow import FlowConfig, run_flow
from mflab.measures import DataMeasure, ParameterPath
from mflab.model import make_model
from mflab.storage import (
    MAGIC,
    TRACE_COLUMNS,
    load_path_json,
    load_snapshot,
    path_from_json,
    read_trace_csv,
    save_path_json,
    save_snapshot,
    snapshot_bytes,
    snapshot_from_bytes,
    trace_to_csv,
    write_trace_csv,
)


def random_path(rng, L=3, N=4, m=2):
    w = rng.dirichlet(np.ones(N), size=L)
    grid = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, L - 1)), [1.0]])
    return ParameterPath(rng.standard_normal((L, N, m)), w, grid)


def assert_same_path(a, b):
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.layer_grid, b.layer_grid)


def test_json_round_trip(rng, tmp_path):
    path = random_path(rng)
    save_path_json(path, tmp_path / "p.json")
    assert_same_path(load_path_json(tmp_path / "p.json"), path)


def test_json_rejects_malformed():
    with pytest.raises(InvalidMeasure):
        path_from_json({"layers": []})
    with pytest.raises(InvalidMeasure):
        path_from_json({"layer_grid": [0, 0.5, 1],
                        "layers": [{"points": [[0.0]], "weights": [1.0]},
                                   {"points": [[0.0], [1.0]], "weights": [0.5, 0.5]}]})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_binary_round_trip_is_bit_exact(L, N, m, seed):
    path = random_path(np.random.default_rng(seed), L, N, m)
    buf = snapshot_bytes(path)
    assert buf[:4] == MAGIC
    assert len(buf) == 20 + 8 * (L + 1 + L * N * m + L * N)
    assert_same_path(snapshot_from_bytes(buf), path)


def test_binary_header_layout(rng, tmp_path):
    path = random_path(rng, 2, 3, 4)
    save_snapshot(path, tmp_path / "s.mflb")
    raw = (tmp_path / "s.mflb").read_bytes()
    assert struct.unpack_from("<4s4I", raw) == (b"MFLB", 1, 2, 3, 4)
    assert np.frombuffer(raw, "<f8", count=3, offset=20).tolist() == path.layer_grid.tolist()
    assert_same_path(load_snapshot(tmp_path / "s.mflb"), path)


def test_binary_rejects_corruption(rng):
    buf = snapshot_bytes(random_path(rng))
    with pytest.raises(InvalidMeasure, match="magic"):
        snapshot_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(InvalidMeasure, match="version"):
        snapshot_from_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(InvalidMeasure, match="bytes"):
        snapshot_from_bytes(buf[:-8])
    with pytest.raises(InvalidMeasure):
        snapshot_from_bytes(buf[:10])


def small_trace(rng):
    model = make_model("linear-tanh", 1)
    path = ParameterPath(0.5 * rng.standard_normal((2, 3, model.m)))
    data = DataMeasure([[0.3], [-0.7]], [[0.1], [0.2]])
    return run_flow(model, path, data, FlowConfig(dtau=0.1, tau_max=1.0))


def test_csv_round_trip_is_bit_exact(rng, tmp_path):
    trace = small_trace(rng)
    write_trace_csv(trace, tmp_path / "t.csv")
    back = read_trace_csv(tmp_path / "t.csv")
    assert len(back.records) == len(trace.records)
    for a, b in zip(trace.records, back.records):
        for c in TRACE_COLUMNS:
            assert getattr(a, c) == getattr(b, c) or (np.isnan(getattr(a, c)) and np.isnan(getattr(b, c)))


def test_csv_layout(rng):
    text = trace_to_csv(small_trace(rng))
    lines = text.split("\r\n")
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert lines[-1] == ""
    assert "\n" not in text.replace("\r\n", "")
    first = lines[1].split(",")
    assert first[0] == "0" and first[-1] == "1"
    assert all(v == "%.17g" % float(v) for v in first)


@pytest.mark.parametrize("content, match", [("", "empty"), ("tau,J\r\n0,1\r\n", "lacks"),
                                             ("tau,J,slope\r\n0,1\r\n", "fields"),
                                             ("tau,J,slope\r\n0,x,1\r\n", "could not convert"),
                                             ("tau,J,slope\r\n", "no data")])
def test_csv_rejects_bad_files(tmp_path, content, match):
    f = tmp_path / "bad.csv"
    f.write_text(content)
    with pytest.raises(ConfigError, match=match):
        read_trace_csv(f)
    with pytest.raises(ConfigError):
        read_trace_csv(tmp_path / "missing.csv")


def test_csv_minimal_columns(tmp_path):
    f = tmp_path / "min.csv"
    f.write_text("tau,J,slope\n0,2,1\n1,1.5,0.5\n")
    trace = read_trace_csv(f)
    assert trace.tau.tolist() == [0.0, 1.0] and trace.J.tolist() == [2.0, 1.5]
    assert all(r.accepted for r in trace.records)
