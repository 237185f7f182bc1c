"""On-disk formats: JSON parameter paths, binary snapshots and trace CSV files.

Binary snapshot layout (all little-endian)::

    b"MFLB"  u32 version  u32 L  u32 N  u32 m
    f64[L+1]      layer grid
    f64[L*N*m]    particle positions, C order
    f64[L*N]      particle weights

CSV traces follow RFC 4180 with every real printed to 17 significant digits,
so a value read back is bit-identical to the value written.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from mflab.errors import ConfigError, InvalidMeasure
from mflab.flow import FlowRecord, FlowTrace
from mflab.measures import ParameterPath

__all__ = [
    "MAGIC",
    "SNAPSHOT_VERSION",
    "TRACE_COLUMNS",
    "path_to_json",
    "path_from_json",
    "save_path_json",
    "load_path_json",
    "snapshot_bytes",
    "snapshot_from_bytes",
    "save_snapshot",
    "load_snapshot",
    "format_real",
    "trace_to_csv",
    "write_trace_csv",
    "read_trace_csv",
]

MAGIC = b"MFLB"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4s4I")

TRACE_COLUMNS = ("tau", "J", "L", "reg", "slope", "support_radius", "dirichlet",
                 "step_size", "accepted")


def path_to_json(path: ParameterPath) -> dict:
    return {
        "layer_grid": path.layer_grid.tolist(),
        "layers": [{"points": path.points[k].tolist(), "weights": path.weights[k].tolist()}
                   for k in range(path.n_layers)],
    }


def path_from_json(obj: dict) -> ParameterPath:
    try:
        grid = np.asarray(obj["layer_grid"], dtype=float)
        layers = obj["layers"]
        points = np.asarray([layer["points"] for layer in layers], dtype=float)
        weights = np.asarray([layer["weights"] for layer in layers], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidMeasure(f"malformed path document: {exc}") from exc
    if points.ndim != 3:
        raise InvalidMeasure("every layer needs the same number of particles of the same dimension")
    return ParameterPath(points, weights, grid)


def save_path_json(path: ParameterPath, file) -> None:
    Path(file).write_text(json.dumps(path_to_json(path)))


def load_path_json(file) -> ParameterPath:
    return path_from_json(json.loads(Path(file).read_text()))


def snapshot_bytes(path: ParameterPath) -> bytes:
    L, N, m = path.points.shape
    return b"".join([
        _HEADER.pack(MAGIC, SNAPSHOT_VERSION, L, N, m),
        path.layer_grid.astype("<f8").tobytes(),
        path.points.astype("<f8").tobytes(),
        path.weights.astype("<f8").tobytes(),
    ])


def snapshot_from_bytes(buf: bytes) -> ParameterPath:
    if len(buf) < _HEADER.size:
        raise InvalidMeasure("snapshot is shorter than its header")
    magic, version, L, N, m = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise InvalidMeasure(f"bad snapshot magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise InvalidMeasure(f"unsupported snapshot version {version}")
    sizes = (L + 1, L * N * m, L * N)
    expected = _HEADER.size + 8 * sum(sizes)
    if len(buf) != expected:
        raise InvalidMeasure(f"snapshot has {len(buf)} bytes, header implies {expected}")
    flat = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(float)
    grid, points, weights = np.split(flat, np.cumsum(sizes)[:-1])
    return ParameterPath(points.reshape(L, N, m), weights.reshape(L, N), grid)


def save_snapshot(path: ParameterPath, file) -> None:
    Path(file).write_bytes(snapshot_bytes(path))


def load_snapshot(file) -> ParameterPath:
    return snapshot_from_bytes(Path(file).read_bytes())


def format_real(x: float) -> str:
    return "%.17g" % x


def _row(rec: FlowRecord) -> list[str]:
    return [format_real(getattr(rec, c)) for c in TRACE_COLUMNS[:-1]] + [str(int(rec.accepted))]


def trace_to_csv(trace: FlowTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(_row(r) for r in trace.records)
    return buf.getvalue()


def write_trace_csv(trace: FlowTrace, file) -> None:
    with open(file, "w", newline="") as fh:
        fh.write(trace_to_csv(trace))


def read_trace_csv(file) -> FlowTrace:
    """Parse a trace CSV; raises :class:`ConfigError` when it is empty or malformed."""
    try:
        with open(file, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read trace {file}: {exc}") from exc
    if not rows:
        raise ConfigError(f"trace {file} is empty")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in ("tau", "J", "slope") if c not in header]
    if missing:
        raise ConfigError(f"trace {file} lacks columns {missing}")
    col = {name: header.index(name) for name in header}
    trace = FlowTrace()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ConfigError(f"{file}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = {c: (float(row[col[c]]) if c in col else float("nan"))
                    for c in TRACE_COLUMNS[:-1]}
            accepted = bool(int(row[col["accepted"]])) if "accepted" in col else True
        except ValueError as exc:
            raise ConfigError(f"{file}:{lineno}: {exc}") from exc
        trace.records.append(FlowRecord(**vals, accepted=accepted))
    if not trace.records:
        raise ConfigError(f"trace {file} has no data rows")
    trace.steps = len(trace.records) - 1
    return trace
