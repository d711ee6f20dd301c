"""File formats: the ``PPDE`` binary container, RFC-4180 CSV, JSON reports and atomic writes.

Binary layout (little endian)::

    b"PPDE"  version:u32  kind:u32  <kind-specific header>  <f64 body>

kind 1 (path ensemble)
    n_paths:u64 n_times:u64 dim:u64 flags:u32 s:f64 seed:u64 times[n_times] x[dim],
    then paths, driving increments and (flag bit 0) scale paths, each path-major.
kind 2 (grid function)
    dim:u64 method:u32 n_times:u64 sizes[dim]:u64 times axes... values (C order).
kind 3 (BSDE solution)
    n_paths:u64 n_times:u64 dim:u64 start:u64 times, then Y, Z and M increments path-major.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import io as _io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .forward_models import PathEnsemble, TimeGrid
from .operators import GridFunction

MAGIC = b"PPDE"
VERSION = 1
KIND_ENSEMBLE, KIND_GRID_FUNCTION, KIND_BSDE = 1, 2, 3
_METHODS = {"linear": 0, "cubic": 1}
_F64 = np.dtype("<f8")


def atomic_write(path, data):
    """Write ``data`` (bytes or str) to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ---------------------------------------------------------------------------
# binary


def _header(kind, fmt, *values):
    return MAGIC + struct.pack("<II", VERSION, kind) + struct.pack("<" + fmt, *values)


def _f64(arr):
    return np.ascontiguousarray(arr, dtype=_F64).tobytes()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise ConfigurationError("truncated PPDE file")
        out = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, shape):
        count = int(np.prod(shape))
        end = self.pos + 8 * count
        if end > len(self.data):
            raise ConfigurationError("truncated PPDE file")
        out = np.frombuffer(self.data[self.pos:end], dtype=_F64).astype(float).reshape(shape)
        self.pos = end
        return out


def _open(data, kind):
    if bytes(data[:4]) != MAGIC:
        raise ConfigurationError("not a PPDE file")
    reader = _Reader(data)
    reader.pos = 4
    version, found = reader.unpack("II")
    if version != VERSION:
        raise ConfigurationError(f"unsupported PPDE version {version}")
    if found != kind:
        raise ConfigurationError(f"PPDE file holds kind {found}, expected {kind}")
    return reader


def ensemble_to_bytes(ens):
    n, n_times, d = ens.paths.shape
    flags = 1 if ens.scale_paths is not None else 0
    parts = [_header(KIND_ENSEMBLE, "QQQIdQ", n, n_times, d, flags, float(ens.s),
                     int(ens.seed) % 2**64),
             _f64(ens.grid.times), _f64(ens.x), _f64(ens.paths), _f64(ens.brownian_increments)]
    if flags:
        parts.append(_f64(ens.scale_paths))
    return b"".join(parts)


def ensemble_from_bytes(data, model=None):
    r = _open(data, KIND_ENSEMBLE)
    n, n_times, d, flags, s, seed = r.unpack("QQQIdQ")
    times = r.array((n_times,))
    x = r.array((d,))
    paths = r.array((n, n_times, d))
    incs = r.array((n, n_times - 1, d))
    scale = r.array((n, n_times)) if flags & 1 else None
    return PathEnsemble(TimeGrid(times), s, x, paths, incs, seed, scale, model)


def grid_function_to_bytes(gf):
    sizes = [a.size for a in gf.axes]
    head = _header(KIND_GRID_FUNCTION, "QIQ" + "Q" * gf.dim, gf.dim, _METHODS[gf.method],
                   gf.times.size, *sizes)
    return b"".join([head, _f64(gf.times)] + [_f64(a) for a in gf.axes] + [_f64(gf.values)])


def grid_function_from_bytes(data):
    r = _open(data, KIND_GRID_FUNCTION)
    dim, method, n_times = r.unpack("QIQ")
    sizes = r.unpack("Q" * dim)
    times = r.array((n_times,))
    axes = tuple(r.array((k,)) for k in sizes)
    values = r.array((n_times,) + tuple(sizes))
    name = {v: k for k, v in _METHODS.items()}[method]
    return GridFunction(times, axes, values, name)


def bsde_to_bytes(sol):
    n, n_times = sol.Y.shape
    return b"".join([
        _header(KIND_BSDE, "QQQQ", n, n_times, sol.dim, sol.start_index),
        _f64(sol.grid.times), _f64(sol.Y), _f64(sol.Z), _f64(sol.M_increments),
    ])


def bsde_from_bytes(data):
    """Arrays of a stored BSDE solution: ``times, start_index, Y, Z, M_increments``."""
    r = _open(data, KIND_BSDE)
    n, n_times, d, start = r.unpack("QQQQ")
    times = r.array((n_times,))
    return {
        "times": times,
        "start_index": start,
        "Y": r.array((n, n_times)),
        "Z": r.array((n, n_times - 1, d)),
        "M_increments": r.array((n, n_times - 1)),
    }


# ---------------------------------------------------------------------------
# text formats


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return value


def csv_text(header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def json_text(obj):
    """Deterministic JSON; non-finite numbers become ``null``."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def pair_csv(pair):
    """Rows ``s, x (or x_1..x_d), u, v_1..v_d`` over every grid node."""
    u = pair.u
    nodes = u.nodes()
    d = u.dim
    xcols = ["x"] if d == 1 else [f"x_{i + 1}" for i in range(d)]
    header = ["s"] + xcols + ["u"] + [f"v_{i + 1}" for i in range(pair.dim)]
    rows = []
    flat_v = [v.values.reshape(u.times.size, -1) for v in pair.v]
    flat_u = u.values.reshape(u.times.size, -1)
    for a, s in enumerate(u.times):
        for b, x in enumerate(nodes):
            rows.append([float(s)] + [float(c) for c in x] + [float(flat_u[a, b])]
                        + [float(v[a, b]) for v in flat_v])
    return csv_text(header, rows)


def residual_plot_csv(report):
    """Long-format residual table for plotting: one row per (point, line)."""
    rows = []
    for p, rec in enumerate(report.records):
        for line, (res, se, ok) in enumerate(zip(rec.residuals, rec.standard_errors, rec.passed)):
            rows.append([p, rec.s] + [", ".join(repr(v) for v in rec.x)]
                        + [line + 1, res, se, "pass" if ok else "fail"])
    return csv_text(["point", "s", "x", "line", "residual", "se", "status"], rows)


def write_manifest(out_dir, files, command, extra=None):
    """Sidecar ``manifest.json`` with the run timestamp and a digest per output file."""
    out_dir = Path(out_dir)
    entries = {}
    for f in files:
        p = Path(f)
        entries[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": entries,
    }
    if extra:
        manifest.update(extra)
    return atomic_write(out_dir / "manifest.json", json_text(manifest))
