"""Delimited and raster output formats.

CSV files are RFC-4180 style with a header row, '.' decimal separator, and
full round-trip double formatting. PGM rasters are binary P5 with maxval
255, written top row first (highest ey).
"""

from __future__ import annotations

import csv
import json
import platform
import time
from pathlib import Path

import numpy as np


def format_float(x):
    """Shortest decimal string that round-trips the double exactly."""
    return repr(float(x))


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_density_csv(path, density_field):
    """Element densities as ex,ey,rho rows in element order."""
    grid = density_field.grid
    ex, ey = grid.element_xy(np.arange(grid.n_elements))
    rows = zip(ex.tolist(), ey.tolist(), density_field.rho.tolist())
    return write_csv(path, ["ex", "ey", "rho"], rows)


def write_pgm(path, values, lo=None, hi=None):
    """(ny, nx) array with row 0 at the bottom -> binary P5, maxval 255.

    Values are expected in [0, 1]; pass lo/hi to window other fields into
    that range first (used for implicit-field panels).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"PGM export needs a 2D field, got shape {arr.shape}")
    if lo is not None or hi is not None:
        lo = float(arr.min()) if lo is None else lo
        hi = float(arr.max()) if hi is None else hi
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    gray = np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)
    ny, nx = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(gray[::-1, :].tobytes())  # top row first
    return path


def write_density_pgm(path, density_field):
    return write_pgm(path, density_field.as_image())


def read_pgm(path):
    """Inverse of write_pgm, returning the (ny, nx) bottom-up float field."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    magic, nx, ny, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ValueError(f"not a binary PGM: magic {magic!r}")
    img = np.frombuffer(data, dtype=np.uint8, count=nx * ny, offset=pos).reshape(ny, nx)
    return img[::-1, :].astype(float) / float(maxval)


def write_gradient_csv(path, report):
    rows = [(r.param, r.analytic, r.fd, r.rel_err) for r in report.rows]
    return write_csv(path, ["param", "analytic", "fd", "rel_err"], rows)


def write_history_csv(path, history):
    n = len(history.records[0].design) if history.records else 0
    header = ["iter", "objective", "max_constraint", "grad_norm"] + [f"s_{j + 1}" for j in range(n)]
    rows = (
        [rec.iteration, rec.objective, rec.max_constraint, rec.grad_norm] + list(rec.design)
        for rec in history.records
    )
    return write_csv(path, header, rows)


def write_manifest(path, command, inputs, outputs, wall_time_s, extra=None):
    """Run manifest: echoed inputs, versions, wall time, output catalogue."""
    import matplotlib
    import scipy

    from . import __version__

    manifest = {
        "command": command,
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": wall_time_s,
        "versions": {
            "featmap": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "formats": {
            "csv": "RFC-4180 style, header row, '.' decimal separator, round-trip double formatting",
            "pgm": "binary P5, maxval 255, value = round(255*rho), top row = highest ey",
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
