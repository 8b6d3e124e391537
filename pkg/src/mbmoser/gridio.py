"""Grid dumps: the binary MBVF1 layout and a CSV alternative."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidField
from .geometry import GridField, TorusGrid

MAGIC = b"MBVF1"


def encode_mbvf1(field: GridField) -> bytes:
    g = field.grid
    head = MAGIC + struct.pack("<B", g.dim)
    head += struct.pack(f"<{g.dim}I", *g.resolution)
    head += struct.pack(f"<{g.dim}d", *g.period)
    body = np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C")
    return head + body


def decode_mbvf1(data: bytes, role: str = "map-component") -> GridField:
    if data[:5] != MAGIC:
        raise InvalidField("bad MBVF1 magic")
    dim = data[5]
    if dim not in (1, 2):
        raise InvalidField(f"bad dimension byte {dim}")
    off = 6
    res = struct.unpack_from(f"<{dim}I", data, off)
    off += 4 * dim
    per = struct.unpack_from(f"<{dim}d", data, off)
    off += 8 * dim
    n = int(np.prod(res))
    if len(data) - off != 8 * n:
        raise InvalidField("MBVF1 payload length mismatch")
    vals = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(res)
    return GridField(TorusGrid(dim, res, per), vals.astype(float), role)


def encode_csv(field: GridField) -> str:
    g = field.grid
    cols = ["x", "y"][: g.dim] + ["value"]
    pts = g.points()
    vals = field.values.ravel()
    lines = [",".join(cols)]
    for i in range(g.size):
        row = [f"{c:.17g}" for c in pts[:, i]] + [f"{vals[i]:.17g}"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def decode_csv(text: str, grid: TorusGrid, role: str = "map-component") -> GridField:
    rows = [r for r in text.strip().splitlines() if r.strip()]
    header = rows[0].split(",")
    if header != ["x", "y"][: grid.dim] + ["value"]:
        raise InvalidField(f"unexpected CSV header {rows[0]!r}")
    vals = np.array([float(r.split(",")[-1]) for r in rows[1:]])
    if vals.size != grid.size:
        raise InvalidField("CSV row count does not match grid")
    return GridField(grid, vals.reshape(grid.shape), role)


def write_field(path: Path, field: GridField, fmt: str = "bin") -> Path:
    path = Path(path)
    if fmt == "bin":
        path = path.with_suffix(".mbvf")
        path.write_bytes(encode_mbvf1(field))
    elif fmt == "csv":
        path = path.with_suffix(".csv")
        path.write_text(encode_csv(field))
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def read_field(path: Path, grid: TorusGrid = None, role: str = "map-component") -> GridField:
    path = Path(path)
    if path.suffix == ".csv":
        if grid is None:
            raise ValueError("CSV dumps need the grid")
        return decode_csv(path.read_text(), grid, role)
    return decode_mbvf1(path.read_bytes(), role)
