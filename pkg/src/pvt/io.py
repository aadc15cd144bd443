"""File formats: point clouds, tensor dumps, checkpoints, box lists and flat configs.

Tensor dump::

    shape: 2 3
    0.10000000000000001
    ...

one value per line in row-major order, 17 significant digits, so a dump
round-trips every float64 exactly. A checkpoint is a sequence of dumps, each
preceded by a ``name: <parameter name>`` line.

Binary point files hold a little-endian uint64 point count m, a uint64
feature count f, then m*f little-endian float64 values row by row.
"""

from __future__ import annotations

import csv
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .scenes import Box2D

PathLike = str | os.PathLike


class FormatError(ValueError):
    """A file does not follow its documented layout."""


# ----------------------------------------------------------------------------
# points


def point_header(f: int) -> list[str]:
    return ["x", "y", "z", "i"][:f] + [f"f{k}" for k in range(4, f)]


def write_points_csv(path: PathLike, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(point_header(points.shape[1]))
        for row in points:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path: PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: expected header starting x,y,z")
    f = len(rows[0])
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value") from exc
    return data.reshape(-1, f)


def write_points_bin(path: PathLike, points: np.ndarray) -> None:
    points = np.ascontiguousarray(points, dtype="<f8")
    m, f = points.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", m, f))
        fh.write(points.tobytes())


def read_points_bin(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    m, f = struct.unpack("<QQ", raw[:16])
    if len(raw) != 16 + 8 * m * f:
        raise FormatError(f"{path}: expected {m}x{f} values, file has {(len(raw) - 16) // 8}")
    return np.frombuffer(raw, dtype="<f8", offset=16).astype(np.float64).reshape(m, f)


# ----------------------------------------------------------------------------
# tensors and checkpoints


def dump_tensor(arr: np.ndarray) -> str:
    arr = np.asarray(arr, dtype=np.float64)
    lines = ["shape: " + " ".join(str(d) for d in arr.shape)]
    lines += [f"{v:.17g}" for v in arr.reshape(-1)]
    return "\n".join(lines) + "\n"


def _parse_dump(lines: list[str], start: int) -> tuple[np.ndarray, int]:
    head = lines[start]
    if not head.startswith("shape:"):
        raise FormatError(f"line {start + 1}: expected 'shape:' header, got {head!r}")
    shape = tuple(int(t) for t in head[len("shape:"):].split())
    n = int(np.prod(shape)) if shape else 1
    vals = lines[start + 1:start + 1 + n]
    if len(vals) != n:
        raise FormatError(f"tensor of shape {shape} needs {n} values, found {len(vals)}")
    return np.array([float(v) for v in vals], dtype=np.float64).reshape(shape), start + 1 + n


def load_tensor(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    arr, end = _parse_dump(lines, 0)
    if end != len(lines):
        raise FormatError("trailing values after tensor")
    return arr


def save_checkpoint(path: PathLike, named: Iterable[tuple[str, object]]) -> None:
    with open(path, "w") as fh:
        for name, t in named:
            data = getattr(t, "data", t)
            fh.write(f"name: {name}\n")
            fh.write(dump_tensor(data))


def load_checkpoint(path: PathLike) -> dict[str, np.ndarray]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    out: dict[str, np.ndarray] = {}
    i = 0
    while i < len(lines):
        if not lines[i].startswith("name:"):
            raise FormatError(f"{path}: line {i + 1}: expected 'name:'")
        name = lines[i][len("name:"):].strip()
        out[name], i = _parse_dump(lines, i + 1)
    return out


# ----------------------------------------------------------------------------
# boxes


BOX_FIELDS = ["class", "cx", "cy", "w", "l", "heading"]


def write_boxes_csv(path: PathLike, boxes: Iterable[Box2D]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOX_FIELDS)
        for b in boxes:
            w.writerow([b.class_id] + [repr(float(v)) for v in (b.cx, b.cy, b.w, b.l, b.heading)])


def read_boxes_csv(path: PathLike) -> list[Box2D]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != BOX_FIELDS:
        raise FormatError(f"{path}: expected header {','.join(BOX_FIELDS)}")
    return [Box2D(float(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]), int(r[0]))
            for r in rows[1:] if r]


# ----------------------------------------------------------------------------
# flat key=value configs


def parse_kv_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv_file(path: PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv_lines(fh, str(path))


def write_kv_file(path: PathLike, values: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(values):
            v = values[k]
            v = ("true" if v else "false") if isinstance(v, bool) else v
            fh.write(f"{k}={v}\n")
