"""Binary export format for 2-D float maps and named-tensor records.

A map file is a one-line JSON header ``{"h": int, "w": int, "c": int}``
followed by a newline and ``h*w*c`` little-endian float32 values in
C order with shape ``(c, h, w)``. Named records (used by checkpoints)
replace the header with ``{"name": str, "shape": [int, ...]}`` and carry
an arbitrary-rank tensor.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_map(path, values) -> None:
    """Write a (h, w) or (c, h, w) array as a map file."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"map must be 2-D or 3-D, got shape {arr.shape}")
    c, h, w = arr.shape
    header = json.dumps({"h": h, "w": w, "c": c})
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def read_map(path) -> np.ndarray:
    """Read a map file; returns a float32 array of shape (c, h, w)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("ascii"))
        h, w, c = header["h"], header["w"], header["c"]
        data = np.frombuffer(f.read(4 * h * w * c), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: truncated map payload")
    return data.reshape(c, h, w).copy()


def write_record(f, name: str, values) -> None:
    """Append one named float32 tensor record to an open binary file."""
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float32))
    header = json.dumps({"name": name, "shape": list(arr.shape)})
    f.write(header.encode("ascii") + b"\n")
    f.write(arr.astype("<f4").tobytes())


def read_record(f):
    """Read the next named record; returns (name, array) or None at EOF."""
    line = f.readline()
    if not line:
        return None
    header = json.loads(line.decode("ascii"))
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4")
    if data.size != count:
        raise ValueError(f"record {header['name']!r}: truncated payload")
    return header["name"], data.reshape(shape).copy()


def write_json_line(f, obj) -> None:
    f.write((json.dumps(obj) + "\n").encode("ascii"))


def read_json_line(f):
    return json.loads(f.readline().decode("ascii"))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
