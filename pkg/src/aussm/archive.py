"""Single-file parameter archive: text manifest followed by a raw float64 payload.

Layout::

    AUSSM-ARCHIVE 1
    config <json>
    tensor <name> <dim0,dim1,...> <f8 <offset> <nbytes>
    ...
    ---
    <little-endian IEEE-754 binary64 payload>

Offsets are relative to the start of the payload. A scalar has shape ``-``.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import ContractError

MAGIC = "AUSSM-ARCHIVE 1"
_DTYPE = np.dtype("<f8")


def save_archive(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    lines = [MAGIC, "config " + json.dumps(config or {}, sort_keys=True)]
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if any(c.isspace() for c in name) or not name:
            raise ContractError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.array(tensors[name], dtype=_DTYPE, order="C")  # keeps 0-d shape
        shape = ",".join(map(str, arr.shape)) or "-"
        lines.append(f"tensor {name} {shape} {_DTYPE.str} {offset} {arr.nbytes}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("---")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            fh.write(b)


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(config, tensors)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"\n---\n")
    if end < 0:
        raise ContractError("archive manifest terminator not found")
    header = data[:end].decode().split("\n")
    payload = memoryview(data)[end + 5:]
    if not header or header[0] != MAGIC:
        raise ContractError("not an archive (bad magic line)")
    config: dict = {}
    tensors = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = json.loads(rest)
        elif kind == "tensor":
            name, shape, dtype, offset, nbytes = rest.split(" ")
            if dtype != _DTYPE.str:
                raise ContractError(f"unsupported element type {dtype}")
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            offset, nbytes = int(offset), int(nbytes)
            if offset + nbytes > len(payload) or nbytes != _DTYPE.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise ContractError(f"tensor {name} does not fit the payload")
            tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype=_DTYPE).reshape(shape).copy()
        else:
            raise ContractError(f"unknown manifest line {line!r}")
    return config, tensors
