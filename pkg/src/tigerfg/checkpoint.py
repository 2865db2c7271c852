"""Flat binary tensor container.

The on-disk layout is a plain-text header followed by raw data:

    <name> <dim0> <dim1> ...\\n      one line per tensor, dims base-10
    \\n                              blank line ends the header
    <float32 little-endian data>     tensors back to back, header order

The same container stores model checkpoints, dataset image blobs, and
embedding dumps.  Writes go through a temp file and ``os.replace`` so a
crashed process never leaves a half-written file behind.
"""

from __future__ import annotations

import os
from collections import OrderedDict

import numpy as np


class CheckpointError(ValueError):
    pass


def _validate_name(name: str) -> None:
    if not name or any(c.isspace() for c in name):
        raise CheckpointError(f"invalid tensor name {name!r}")


def save_tensors(path: str | os.PathLike, tensors: "OrderedDict[str, np.ndarray]") -> None:
    """Write named tensors as header + little-endian float32 payload."""
    items = []
    for name, arr in tensors.items():
        _validate_name(name)
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        items.append((name, a))
    header_lines = []
    for name, a in items:
        header_lines.append(" ".join([name] + [str(d) for d in a.shape]))
    header = ("\n".join(header_lines) + "\n\n").encode("ascii")

    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        for _, a in items:
            fh.write(a.tobytes())
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    """Read a tensor container back as an ordered name -> float32 array map."""
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("missing blank-line header terminator")
    header, payload = raw[:sep], raw[sep + 2:]

    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for line in header.decode("ascii").splitlines():
        parts = line.split()
        if not parts:
            raise CheckpointError("empty header line")
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after last tensor")
    return out
