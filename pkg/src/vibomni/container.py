"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic   4 bytes  b"VBOM"
    version uint16
    hlen    uint32   length of the JSON header
    header  hlen bytes UTF-8 JSON {"kind", "config", "tensors": [{"name", "shape"}]}
    data    float32 row-major tensors in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VBOM"
VERSION = 1


def save(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    manifest = [{"name": name, "shape": list(np.shape(t))} for name, t in tensors.items()]
    header = json.dumps({"kind": kind, "config": config, "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[10:10 + hlen])
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    offset = 10 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = data.reshape(entry["shape"]).astype(np.float64)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after tensor data")
    return header["config"], tensors
