"""Run checkpoint file: one JSON header line followed by raw float32 arrays.

The header carries an ``arrays`` index of ``{"name", "offset", "count"}``
records; offsets are in bytes from the end of the header line and every array
is stored little-endian float32.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = "fludesim-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def write_checkpoint(path, state: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_LE_F32).tobytes()
        index.append({"name": name, "offset": offset, "count": len(data) // 4})
        blobs.append(data)
        offset += len(data)
    header = {"format": MAGIC, "version": VERSION, "arrays": index, "state": state}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header line")
    header = json.loads(head.decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a fludesim checkpoint")
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for rec in header["arrays"]:
        start = rec["offset"]
        stop = start + 4 * rec["count"]
        if stop > len(body):
            raise ValueError(f"{path}: truncated array {rec['name']!r}")
        arrays[rec["name"]] = np.frombuffer(body[start:stop], dtype=_LE_F32).astype(np.float32)
    return header["state"], arrays
