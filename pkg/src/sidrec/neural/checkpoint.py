"""Versioned text container for named float64 arrays.

Layout: one JSON header line, then one tab-separated record per array:
name, comma-joined shape, raw little-endian float64 bytes as hex.
Hex round-trips bit-exactly, and the same container serves model
checkpoints and rq-kmeans codebook dumps.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import DataError

FORMAT_NAME = "sidrec-arrays"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, config_hash: str = "", meta: dict | None = None) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "count": len(arrays),
    }
    if meta:
        header["meta"] = meta
    lines = [json.dumps(header, sort_keys=True)]
    for name in arrays:
        arr = np.asarray(arrays[name], dtype=np.float64)  # tobytes() is C-order
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{arr.tobytes().hex()}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_arrays(path):
    """Returns (arrays, config_hash, meta).  Corruption errors carry the
    offending line number."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise DataError("empty container", path=path, line=1)
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as e:
        raise DataError(f"bad header: {e}", path=path, line=1)
    if header.get("format") != FORMAT_NAME:
        raise DataError(f"unknown format {header.get('format')!r}", path=path, line=1)
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported version {header.get('version')!r}", path=path, line=1)
    arrays: dict[str, np.ndarray] = {}
    for ln, line in enumerate(raw[1:], start=2):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"expected 3 fields, got {len(fields)}", path=path, line=ln)
        name, shape_s, hex_s = fields
        if name in arrays:
            raise DataError(f"duplicate array {name!r}", path=path, line=ln)
        try:
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        except ValueError:
            raise DataError(f"bad shape {shape_s!r}", path=path, line=ln)
        try:
            buf = bytes.fromhex(hex_s)
        except ValueError:
            raise DataError("bad hex payload", path=path, line=ln)
        n = 1
        for s in shape:
            n *= s
        if len(buf) != 8 * n:
            raise DataError(
                f"payload holds {len(buf) // 8} values, shape needs {n}",
                path=path, line=ln)
        arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    if header.get("count") != len(arrays):
        raise DataError(
            f"header count {header.get('count')} != {len(arrays)} records",
            path=path, line=1)
    return arrays, header.get("config_hash", ""), header.get("meta")
