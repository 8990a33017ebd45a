"""Binary parameter checkpoints.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then the
raw little-endian float64 payload. The header lists every tensor as
``{name, rows, cols, offset}`` with ``offset`` counted in bytes from the
start of the payload. 1-D tensors are stored as a single row.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = "alter-ckpt-1"


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 1:
        return arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"checkpoint tensors must be 1-D or 2-D, got {arr.shape}")
    return arr


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        mat = np.ascontiguousarray(_as_2d(arr))
        entries.append({"name": name, "rows": mat.shape[0], "cols": mat.shape[1], "offset": offset})
        raw = mat.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)``; every tensor comes back 2-D."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    payload = memoryview(blob)[8 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        count = e["rows"] * e["cols"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["rows"], e["cols"]).astype(np.float64)
    return tensors, header.get("meta", {})
