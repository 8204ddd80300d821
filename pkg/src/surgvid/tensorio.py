"""Flat binary container for named tensors.

Layout: 4-byte magic, u32 format version, u64 header length, JSON header,
then raw little-endian tensor payloads back to back. The header carries a
free-form ``meta`` dict plus per-tensor name/dtype/shape/offset records, so
files are self-describing and can be inspected without reading payloads.

Used for codec weights, model checkpoints, and precomputed embedding files.
"""

from __future__ import annotations

import json
import pathlib
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SVTC"
VERSION = 1

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "float16": np.float16,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def save_tensors(
    path: str | pathlib.Path,
    tensors: Mapping[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write named arrays to ``path``. Torch tensors are accepted too."""
    records = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = _as_numpy(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        blob = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        records.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": records}).encode()
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_tensors(path: str | pathlib.Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns ({name: array}, meta)."""
    data = pathlib.Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    header = json.loads(data[16:16 + header_len])
    base = 16 + header_len
    tensors = {}
    for rec in header["tensors"]:
        dtype = _DTYPES[rec["dtype"]]
        start = base + rec["offset"]
        raw = data[start:start + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(dtype)
    return tensors, header.get("meta", {})


def _as_numpy(arr) -> np.ndarray:
    if isinstance(arr, np.ndarray):
        return arr
    if hasattr(arr, "detach"):  # torch tensor
        return arr.detach().cpu().numpy()
    return np.asarray(arr)
