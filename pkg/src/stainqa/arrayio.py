"""Self-describing binary container for named float arrays.

Layout: 6-byte magic, one uint32 (little-endian) header length, a UTF-8 JSON
header, then the raw array payloads concatenated in header order. The header
records name, shape, dtype and byte offset of every array plus an optional
free-form ``meta`` dict, so files can be read back without outside knowledge.
All payloads are written C-contiguous and little-endian regardless of host
byte order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STQA01"

_SUPPORTED = {"<f4", "<f8", "<i4", "<i8", "|u1"}


class ArrayContainerError(ValueError):
    pass


def _canon_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    code = dt.str
    if code not in _SUPPORTED:
        raise ArrayContainerError(f"unsupported dtype {arr.dtype!r}")
    return code


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write ``arrays`` (name -> ndarray) and optional JSON-able ``meta``."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _canon_dtype(arr)
        buf = np.ascontiguousarray(arr.astype(code, copy=False)).tobytes()
        entries.append(
            {
                "name": str(name),
                "shape": list(arr.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(buf),
            }
        )
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"arrays": entries, "meta": meta if meta is not None else {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)


def load_arrays(path) -> tuple[dict, dict]:
    """Read a container back; returns (arrays, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArrayContainerError(f"{path}: not an array container (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(payload):
            raise ArrayContainerError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(payload[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
