"""Length-prefixed binary container: JSON header + raw little-endian arrays.

Used by the cohort files and model checkpoints. No pickle: loading parses
JSON and copies raw buffers, and writing the same content twice produces
identical bytes, which the round-trip contracts rely on.
"""

from __future__ import annotations

import json
import struct
from typing import Any, BinaryIO, Dict, Tuple

import numpy as np

_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}
_LEN = struct.Struct("<Q")


class FormatError(ValueError):
    """Raised on malformed or unsupported container content."""


def _canonical_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype
    if dt == np.float64:
        return "<f8"
    if dt == np.int64:
        return "<i8"
    if dt == np.uint8:
        return "|u1"
    raise FormatError(f"unsupported dtype {dt}; convert to float64/int64/uint8")


def write_block(fh: BinaryIO, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> None:
    """Append one block: [len][json header with array index][len][payload]."""
    index = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays must keep their shape
        dtype = _canonical_dtype(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["__arrays__"] = index
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    fh.write(_LEN.pack(len(head)))
    fh.write(head)
    fh.write(_LEN.pack(len(payload)))
    fh.write(payload)


def read_block(fh: BinaryIO) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read the next block; raises EOFError cleanly at end of stream."""
    raw_len = fh.read(_LEN.size)
    if not raw_len:
        raise EOFError
    if len(raw_len) != _LEN.size:
        raise FormatError("truncated block length")
    (head_len,) = _LEN.unpack(raw_len)
    head = fh.read(head_len)
    if len(head) != head_len:
        raise FormatError("truncated header")
    header = json.loads(head.decode("utf-8"))
    (payload_len,) = _LEN.unpack(fh.read(_LEN.size))
    payload = fh.read(payload_len)
    if len(payload) != payload_len:
        raise FormatError("truncated payload")
    index = header.pop("__arrays__", {})
    arrays = {}
    for name, meta in index.items():
        if meta["dtype"] not in _ALLOWED_DTYPES:
            raise FormatError(f"dtype {meta['dtype']} not allowed")
        buf = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
    return header, arrays
