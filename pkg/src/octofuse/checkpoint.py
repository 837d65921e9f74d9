"""Binary checkpoint format.

Layout::

    b"OCTO" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | buffers

The manifest holds ``{"meta": {...}, "tensors": [{"name", "shape", "dtype",
"offset", "nbytes"}, ...]}``; offsets are relative to the first byte after
the manifest. Buffers are raw little-endian, C order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"OCTO"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode_arrays(magic: bytes, version: int, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return _HEADER.pack(magic, version, len(manifest)) + manifest + b"".join(chunks)


def decode_arrays(blob: bytes, magic: bytes, version: int, what: str = "file") -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size:
        raise FormatError(f"{what}: truncated header, expected {_HEADER.size} bytes, got {len(blob)}")
    got_magic, got_version, mlen = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise FormatError(f"{what}: bad magic {got_magic!r} at byte 0, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"{what}: unsupported version {got_version} at byte 4, expected {version}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise FormatError(
            f"{what}: truncated manifest, expected {start + mlen} bytes, got {len(blob)}"
        )
    try:
        manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{what}: unreadable manifest at byte {start}: {exc}") from None
    base = start + mlen
    expected = base + sum(e["nbytes"] for e in entries)
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "trailing bytes in"
        raise FormatError(f"{what}: {kind} payload, expected {expected} bytes, got {len(blob)}")
    arrays = {}
    for e in entries:
        dtype = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != e["nbytes"]:
            raise FormatError(
                f"{what}: tensor {e['name']!r} at byte {base + e['offset']}: shape {list(shape)} "
                f"with dtype {dtype} needs {int(np.prod(shape)) * dtype.itemsize} bytes, manifest says {e['nbytes']}"
            )
        lo = base + e["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=lo)
        arrays[e["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    return manifest.get("meta", {}), arrays


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_arrays(MAGIC, VERSION, arrays, meta))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(meta, arrays)``."""
    return decode_arrays(Path(path).read_bytes(), MAGIC, VERSION, what=str(path))
