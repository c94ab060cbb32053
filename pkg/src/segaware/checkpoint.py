"""Checkpoint container: named float32 tensors plus a JSON meta block.

Layout (all little-endian):
  magic  "USAIDCKP" (8 bytes)
  u32    format version (currently 1)
  u32    tensor count
  per tensor:
    u16  name length, then name (utf-8)
    u8   rank
    u32  dims[rank]
    raw  float32 payload
  u32    meta length, then meta JSON (utf-8)

The meta block always carries a sha256 per tensor payload; loads verify
them and refuse partially-read or tampered files.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"USAIDCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tensor_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors (cast to float32) and meta to the container."""
    names = list(tensors)
    casted = {n: np.ascontiguousarray(tensors[n], dtype="<f4") for n in names}
    meta = dict(meta or {})
    meta["format_version"] = VERSION
    meta["tensor_sha256"] = {n: _tensor_hash(a) for n, a in casted.items()}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for n in names:
            arr = casted[n]
            nb = n.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read back (tensors, meta); verifies version and payload hashes."""
    tensors = {}
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint container")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
            raw = _read_exact(f, nbytes, f"tensor '{name}'")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        (mlen,) = struct.unpack("<I", _read_exact(f, 4, "meta length"))
        meta = json.loads(_read_exact(f, mlen, "meta").decode("utf-8"))

    stored = meta.get("tensor_sha256", {})
    for name, arr in tensors.items():
        want = stored.get(name)
        if want is None:
            raise CheckpointError(f"checkpoint meta lacks a hash for '{name}'")
        if _tensor_hash(arr) != want:
            raise CheckpointError(f"hash mismatch for tensor '{name}' (corrupt file)")
    return tensors, meta
