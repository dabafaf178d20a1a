"""Binary checkpoint format for named float64 tensors.

Layout (all little-endian):
  magic "CMIG" | u32 version=1 | u32 tensor count
  per tensor: u16 name length | UTF-8 name | u8 rank | u64 per dim | raw f64 data

Round-trips must be bit exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CMIG"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        return tensors
