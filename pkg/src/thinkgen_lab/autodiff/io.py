"""TGAR array blobs: magic ``TGAR``, u32 version, u32 ndim, u64 shape, LE payload."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"TGAR"
VERSION = 1


def dumps_array(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(getattr(arr, "data", arr), dtype="<f8"))
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads_array(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ContractError("not a TGAR blob (bad magic)")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContractError(f"unsupported TGAR version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    start = 12 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    payload = blob[start:]
    if len(payload) != 8 * count:
        raise ContractError(f"TGAR payload has {len(payload)} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_array(path, arr) -> None:
    Path(path).write_bytes(dumps_array(arr))


def load_array(path) -> np.ndarray:
    return loads_array(Path(path).read_bytes())


def array_hash(arr) -> str:
    return hashlib.sha256(dumps_array(arr)).hexdigest()
