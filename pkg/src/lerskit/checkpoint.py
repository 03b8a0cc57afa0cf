"""Binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"LERSKIT1"
    u64       manifest byte length
    ...       manifest, UTF-8 "key=value" lines
    u64       section count
    per section:
        u16   name length, then the UTF-8 name
        u8    dtype code (0=float64, 1=float32, 2=int64)
        u8    ndim, then ndim x u64 shape
        u64   payload byte length, then raw little-endian values

Round-trips are bit-exact for float64/float32/int64 arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LERSKIT1"

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.int64)
    if arr.dtype.kind == "i" and arr.dtype != np.dtype("<i8"):
        arr = arr.astype("<i8")
    if arr.dtype.kind == "u":
        if arr.max(initial=0) >= 2 ** 63:
            raise CheckpointError("unsigned values above int64 range are not supported")
        arr = arr.astype("<i8")
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, manifest: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    manifest_bytes = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = _canonical(np.asarray(arr))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            payload = arr.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint container")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated container")
        chunk = data[off:off + n]
        off += n
        return chunk

    (mlen,) = struct.unpack("<Q", take(8))
    manifest: dict[str, str] = {}
    for line in take(mlen).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            manifest[key] = value
    (count,) = struct.unpack("<Q", take(8))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (plen,) = struct.unpack("<Q", take(8))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        arr = np.frombuffer(take(plen), dtype=_CODE_DTYPES[code]).reshape(shape)
        arrays[name] = arr.copy()
    return manifest, arrays
