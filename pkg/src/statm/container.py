"""STVC tensor container: a tiny little-endian binary format.

Layout: magic "STVC", u32 version (=1), u32 entry count; then per entry
u16 name length + UTF-8 name, u8 dtype code (1=f32, 2=u8, 3=i32),
u8 rank, u32 dims, raw little-endian payload. Writes are byte-stable:
identical content produces identical files.
"""

from __future__ import annotations

import struct
from typing import Dict, Mapping

import numpy as np

from statm.errors import ConfigurationError, ContractViolation

MAGIC = b"STVC"
VERSION = 1

_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i4")}
_KIND_TO_CODE = {"f": 1, "u": 2, "i": 3}


def _dtype_code(arr: np.ndarray) -> int:
    code = _KIND_TO_CODE.get(arr.dtype.kind)
    if code is None:
        raise ConfigurationError(f"save_container: unsupported dtype {arr.dtype}")
    return code


def save_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays; float->f32, unsigned->u8, signed->i32."""
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise ContractViolation("save_container: duplicate entry names")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        # ascontiguousarray would promote rank 0 to rank 1
        arr = np.asarray(arr.astype(_CODE_TO_DTYPE[code]), order="C")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ConfigurationError(f"save_container: name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ConfigurationError(f"save_container: rank {arr.ndim} too large")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    data = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(data)


def load_container(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not an STVC container (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported STVC version {version}")
    out: Dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            if code not in _CODE_TO_DTYPE:
                raise ConfigurationError(f"{path}: unknown dtype code {code}")
            dtype = _CODE_TO_DTYPE[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            payload = data[off:off + nbytes]
            if len(payload) != nbytes:
                raise ConfigurationError(f"{path}: truncated payload for '{name}'")
            off += nbytes
            if name in out:
                raise ConfigurationError(f"{path}: duplicate entry '{name}'")
            arr = np.frombuffer(payload, dtype=dtype)
            out[name] = arr.reshape(dims).copy()
    except struct.error as e:
        raise ConfigurationError(f"{path}: truncated STVC container ({e})") from None
    if off != len(data):
        raise ConfigurationError(f"{path}: {len(data) - off} trailing bytes")
    return out
