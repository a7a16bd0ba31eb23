"""VXWT named-tensor container.

Layout (little endian): magic ``VXWT``, u16 version, u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32
payload in C order.
"""

from __future__ import annotations

import struct

import numpy as np

VXWT_MAGIC = b"VXWT"
VXWT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    chunks = [struct.pack("<4sHI", VXWT_MAGIC, VXWT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise WeightsFormatError(f"truncated VXWT file at byte {self.pos}")
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise WeightsFormatError(f"truncated VXWT file at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic, version, count = reader.take("<4sHI")
    if magic != VXWT_MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}, expected {VXWT_MAGIC!r}")
    if version != VXWT_VERSION:
        raise WeightsFormatError(f"unsupported VXWT version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = reader.take("<H")
        name = reader.bytes(n).decode("utf-8")
        (rank,) = reader.take("<B")
        dims = reader.take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.bytes(4 * size), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if reader.pos != len(reader.raw):
        raise WeightsFormatError("trailing bytes after last tensor")
    return tensors
