"""Binary containers for named float32 tensors and cached feature matrices.

Tensor container (weights ``VITW``, heads ``HEAD``), all little endian::

    magic      4 bytes
    version    u32 (= 1)
    count      u32
    count x {  name_len u16, name utf-8, rank u8, dims u32 x rank,
               payload float32 x prod(dims) }

Feature cache (``FEAT``)::

    magic "FEAT", count u32, dim u32, float32 x count*dim (row major),
    labels u16 x count
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(magic: bytes, tensors: Iterable[tuple[str, np.ndarray]]) -> bytes:
    tensors = list(tensors)
    parts = [magic, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(magic: bytes, data: bytes) -> list[tuple[str, np.ndarray]]:
    r = _Reader(data)
    got = bytes(r.take(4, "magic"))
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    out = []
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = bytes(r.take(name_len, f"tensor {i} name")).decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size, f"{name} payload")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        out.append((name, arr))
    if r.pos != len(r.data):
        raise ContainerError("trailing bytes after last tensor")
    return out


def write_features(features: np.ndarray, labels: np.ndarray) -> bytes:
    features = np.asarray(features, dtype="<f4")
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ContainerError("features must be (n, dim) with n labels")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ContainerError("labels must fit in u16")
    n, dim = features.shape
    return b"".join([
        b"FEAT", struct.pack("<II", n, dim),
        np.ascontiguousarray(features).tobytes(),
        labels.astype("<u2").tobytes(),
    ])


def read_features(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != b"FEAT":
        raise ContainerError("bad magic, expected b'FEAT'")
    n, dim = r.unpack("<II", "header")
    feats = np.frombuffer(r.take(4 * n * dim, "features"), dtype="<f4")
    labels = np.frombuffer(r.take(2 * n, "labels"), dtype="<u2")
    if r.pos != len(r.data):
        raise ContainerError("trailing bytes after labels")
    return feats.astype(np.float32).reshape(n, dim), labels.astype(np.int64)
