"""Versioned binary checkpoints.

Layout (little-endian)::

    magic b"ATXCKPT\\0" | version u32 | config sha256 (32 bytes) | step u64 | count u32
    count x [ name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 x ndim | raw values ]
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATXCKPT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sI32sQI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, step: int, config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [_HEADER.pack(MAGIC, VERSION, config_hash, step, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_header(path) -> tuple[int, bytes, int]:
    raw = Path(path).read_bytes()[:_HEADER.size]
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, h, step, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    return version, h, step


def load_checkpoint(path, expected_hash: bytes | None = None) -> tuple[int, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, h, step, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if expected_hash is not None and h != expected_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch (file {h.hex()[:12]}, expected {expected_hash.hex()[:12]}); "
            "refusing to load a checkpoint written for a different configuration")
    off = _HEADER.size
    tensors = {}

    def need(n):
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(nlen + 2)
        name = raw[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: bad dtype code {code} for {name}")
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return step, tensors
