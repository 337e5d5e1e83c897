"""Shared binary container primitives for model checkpoints.

Checkpoints are magic + u32 version + an architecture header (ints/strings/
f32 blocks written by the owning module) followed by raw little-endian f32
parameter blocks in declaration order. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .tape import Tensor


class CheckpointFormatError(ValueError):
    pass


def write_u32(f, value: int):
    f.write(struct.pack("<I", value))


def write_f32(f, value: float):
    f.write(struct.pack("<f", value))


def write_string(f, text: str):
    raw = text.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def write_f32_block(f, arr: np.ndarray):
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointFormatError(f"unexpected end of file reading {what}")
    return raw


def read_u32(f, what: str) -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def read_f32(f, what: str) -> float:
    return struct.unpack("<f", read_exact(f, 4, what))[0]


def read_string(f, what: str) -> str:
    n = read_u32(f, f"{what} length")
    return read_exact(f, n, what).decode("utf-8")


def read_f32_block(f, shape, what: str) -> np.ndarray:
    n = int(np.prod(shape))
    raw = read_exact(f, 4 * n, what)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_params(f, params: list[Tensor]):
    for p in params:
        write_f32_block(f, p.data)


def read_params(f, params: list[Tensor], what: str = "params"):
    """Load f32 blocks into existing tensors (shapes taken from them)."""
    for i, p in enumerate(params):
        p.data = read_f32_block(f, p.data.shape, f"{what}[{i}]")


def check_magic(f, magic: bytes):
    if read_exact(f, len(magic), "magic") != magic:
        raise CheckpointFormatError("bad magic")


def check_version(f, expected: int):
    version = read_u32(f, "version")
    if version != expected:
        raise CheckpointFormatError(f"unsupported version {version}")
