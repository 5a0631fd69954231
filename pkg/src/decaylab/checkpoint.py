"""Binary checkpoints.

Layout, all integers little-endian::

    magic    8 bytes  b"SCHEDCKP"
    version  u32      1
    step     u64      completed steps of the current stage
    d        u64      parameter count
    params   d x f64
    m        d x f64  first moments
    v        d x f64  second moments
    rng      2 x u64  (key, counter) of the training stream
    crc32    u32      zlib.crc32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from decaylab.errors import FormatError
from decaylab.rng import Rng

MAGIC = b"SCHEDCKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_RNG = struct.Struct("<QQ")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    step: int
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    rng: Rng


def encode_checkpoint(step: int, params: np.ndarray, m: np.ndarray, v: np.ndarray, rng: Rng) -> bytes:
    d = len(params)
    if len(m) != d or len(v) != d:
        raise ValueError("params and moments must have equal length")
    body = b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, step, d),
            np.ascontiguousarray(params, dtype="<f8").tobytes(),
            np.ascontiguousarray(m, dtype="<f8").tobytes(),
            np.ascontiguousarray(v, dtype="<f8").tobytes(),
            _RNG.pack(*rng.state),
        ]
    )
    return body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(path, step: int, params: np.ndarray, m: np.ndarray, v: np.ndarray, rng: Rng) -> None:
    data = encode_checkpoint(step, params, m, v, rng)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read_header(data: bytes) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, version, step, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    return step, d


def decode_checkpoint(data: bytes) -> Checkpoint:
    step, d = _read_header(data)
    expected = _HEADER.size + 3 * 8 * d + _RNG.size + _CRC.size
    if len(data) != expected:
        raise FormatError(f"checkpoint length {len(data)} does not match {expected} for d={d}")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if zlib.crc32(data[: expected - _CRC.size]) != crc:
        raise FormatError("checksum mismatch")
    arrays = np.frombuffer(data, dtype="<f8", count=3 * d, offset=_HEADER.size).astype(np.float64)
    key, counter = _RNG.unpack_from(data, _HEADER.size + 3 * 8 * d)
    return Checkpoint(step, arrays[:d].copy(), arrays[d : 2 * d].copy(), arrays[2 * d :].copy(), Rng(key, counter))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        _read_header(head)
        return decode_checkpoint(head + f.read())
