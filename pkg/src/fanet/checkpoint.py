"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"FANT" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE payload
    CRC32 of every byte between the count field and the CRC itself
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .tensor import Tensor

MAGIC = b"FANT"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class CrcError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def encode_checkpoint(tensors: dict[str, Tensor | np.ndarray]) -> bytes:
    body = bytearray()
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        raw = name.encode("utf-8")
        body += _U32.pack(len(raw)) + raw
        body += _U32.pack(arr.ndim)
        body += b"".join(_U32.pack(d) for d in arr.shape)
        body += np.ascontiguousarray(arr).tobytes()
    head = MAGIC + _U32.pack(VERSION) + _U32.pack(len(tensors))
    return head + bytes(body) + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedError("file ends inside the header")
    (version,) = _U32.unpack_from(buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (count,) = _U32.unpack_from(buf, 8)

    pos = 12
    end = len(buf) - 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise TruncatedError(f"file ends at byte {len(buf)} while reading {n} bytes at {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = _U32.unpack(take(4))
        name = take(nlen).decode("utf-8", errors="replace")
        (rank,) = _U32.unpack(take(4))
        dims = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if end < pos:
        raise TruncatedError("missing CRC")
    if pos != end:
        raise CrcError(f"{end - pos} unexpected bytes before the CRC")
    (stored,) = _U32.unpack_from(buf, end)
    if zlib.crc32(buf[12:end]) & 0xFFFFFFFF != stored:
        raise CrcError("payload CRC mismatch")
    return out


def save_checkpoint(path: str | os.PathLike, tensors) -> None:
    """Write ``tensors`` (a name->array mapping or a ModelParams) atomically."""
    if hasattr(tensors, "tensors"):
        tensors = tensors.tensors
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def restore_params(params, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into a ModelParams with matching names and shapes."""
    missing = set(params.tensors) - set(arrays)
    extra = set(arrays) - set(params.tensors)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in params.tensors.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
        t.data[...] = arrays[name]
