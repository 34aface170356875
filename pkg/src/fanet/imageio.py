"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255 only.

Arrays are float in [0, 1]: images [3,H,W], masks and maps [1,H,W] or [H,W].
"""

from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM expects a [3,H,W] array, got {img.shape}")
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _quantize(img).transpose(1, 2, 0).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM expects a [1,H,W] or [H,W] array, got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + _quantize(img).tobytes()


def _parse_header(buf: bytes) -> tuple[str, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    fields: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(fields) < 4:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        fields.append(buf[start:pos])
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval")
    pos += 1
    magic = fields[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        raise ImageFormatError(f"malformed header: {e}") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    return magic, w, h, maxval, pos


def decode(buf: bytes) -> np.ndarray:
    """Decode a P5/P6 byte string to a float32 array ([1,H,W] or [3,H,W])."""
    magic, w, h, _, off = _parse_header(buf)
    ch = 3 if magic == "P6" else 1
    need = w * h * ch
    payload = buf[off : off + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, ch).transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(img))
