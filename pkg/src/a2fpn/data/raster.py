"""Binary PPM (P6) images and PGM (P5) label maps, 8-bit."""

from __future__ import annotations

import os

import numpy as np

from ..errors import DataError, FormatError


def _header(magic: str, width: int, height: int) -> bytes:
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def encode_ppm(image: np.ndarray) -> bytes:
    """3 x H x W floats in [0, 1] -> P6 bytes, quantised with round(v * 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"PPM image must be 3 x H x W, got {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return _header("P6", image.shape[2], image.shape[1]) + q.transpose(1, 2, 0).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"PGM label map must be H x W, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("label values must lie in 0..255 for PGM storage")
    return _header("P5", labels.shape[1], labels.shape[0]) + labels.astype(np.uint8).tobytes()


def _parse(buf: bytes, magic: bytes):
    """Return (width, height, payload offset) of a P5/P6 header with maxval 255."""
    if buf[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError("malformed header: expected a decimal field", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    if width < 1 or height < 1:
        raise FormatError(f"invalid extent {width} x {height}", pos)
    return width, height, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, off = _parse(buf, b"P6")
    need = off + 3 * w * h
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf) - off} of {3 * w * h} bytes", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=off).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, off = _parse(buf, b"P5")
    need = off + w * h
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf) - off} of {w * h} bytes", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).astype(np.int64)


def write_image(path: os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def write_labels(path: os.PathLike, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(labels))


def read_image(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def read_labels(path: os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
