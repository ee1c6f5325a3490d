"""Minimal binary PGM (P5) and PBM (P4) readers and writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes, n_fields: int):
    if not data.startswith(magic):
        raise PNMError(f"expected {magic.decode()} header")
    fields = []
    pos = 2
    while len(fields) < n_fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates header and raster
    return fields, pos + 1


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise PNMError("write_pgm expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), off = _read_header(data, b"P5", 3)
    if maxval != 255:
        raise PNMError(f"only 8-bit graymaps are supported (maxval={maxval})")
    raster = data[off:off + w * h]
    if len(raster) != w * h:
        raise PNMError("truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pbm(path, bits: np.ndarray) -> None:
    """Write a boolean array; ``True`` pixels are stored as 1 (black)."""
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    with open(path, "wb") as fh:
        fh.write(b"P4\n%d %d\n" % (w, h))
        fh.write(np.packbits(bits, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h), off = _read_header(data, b"P4", 2)
    row_bytes = (w + 7) // 8
    raster = np.frombuffer(data[off:off + row_bytes * h], dtype=np.uint8)
    if raster.size != row_bytes * h:
        raise PNMError("truncated raster")
    return np.unpackbits(raster.reshape(h, row_bytes), axis=1)[:, :w].astype(bool)
