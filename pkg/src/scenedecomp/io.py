"""Raster and log file formats.

Depth rasters (``.f32``) start with a 16-byte header ``b"DEP1"``, uint32 width,
uint32 height and a reserved uint32 (zero), all little-endian, followed by
``height * width`` little-endian float32 values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"DEP1"
_DEPTH_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, float) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_rgb(path) -> np.ndarray:
    """RGB PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, ids) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 255:
        raise RasterFormatError("instance ids must fit in 8 bits")
    Image.fromarray(ids.astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise RasterFormatError(f"{path}: expected an 8-bit mask, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def depth_bytes(depth) -> bytes:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise RasterFormatError("depth raster must be 2-d")
    h, w = d.shape
    return _DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0) + d.tobytes(order="C")


def depth_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _DEPTH_HEADER.size:
        raise RasterFormatError("depth file shorter than its header")
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise RasterFormatError(f"bad depth magic {magic!r}")
    body = data[_DEPTH_HEADER.size:]
    if len(body) != 4 * w * h:
        raise RasterFormatError(f"depth body has {len(body)} bytes, expected {4 * w * h}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_depth(path, depth) -> None:
    Path(path).write_bytes(depth_bytes(depth))


def read_depth(path) -> np.ndarray:
    return depth_from_bytes(Path(path).read_bytes())


class JsonlLog:
    """Append-only JSON-lines writer (one record per line)."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", encoding="utf-8")

    def write(self, record) -> None:
        line = record.to_json() if hasattr(record, "to_json") else json.dumps(record, sort_keys=True)
        self._fh.write(line + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
