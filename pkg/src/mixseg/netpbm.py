"""Binary PPM (P6) images and PGM (P5) label maps.

Images are stored at maxval 255 (value * 255, rounded to nearest). Label maps
use maxval = C - 1 so the class count survives the round trip.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import atomic_write


class NetpbmError(ValueError):
    pass


def _header(magic: str, width: int, height: int, maxval: int) -> bytes:
    return f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")


def _parse_header(data: bytes, path) -> tuple[str, int, int, int, int]:
    """Return (magic, width, height, maxval, offset of first raster byte)."""
    tokens: list[str] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header")
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise NetpbmError(f"{path}: missing whitespace after header")
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"{path}: non-numeric header field in {tokens}") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise NetpbmError(f"{path}: unsupported geometry or maxval {tokens[1:]}")
    return magic, width, height, maxval, pos + 1


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    raster = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return _header("P6", w, h, 255) + raster.transpose(1, 2, 0).tobytes()


def decode_ppm(data: bytes, path="<bytes>") -> np.ndarray:
    magic, w, h, maxval, off = _parse_header(data, path)
    if magic != "P6":
        raise NetpbmError(f"{path}: expected P6, got {magic}")
    body = data[off:]
    if len(body) != 3 * w * h:
        raise NetpbmError(f"{path}: expected {3 * w * h} raster bytes, found {len(body)}")
    raster = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    if raster.max(initial=0) > maxval:
        raise NetpbmError(f"{path}: sample exceeds maxval {maxval}")
    return raster.transpose(2, 0, 1).astype(np.float64) / maxval


def encode_pgm(labels: np.ndarray, num_classes: int) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"expected (H, W) label map, got {labels.shape}")
    if not 2 <= num_classes <= 256:
        raise ValueError("PGM label maps need 2 <= C <= 256")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    h, w = labels.shape
    return _header("P5", w, h, num_classes - 1) + labels.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, path="<bytes>") -> tuple[np.ndarray, int]:
    """Return (labels, num_classes)."""
    magic, w, h, maxval, off = _parse_header(data, path)
    if magic != "P5":
        raise NetpbmError(f"{path}: expected P5, got {magic}")
    body = data[off:]
    if len(body) != w * h:
        raise NetpbmError(f"{path}: expected {w * h} raster bytes, found {len(body)}")
    labels = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if labels.max(initial=0) > maxval:
        raise NetpbmError(f"{path}: class value exceeds maxval {maxval}")
    return labels.astype(np.int64), maxval + 1


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    atomic_write(path, encode_ppm(img))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), path)


def write_pgm(path: str | Path, labels: np.ndarray, num_classes: int) -> None:
    atomic_write(path, encode_pgm(labels, num_classes))


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    return decode_pgm(Path(path).read_bytes(), path)
