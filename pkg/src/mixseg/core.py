"""Shared array conventions, validation helpers and seeded RNG.

Arrays are plain numpy:

* image: float64 ``(3, H, W)`` with values in [0, 1]
* label map: integer ``(H, W)`` with values in [0, C)
* probability map: float64 ``(C, H, W)``, each pixel sums to 1
* mix mask: uint8 ``(H, W)`` with values in {0, 1}

Batched variants simply add a leading axis.
"""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np

PROB_TOL = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seed(parent_seed: int, stream_id: int | str) -> int:
    digest = hashlib.sha256(f"{int(parent_seed)}:{stream_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def fork_rng(parent_seed: int, stream_id: int | str) -> np.random.Generator:
    return make_rng(child_seed(parent_seed, stream_id))


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be (channels, H, W), got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return img


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be (H, W), got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("label map must hold integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def check_probs(probs: np.ndarray, tol: float = PROB_TOL) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"probability map must be (C, H, W), got shape {probs.shape}")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if np.max(np.abs(probs.sum(axis=0) - 1.0)) > tol:
        raise ValueError("per-pixel probabilities must sum to 1")
    return probs


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    return mask.astype(np.uint8, copy=False)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index.
    return np.argmax(probs, axis=-3).astype(np.int64)


def confidence_map(probs: np.ndarray) -> np.ndarray:
    return np.max(probs, axis=-3)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    classes = np.arange(num_classes).reshape((num_classes,) + (1,) * 2)
    if labels.ndim == 3:
        return (labels[:, None] == classes[None]).astype(np.float64)
    return (labels[None] == classes).astype(np.float64)


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
