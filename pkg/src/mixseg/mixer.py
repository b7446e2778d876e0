"""Per-pixel selection between two inputs under a binary mask (1 picks ``a``)."""
from __future__ import annotations

import numpy as np


def _select(a: np.ndarray, b: np.ndarray, m: np.ndarray) -> np.ndarray:
    a, b, m = np.asarray(a), np.asarray(b), np.asarray(m)
    if a.shape != b.shape:
        raise ValueError(f"inputs differ in shape: {a.shape} vs {b.shape}")
    if a.shape[-2:] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match input grid {a.shape[-2:]}")
    return np.where(m.astype(bool), a, b)


def mix_images(a: np.ndarray, b: np.ndarray, m: np.ndarray) -> np.ndarray:
    return _select(a, b, m)


def mix_labels(ya: np.ndarray, yb: np.ndarray, m: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    if num_classes is not None:
        for y in (ya, yb):
            if np.size(y) and (np.min(y) < 0 or np.max(y) >= num_classes):
                raise ValueError(f"label values must lie in [0, {num_classes})")
    return _select(ya, yb, m)


def mix_weights(wa: np.ndarray, wb: np.ndarray, m: np.ndarray) -> np.ndarray:
    return _select(wa, wb, m)


def complement(m: np.ndarray) -> np.ndarray:
    return (1 - np.asarray(m)).astype(np.uint8)
