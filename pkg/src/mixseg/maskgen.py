"""Mixing-mask generators: CutMix, ClassMix and ComplexMix.

Every generator takes a caller-owned ``np.random.Generator`` and returns a
uint8 ``(H, W)`` mask. Draw order is part of the contract (oracle tests
re-derive masks from the same seed), so keep it stable.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_P_CHOICES = (4, 16, 64, 128)


class DegenerateMixWarning(UserWarning):
    """Raised (as a warning) when a mask selects no pixels by construction."""


@dataclass(frozen=True)
class ComplexMixSpec:
    p_choices: tuple[int, ...] = DEFAULT_P_CHOICES
    present_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p_choices", tuple(int(p) for p in self.p_choices))
        if not self.p_choices:
            raise ValueError("p_choices must be non-empty")
        if any(p < 1 for p in self.p_choices):
            raise ValueError("every p must be >= 1")


def cutmix_box(h: int, w: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Sample ``(top, left, height, width)`` of a box covering about half the grid.

    Aspect ratio is log-uniform in [1/2, 2]. The width is the rounded quotient
    of the target area by the height, so the area misses ``h*w // 2`` by at
    most half a column of the box.
    """
    if h < 1 or w < 1 or h * w < 2:
        raise ValueError(f"cutmix needs at least 2 pixels, got {h}x{w}")
    area = (h * w) // 2
    ratio = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    lo = max(1, -(-area // w))
    hi = min(h, area)
    bh = min(max(int(round(math.sqrt(area * ratio))), lo), hi)
    bw = min(max(int(round(area / bh)), 1), w)
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    top, left, bh, bw = cutmix_box(h, w, rng)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top:top + bh, left:left + bw] = 1
    return mask


def classmix_mask(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Select half of the classes present in ``labels`` (rounded down)."""
    labels = np.asarray(labels)
    present = np.unique(labels)
    k = len(present) // 2
    if k == 0:
        warnings.warn("only one class present; classmix mask is empty", DegenerateMixWarning, stacklevel=2)
        return np.zeros(labels.shape, dtype=np.uint8)
    chosen = rng.choice(present, size=k, replace=False)
    return np.isin(labels, chosen).astype(np.uint8)


def block_edges(n: int, p: int) -> np.ndarray:
    """Block boundaries along one axis; the last block takes the remainder."""
    size = n // p
    edges = np.arange(p + 1) * size
    edges[-1] = n
    return edges


def complexmix_mask(labels: np.ndarray, p: int, num_classes: int, rng: np.random.Generator,
                    present_only: bool = False) -> np.ndarray:
    """Split the map into ``p x p`` blocks and keep ``num_classes // 2`` random classes per block.

    Draw protocol: one ``(p*p, C)`` array of uniform keys, blocks in row-major
    order; a block keeps the ``C // 2`` classes with the smallest keys, which
    is a uniform random subset. With ``present_only`` the same keys rank only
    the classes present in the block and half of those (rounded down) are kept,
    i.e. the ClassMix rule applied locally.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    if p < 1 or p > min(h, w):
        raise ValueError(f"p={p} must be in [1, {min(h, w)}] for a {h}x{w} map")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes})")
    keys = rng.random((p * p, num_classes))
    rows, cols = block_edges(h, p), block_edges(w, p)
    # block index of every pixel
    bi = np.searchsorted(rows, np.arange(h), side="right") - 1
    bj = np.searchsorted(cols, np.arange(w), side="right") - 1
    block_of = bi[:, None] * p + bj[None, :]

    if not present_only:
        rank = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
        selected = rank < num_classes // 2
    else:
        present = np.zeros((p * p, num_classes), dtype=bool)
        present[block_of.ravel(), labels.ravel()] = True
        masked = np.where(present, keys, np.inf)
        rank = np.argsort(np.argsort(masked, axis=1, kind="stable"), axis=1, kind="stable")
        selected = present & (rank < (present.sum(axis=1, keepdims=True) // 2))
    return selected[block_of, labels].astype(np.uint8)


def sample_p(spec: ComplexMixSpec, h: int, w: int, rng: np.random.Generator) -> int:
    allowed = [p for p in spec.p_choices if p <= min(h, w)]
    if not allowed:
        raise ValueError(f"no block size in {spec.p_choices} fits a {h}x{w} image")
    return int(allowed[int(rng.integers(len(allowed)))])
