"""Synthetic shapes dataset, labeled/unlabeled splits and on-disk layout.

Directory layout::

    images/NNNN.ppm   labels/NNNN.pgm   split.json
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import atomic_write, fork_rng
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

SHAPE_KINDS = ("disk", "rectangle", "triangle")

# Mean intensities 0.05 / 0.35 / 0.65 / 0.95, hues differ too.
DEFAULT_COLORS = (
    (0.05, 0.05, 0.05),  # background
    (0.50, 0.25, 0.30),  # disk
    (0.40, 0.85, 0.70),  # rectangle
    (0.95, 0.95, 0.95),  # triangle
)


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    cy: float
    cx: float
    size: float


@dataclass(frozen=True)
class ShapesSceneSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    noise_sigma: float = 0.1
    colors: tuple = DEFAULT_COLORS

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be at least 1x1")
        if self.num_classes < 2:
            raise ValueError("need background plus at least one shape class")
        if len(self.colors) < self.num_classes:
            raise ValueError(f"need {self.num_classes} class colors, got {len(self.colors)}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def kind_of(self, cls: int) -> str:
        return SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]


def _shape_pixels(shape: Shape, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - shape.cy, xx - shape.cx
    s = shape.size
    if shape.kind == "disk":
        return dy * dy + dx * dx <= s * s
    if shape.kind == "rectangle":
        return (np.abs(dy) <= s) & (np.abs(dx) <= 0.75 * s)
    if shape.kind == "triangle":
        # apex up, base at cy + s; half-width grows linearly from 0 at the apex
        t = (dy + s) / (2 * s)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * s)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_scene(spec: ShapesSceneSpec, shapes: list[Shape],
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes back to front; noise is added only when ``rng`` is given."""
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    for shape in shapes:
        labels[_shape_pixels(shape, spec.height, spec.width)] = shape.cls
    colors = np.asarray(spec.colors[:spec.num_classes], dtype=np.float64)
    img = colors[labels].transpose(2, 0, 1)
    if rng is not None and spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels


def sample_shapes(spec: ShapesSceneSpec, rng: np.random.Generator) -> list[Shape]:
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    lo, hi = min(spec.height, spec.width) / 8, min(spec.height, spec.width) / 4
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(1, spec.num_classes))
        cy = float(rng.uniform(0, spec.height))
        cx = float(rng.uniform(0, spec.width))
        size = float(rng.uniform(lo, hi))
        shapes.append(Shape(spec.kind_of(cls), cls, cy, cx, size))
    return shapes


def generate_scene(spec: ShapesSceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random scene; the image is quantized to 1/255 so it survives PPM round trips exactly."""
    img, labels = render_scene(spec, sample_shapes(spec, rng), rng)
    return np.floor(img * 255.0 + 0.5) / 255.0, labels


@dataclass
class SplitManifest:
    labeled: list[int]
    unlabeled: list[int]
    validation: list[int]
    labeled_fraction: float
    seed: int

    def __post_init__(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.validation)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise ValueError("split sets overlap")

    @property
    def pool(self) -> list[int]:
        return sorted(self.labeled + self.unlabeled)


def make_split(pool: list[int] | int, labeled_fraction: float, seed: int,
               validation: list[int] | None = None) -> SplitManifest:
    """Seeded shuffle of the training pool, then take the labeled prefix."""
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    ids = list(range(pool)) if isinstance(pool, int) else sorted(int(i) for i in pool)
    n_labeled = math.floor(labeled_fraction * len(ids) + 0.5)
    if n_labeled == 0:
        raise ValueError(f"fraction {labeled_fraction} of {len(ids)} images leaves no labeled data")
    order = fork_rng(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(
        labeled=sorted(shuffled[:n_labeled]),
        unlabeled=sorted(shuffled[n_labeled:]),
        validation=sorted(validation or []),
        labeled_fraction=float(labeled_fraction),
        seed=int(seed),
    )


@dataclass
class SegDataset:
    """All images ``(N, 3, H, W)`` and labels ``(N, H, W)`` indexed by id."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: SplitManifest
    meta: dict = field(default_factory=dict)


def generate_dataset(spec: ShapesSceneSpec, num_train: int = 240, num_val: int = 60,
                     seed: int = 0, labeled_fraction: float = 1 / 8) -> SegDataset:
    n = num_train + num_val
    images = np.empty((n, 3, spec.height, spec.width))
    labels = np.empty((n, spec.height, spec.width), dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = generate_scene(spec, fork_rng(seed, f"scene-{i}"))
    split = make_split(num_train, labeled_fraction, seed, validation=list(range(num_train, n)))
    meta = {"scene": asdict(spec), "seed": seed}
    return SegDataset(images, labels, spec.num_classes, split, meta)


def write_dataset(ds: SegDataset, root: str | Path) -> None:
    root = Path(root)
    for i in range(len(ds.images)):
        write_ppm(root / "images" / f"{i:04d}.ppm", ds.images[i])
        write_pgm(root / "labels" / f"{i:04d}.pgm", ds.labels[i], ds.num_classes)
    payload = {
        "num_classes": ds.num_classes,
        "num_images": len(ds.images),
        **asdict(ds.split),
        "meta": ds.meta,
    }
    atomic_write(root / "split.json", (json.dumps(payload, indent=2) + "\n").encode())


def load_dataset(root: str | Path) -> SegDataset:
    root = Path(root)
    manifest = json.loads((root / "split.json").read_text())
    n = manifest["num_images"]
    imgs, labs = [], []
    for i in range(n):
        imgs.append(read_ppm(root / "images" / f"{i:04d}.ppm"))
        lab, c = read_pgm(root / "labels" / f"{i:04d}.pgm")
        if c != manifest["num_classes"]:
            raise ValueError(f"label file {i:04d} declares {c} classes, manifest says {manifest['num_classes']}")
        labs.append(lab)
    split = SplitManifest(manifest["labeled"], manifest["unlabeled"], manifest["validation"],
                          manifest["labeled_fraction"], manifest["seed"])
    return SegDataset(np.stack(imgs), np.stack(labs), manifest["num_classes"], split,
                      manifest.get("meta", {}))
