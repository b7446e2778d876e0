"""Small fully-convolutional segmentation net in numpy, with exact backprop.

Architecture: conv3x3(3->16) + ReLU, conv3x3(16->16) + ReLU, conv1x1(16->C).
All convolutions are stride 1; the 3x3 layers use zero padding 1 so logits
come out at input resolution. Student and teacher share this architecture and
differ only in their ``ModelParams``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import atomic_write

CKPT_MAGIC = "MIXSEG-CKPT 1"


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class ModelParams:
    """Ordered parameter arrays plus matching gradient and momentum buffers."""

    values: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            self.grads.setdefault(name, np.zeros_like(v))
            self.velocity.setdefault(name, np.zeros_like(v))

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: v.copy() for k, v in self.values.items()},
            {k: v.copy() for k, v in self.grads.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def same_shapes(self, other: ModelParams) -> bool:
        return self.names() == other.names() and all(
            self.values[k].shape == other.values[k].shape for k in self.values)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])


@dataclass
class ForwardCache:
    cols0: np.ndarray
    pre1: np.ndarray
    cols1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray
    shape: tuple[int, int]


def _im2col3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (c, h, w, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def _col2im3(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    dcols = dcols.reshape(c, 3, 3, h, w)
    dxp = np.zeros((c, h + 2, w + 2))
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh:kh + h, kw:kw + w] += dcols[:, kh, kw]
    return dxp[:, 1:-1, 1:-1]


class ReferenceNet:
    def __init__(self, num_classes: int, in_channels: int = 3, width: int = 16):
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.width = width

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, k, n = self.in_channels, self.width, self.num_classes
        return {
            "conv1.w": (k, c, 3, 3), "conv1.b": (k,),
            "conv2.w": (k, k, 3, 3), "conv2.b": (k,),
            "conv3.w": (n, k, 1, 1), "conv3.b": (n,),
        }

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        """Fan-in scaled uniform (He) weights, zero biases."""
        values = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                values[name] = rng.uniform(-bound, bound, size=shape)
            else:
                values[name] = np.zeros(shape)
        return ModelParams(values)

    def zero_params(self) -> ModelParams:
        return ModelParams({k: np.zeros(s) for k, s in self.param_shapes().items()})

    def forward(self, params: ModelParams, img: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != self.in_channels:
            raise ValueError(f"expected ({self.in_channels}, H, W) image, got {img.shape}")
        _, h, w = img.shape
        p = params.values
        k = self.width

        with np.errstate(over="ignore", invalid="ignore"):
            cols0 = _im2col3(img)
            z1 = p["conv1.w"].reshape(k, -1) @ cols0 + p["conv1.b"][:, None]
            a1 = np.maximum(z1, 0.0)

            cols1 = _im2col3(a1.reshape(k, h, w))
            z2 = p["conv2.w"].reshape(k, -1) @ cols1 + p["conv2.b"][:, None]
            a2 = np.maximum(z2, 0.0)

            logits = p["conv3.w"].reshape(self.num_classes, k) @ a2 + p["conv3.b"][:, None]
        if not np.all(np.isfinite(logits)):
            raise TrainingDivergence("non-finite activations in forward pass")
        return logits.reshape(self.num_classes, h, w), ForwardCache(cols0, z1, cols1, z2, a2, (h, w))

    def predict(self, params: ModelParams, img: np.ndarray) -> np.ndarray:
        return softmax(self.forward(params, img)[0])

    def backward(self, params: ModelParams, cache: ForwardCache, grad_logits: np.ndarray) -> None:
        """Accumulate d(loss)/d(params) into ``params.grads``."""
        h, w = cache.shape
        if grad_logits.shape != (self.num_classes, h, w):
            raise ValueError(f"grad_logits shape {grad_logits.shape} does not match "
                             f"({self.num_classes}, {h}, {w})")
        p, g = params.values, params.grads
        k = self.width
        d3 = grad_logits.reshape(self.num_classes, h * w)

        g["conv3.w"] += (d3 @ cache.act2.T).reshape(p["conv3.w"].shape)
        g["conv3.b"] += d3.sum(axis=1)
        da2 = p["conv3.w"].reshape(self.num_classes, k).T @ d3

        dz2 = np.where(cache.pre2 > 0, da2, 0.0)
        g["conv2.w"] += (dz2 @ cache.cols1.T).reshape(p["conv2.w"].shape)
        g["conv2.b"] += dz2.sum(axis=1)
        da1 = _col2im3(p["conv2.w"].reshape(k, -1).T @ dz2, k, h, w).reshape(k, h * w)

        dz1 = np.where(cache.pre1 > 0, da1, 0.0)
        g["conv1.w"] += (dz1 @ cache.cols0.T).reshape(p["conv1.w"].shape)
        g["conv1.b"] += dz1.sum(axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the class axis (-3), max-subtracted."""
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def sgd_step(params: ModelParams, lr: float, momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD; weight decay hits weights only, never biases. Clears gradients."""
    for name, w in params.values.items():
        grad = params.grads[name]
        if name.endswith(".w") and weight_decay:
            grad = grad + weight_decay * w
        v = params.velocity[name]
        v *= momentum
        v += grad
        if not np.all(np.isfinite(v)):
            raise TrainingDivergence(f"non-finite update for {name}")
        w -= lr * v
    params.zero_grad()


def poly_lr(it: int, total: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (1.0 - it / total) ** power


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Plain-text manifest (name + shape per line) then raw little-endian float64 data."""
    path = Path(path)
    header = [CKPT_MAGIC]
    for name, v in params.values.items():
        header.append(f"{name} {' '.join(str(d) for d in v.shape)}")
    header.append("END")
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    for v in params.values.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    atomic_write(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    stream = io.BytesIO(raw)
    if stream.readline().decode("ascii").strip() != CKPT_MAGIC:
        raise ValueError(f"{path}: not a mixseg checkpoint")
    manifest = []
    while True:
        line = stream.readline()
        if not line:
            raise ValueError(f"{path}: truncated manifest")
        line = line.decode("ascii").strip()
        if line == "END":
            break
        name, *dims = line.split()
        manifest.append((name, tuple(int(d) for d in dims)))
    values = {}
    for name, shape in manifest:
        n = int(np.prod(shape))
        chunk = stream.read(8 * n)
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated data for {name}")
        values[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
    if stream.read(1):
        raise ValueError(f"{path}: trailing bytes after data")
    return ModelParams(values)

