"""Pixel-wise cross-entropy losses with gradients w.r.t. logits.

Inputs are batched: probabilities ``(N, C, H, W)`` from softmax and targets
``(N, H, W)``. Gradients returned are d(loss)/d(logits), using the
softmax-cross-entropy identity ``p - onehot``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import one_hot

LOG_EPS = 1e-12


@dataclass
class LossReport:
    supervised_loss: float
    unsupervised_loss: float
    lam: float
    total: float
    gated_pixel_fraction: float
    all_gated_out: bool = False


def _batched(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    if pred.ndim != 4 or target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} do not match")
    return pred, target


def _pixel_nll(pred, target):
    onehot = one_hot(target, pred.shape[1])
    nll = -np.sum(onehot * np.log(np.maximum(pred, LOG_EPS)), axis=1)
    return nll, onehot


def supervised_ce(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred_b, target_b = _batched(pred, target)
    n, _, h, w = pred_b.shape
    nll, onehot = _pixel_nll(pred_b, target_b)
    norm = n * h * w
    grad = (pred_b - onehot) / norm
    return float(nll.sum() / norm), grad.reshape(np.shape(pred))


def unsupervised_ce(pred: np.ndarray, pseudo: np.ndarray, gate: np.ndarray,
                    normalize: str = "gated") -> tuple[float, np.ndarray]:
    """Confidence-gated cross-entropy against pseudo-labels.

    ``normalize="gated"`` divides by the number of gated-in pixels;
    ``normalize="all"`` divides by N*H*W like the supervised term. An
    all-zero gate gives loss 0 and a zero gradient in both modes.
    """
    pred_b, pseudo_b = _batched(pred, pseudo)
    gate_b = np.asarray(gate, dtype=np.float64).reshape(pseudo_b.shape)
    n, _, h, w = pred_b.shape
    nll, onehot = _pixel_nll(pred_b, pseudo_b)
    if normalize == "gated":
        norm = gate_b.sum()
    elif normalize == "all":
        norm = float(n * h * w)
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    if gate_b.sum() == 0:
        return 0.0, np.zeros(np.shape(pred))
    grad = gate_b[:, None] * (pred_b - onehot) / norm
    return float((gate_b * nll).sum() / norm), grad.reshape(np.shape(pred))


def combined_loss(sup: float, unsup: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return sup + lam * unsup


def confidence_gate(teacher_probs: np.ndarray, tau: float) -> np.ndarray:
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    return (np.max(teacher_probs, axis=-3) >= tau).astype(np.float64)
