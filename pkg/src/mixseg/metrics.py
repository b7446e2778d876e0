"""Confusion-matrix IoU evaluation."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with truth ``t`` predicted as ``p``."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        c = self.num_classes
        for a in (pred, truth):
            if a.size and (a.min() < 0 or a.max() >= c):
                raise ValueError(f"class values must lie in [0, {c})")
        idx = truth.ravel().astype(np.int64) * c + pred.ravel().astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def iou_per_class(self) -> np.ndarray:
        return iou_per_class(self.counts)

    def mean_iou(self) -> float:
        return mean_iou(self.counts)


def iou_per_class(counts: np.ndarray) -> np.ndarray:
    """Per-class IoU; classes absent from both prediction and truth are NaN."""
    counts = np.asarray(counts, dtype=np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), np.nan)


def mean_iou(counts: np.ndarray) -> float:
    """Mean over defined classes, summed in exact rationals and rounded once."""
    counts = np.asarray(counts, dtype=np.int64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    terms = [Fraction(int(i), int(u)) for i, u in zip(inter, union) if u > 0]
    return float(sum(terms) / len(terms)) if terms else float("nan")


def mean_iou_over_seeds(values) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; a single run has deviation 0."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("need at least one run")
    mean = sum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def format_cell(mean: float, std: float) -> str:
    """Render fractions as a percentage cell, e.g. ``62.25 ± 1.22``."""
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def result_columns(num_classes: int) -> list[str]:
    return ["strategy", "labeled_fraction", "seed", "status"] + [f"iou_{c}" for c in range(num_classes)] + ["miou"]


def result_row(strategy: str, fraction: float, seed: int, cm: ConfusionMatrix | None,
               num_classes: int, status: str = "ok") -> dict:
    row = {"strategy": strategy, "labeled_fraction": repr(float(fraction)), "seed": str(seed), "status": status}
    iou = cm.iou_per_class() if cm is not None else [float("nan")] * num_classes
    for c in range(num_classes):
        row[f"iou_{c}"] = "" if math.isnan(iou[c]) else repr(float(iou[c]))
    row["miou"] = repr(cm.mean_iou()) if cm is not None else ""
    return row


def summarize(rows: list[dict]) -> dict[tuple[str, float], tuple[float, float, int]]:
    """Group successful result rows by (strategy, fraction) into (mean, std, n_runs)."""
    groups: dict[tuple[str, float], list[float]] = {}
    for row in rows:
        if row.get("status", "ok") != "ok" or row.get("miou", "") == "":
            continue
        key = (row["strategy"], float(row["labeled_fraction"]))
        groups.setdefault(key, []).append(float(row["miou"]))
    return {k: (*mean_iou_over_seeds(v), len(v)) for k, v in groups.items()}


def fraction_label(fraction: float) -> str:
    if fraction == 1:
        return "Full"
    inv = 1 / fraction
    return f"1/{round(inv)}" if abs(inv - round(inv)) < 1e-9 else f"{fraction:g}"


def summary_table(summary: dict, strategies: list[str], fractions: list[float]) -> list[list[str]]:
    """Rows are strategies, columns are labeled fractions, cells read ``mm.mm ± s.ss``."""
    table = [["strategy"] + [fraction_label(f) for f in fractions]]
    for s in strategies:
        cells = []
        for f in fractions:
            hit = summary.get((s, float(f)))
            cells.append(format_cell(hit[0], hit[1]) if hit else "N/A")
        table.append([s] + cells)
    return table
