"""Mean-teacher training loop with mask-based mixing of unlabeled pairs."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import maskgen
from .core import argmax_labels, fork_rng
from .data import SegDataset, make_split
from .losses import LossReport, combined_loss, confidence_gate, supervised_ce, unsupervised_ce
from .metrics import ConfusionMatrix
from .mixer import mix_images, mix_labels, mix_weights
from .model import ModelParams, ReferenceNet, TrainingDivergence, poly_lr, save_checkpoint, sgd_step, softmax

log = logging.getLogger(__name__)

STRATEGIES = ("cutmix", "classmix", "complexmix", "none")
# Desk-scale schedule for the 32x32 shapes task. A from-scratch 3-layer net
# needs a larger step than the pretrained-backbone recipe in the defaults.
SYNTHETIC_REFERENCE = {"lr0": 0.01, "total_iters": 1000, "warmup_iters": 100}

LOG_COLUMNS = ("iter", "lr", "loss_sup", "loss_unsup", "lambda", "gated_fraction", "miou")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    labeled_fraction: float = 1 / 8
    batch_size: int = 2
    total_iters: int = 40000
    warmup_iters: int | None = None  # None -> 10% of total_iters
    lr0: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    ema_alpha: float = 0.99
    tau: float = 0.95
    lam: float = 1.0
    lambda_rampup_iters: int = 0
    p_choices: tuple[int, ...] = maskgen.DEFAULT_P_CHOICES
    present_only: bool = False
    strategy: str = "complexmix"
    unsup_normalize: str = "gated"
    seed: int = 0
    eval_every: int = 0
    width: int = 16

    def __post_init__(self):
        self.p_choices = tuple(int(p) for p in self.p_choices)
        if self.warmup_iters is None:
            self.warmup_iters = self.total_iters // 10
        self.validate()

    def validate(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(0 < self.labeled_fraction <= 1, "labeled_fraction", "must be in (0, 1]")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.total_iters >= 0, "total_iters", "must be >= 0")
        need(0 <= self.warmup_iters <= self.total_iters, "warmup_iters", "must be in [0, total_iters]")
        need(self.lr0 >= 0, "lr0", "must be >= 0")
        need(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.poly_power >= 0, "poly_power", "must be >= 0")
        need(0 <= self.ema_alpha <= 1, "ema_alpha", "must be in [0, 1]")
        need(0 < self.tau <= 1, "tau", "must be in (0, 1]")
        need(self.lam >= 0, "lam", "must be >= 0")
        need(self.lambda_rampup_iters >= 0, "lambda_rampup_iters", "must be >= 0")
        need(len(self.p_choices) > 0 and min(self.p_choices) >= 1, "p_choices", "must be non-empty, all >= 1")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(self.unsup_normalize in ("gated", "all"), "unsup_normalize", "must be 'gated' or 'all'")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")
        need(self.width >= 1, "width", "must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(name, "unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p_choices"] = list(self.p_choices)
        return d


class EpochSampler:
    """Draws ids without replacement, reshuffling when an epoch runs out."""

    def __init__(self, ids, rng: np.random.Generator):
        self.ids = np.asarray(sorted(ids), dtype=np.int64)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        if len(self.ids) == 0:
            raise ValueError("cannot sample from an empty id set")
        out = []
        while len(out) < k:
            if self._pos >= len(self._order):
                self._order = self.ids[self.rng.permutation(len(self.ids))]
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return np.asarray(out)


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    config: ExperimentConfig
    net: ReferenceNet
    mask_rng: np.random.Generator
    iter: int = 0
    history: list[LossReport] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)

    def check(self) -> None:
        if not self.student.same_shapes(self.teacher):
            raise RuntimeError("student and teacher parameter shapes diverged")
        if self.iter > self.config.total_iters:
            raise RuntimeError("iteration counter ran past total_iters")


def init_state(config: ExperimentConfig, num_classes: int) -> TrainState:
    net = ReferenceNet(num_classes, width=config.width)
    student = net.init_params(fork_rng(config.seed, "init"))
    return TrainState(student, student.copy(), config, net, fork_rng(config.seed, "mask"))


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> None:
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not teacher.same_shapes(student):
        raise ValueError("teacher and student shapes differ")
    for name, t in teacher.values.items():
        t *= alpha
        t += (1.0 - alpha) * student.values[name]


def _forward_batch(net: ReferenceNet, params: ModelParams, images: np.ndarray):
    logits, caches = [], []
    for img in images:
        z, cache = net.forward(params, img)
        logits.append(z)
        caches.append(cache)
    return np.stack(logits), caches


def _lambda_at(config: ExperimentConfig, it: int) -> float:
    if config.lambda_rampup_iters == 0:
        return config.lam
    progress = (it - config.warmup_iters) / config.lambda_rampup_iters
    return config.lam * min(1.0, max(0.0, progress))


def make_mask(strategy: str, pseudo: np.ndarray, num_classes: int, config: ExperimentConfig,
              rng: np.random.Generator) -> np.ndarray:
    h, w = pseudo.shape
    if strategy == "none":
        return np.ones((h, w), dtype=np.uint8)
    if strategy == "cutmix":
        return maskgen.cutmix_mask(h, w, rng)
    if strategy == "classmix":
        return maskgen.classmix_mask(pseudo, rng)
    if strategy == "complexmix":
        spec = maskgen.ComplexMixSpec(config.p_choices, config.present_only)
        p = maskgen.sample_p(spec, h, w, rng)
        return maskgen.complexmix_mask(pseudo, p, num_classes, rng, present_only=config.present_only)
    raise ValueError(f"unknown strategy {strategy!r}")


def _check_loss(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(f"non-finite {what} loss")


def supervised_step(state: TrainState, images: np.ndarray, labels: np.ndarray) -> LossReport:
    cfg = state.config
    lr = poly_lr(state.iter, cfg.total_iters, cfg.lr0, cfg.poly_power)
    state.student.zero_grad()
    logits, caches = _forward_batch(state.net, state.student, images)
    loss, grad = supervised_ce(softmax(logits), labels)
    _check_loss(loss, "supervised")
    for g, cache in zip(grad, caches):
        state.net.backward(state.student, cache, g)
    sgd_step(state.student, lr, cfg.momentum, cfg.weight_decay)
    report = LossReport(loss, 0.0, 0.0, loss, 0.0)
    state.history.append(report)
    state.iter += 1
    return report


def warmup(state: TrainState, next_labeled) -> TrainState:
    """Supervised-only steps, then copy the student into the teacher."""
    if state.iter != 0:
        raise RuntimeError("warmup must start at iteration 0")
    for _ in range(state.config.warmup_iters):
        supervised_step(state, *next_labeled())
    state.teacher = state.student.copy()
    return state


def semi_step(state: TrainState, images: np.ndarray, labels: np.ndarray, unlabeled: np.ndarray,
              force_mask: np.ndarray | None = None) -> LossReport:
    """One student update on a labeled batch plus mixed unlabeled pairs, then EMA.

    Unlabeled image ``k`` is paired with image ``k + 1`` (cyclically); the
    mask always comes from the teacher's prediction for the first of the pair.
    """
    cfg, net = state.config, state.net
    lam = _lambda_at(cfg, state.iter)
    lr = poly_lr(state.iter, cfg.total_iters, cfg.lr0, cfg.poly_power)
    state.student.zero_grad()

    logits, caches = _forward_batch(net, state.student, images)
    sup, grad = supervised_ce(softmax(logits), labels)
    _check_loss(sup, "supervised")
    for g, cache in zip(grad, caches):
        net.backward(state.student, cache, g)

    unsup, gated = 0.0, 0.0
    all_out = False
    if lam > 0:
        teacher_probs = np.stack([net.predict(state.teacher, u) for u in unlabeled])
        pseudo = argmax_labels(teacher_probs)
        gates = confidence_gate(teacher_probs, cfg.tau)
        n = len(unlabeled)
        mixed, mixed_pseudo, mixed_gate = [], [], []
        for a in range(n):
            b = (a + 1) % n
            if force_mask is not None:
                m = force_mask
            else:
                m = make_mask(cfg.strategy, pseudo[a], net.num_classes, cfg, state.mask_rng)
            if not m.any():
                log.debug("iter %d: empty mix mask, mixed image equals u_b", state.iter)
            mixed.append(mix_images(unlabeled[a], unlabeled[b], m))
            mixed_pseudo.append(mix_labels(pseudo[a], pseudo[b], m))
            mixed_gate.append(mix_weights(gates[a], gates[b], m))
        mixed_gate = np.stack(mixed_gate)
        gated = float(mixed_gate.mean())
        all_out = gated == 0.0
        u_logits, u_caches = _forward_batch(net, state.student, np.stack(mixed))
        unsup, u_grad = unsupervised_ce(softmax(u_logits), np.stack(mixed_pseudo), mixed_gate,
                                        normalize=cfg.unsup_normalize)
        _check_loss(unsup, "unsupervised")
        for g, cache in zip(u_grad, u_caches):
            net.backward(state.student, cache, lam * g)

    sgd_step(state.student, lr, cfg.momentum, cfg.weight_decay)
    ema_update(state.teacher, state.student, cfg.ema_alpha)
    report = LossReport(sup, unsup, lam, combined_loss(sup, unsup, lam), gated, all_out)
    state.history.append(report)
    state.iter += 1
    return report


def evaluate(net: ReferenceNet, params: ModelParams, images: np.ndarray, labels: np.ndarray) -> ConfusionMatrix:
    cm = ConfusionMatrix(net.num_classes)
    for img, lab in zip(images, labels):
        cm.accumulate(argmax_labels(net.forward(params, img)[0]), lab)
    return cm


@dataclass
class RunResult:
    state: TrainState
    confusion: ConfusionMatrix

    @property
    def miou(self) -> float:
        return self.confusion.mean_iou()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def run(config: ExperimentConfig, dataset: SegDataset, out_dir: str | Path | None = None) -> RunResult:
    """Split, warm up, train semi-supervised, evaluate the student on the validation set.

    With ``out_dir`` the per-iteration log is appended as training proceeds
    and ``student.ckpt`` / ``teacher.ckpt`` are written at the end. On
    divergence the last good student is written before the error propagates.
    """
    split = make_split(dataset.split.pool, config.labeled_fraction, config.seed,
                       validation=dataset.split.validation)
    state = init_state(config, dataset.num_classes)
    lab_sampler = EpochSampler(split.labeled, fork_rng(config.seed, "labeled"))
    unl_ids = split.unlabeled or split.labeled
    unl_sampler = EpochSampler(unl_ids, fork_rng(config.seed, "unlabeled"))
    val = np.asarray(split.validation, dtype=np.int64)
    bs = config.batch_size

    def next_labeled():
        ids = lab_sampler.take(bs)
        return dataset.images[ids], dataset.labels[ids]

    out = Path(out_dir) if out_dir is not None else None
    writer = log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        log_file = open(out / "log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def record(report: LossReport, lr: float):
        miou = None
        if config.eval_every and state.iter % config.eval_every == 0 and len(val):
            miou = evaluate(state.net, state.student, dataset.images[val], dataset.labels[val]).mean_iou()
            state.evals.append((state.iter, miou))
        if writer is not None:
            writer.writerow([state.iter, _fmt(lr), _fmt(report.supervised_loss), _fmt(report.unsupervised_loss),
                             _fmt(report.lam), _fmt(report.gated_pixel_fraction), _fmt(miou)])

    last_good = state.student.copy()
    try:
        while state.iter < config.warmup_iters:
            lr = poly_lr(state.iter, config.total_iters, config.lr0, config.poly_power)
            last_good = state.student.copy()
            record(supervised_step(state, *next_labeled()), lr)
        state.teacher = state.student.copy()
        while state.iter < config.total_iters:
            lr = poly_lr(state.iter, config.total_iters, config.lr0, config.poly_power)
            last_good = state.student.copy()
            imgs, labs = next_labeled()
            unl = dataset.images[unl_sampler.take(bs)]
            record(semi_step(state, imgs, labs, unl), lr)
        state.check()
    except TrainingDivergence:
        if out is not None:
            save_checkpoint(last_good, out / "student.ckpt")
        raise
    finally:
        if log_file is not None:
            log_file.close()

    cm = evaluate(state.net, state.student, dataset.images[val], dataset.labels[val])
    if out is not None:
        save_checkpoint(state.student, out / "student.ckpt")
        save_checkpoint(state.teacher, out / "teacher.ckpt")
    return RunResult(state, cm)
