"""Hierarchically supervised end-to-end training and the four-way ablation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, sgd_step, softmax_cross_entropy, tape_scope, upsample_bilinear
from .hierarchy import LabelMapSet
from .metrics import MetricsReport, build_report
from .model import MODES, EncoderConfig, Model, StackedHeadConfig, as_image_tensor, build_model, predict
from .synth import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    loss_weights: Optional[tuple[float, ...]] = None
    seed: int = 0
    mode: str = "stack_fc_skip"
    snapshot_every: int = 0
    # lr halves once each milestone fraction of the step budget is reached
    lr_milestones: tuple[float, ...] = (0.6, 0.85)
    lr_decay: float = 0.5
    grad_clip: Optional[float] = 10.0

    def check(self, n_levels: int) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"bad optimiser settings lr={self.lr} momentum={self.momentum}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        w = self.weights(n_levels)
        if len(w) != n_levels or any(x < 0 for x in w):
            raise ValueError(f"loss_weights {w} must be {n_levels} nonnegative numbers")

    def weights(self, n_levels: int) -> tuple[float, ...]:
        return tuple(self.loss_weights) if self.loss_weights is not None else (1.0,) * n_levels

    def lr_at(self, step: int, total_steps: int) -> float:
        k = sum(step >= math.ceil(m * total_steps) for m in self.lr_milestones)
        return self.lr * self.lr_decay**k


def hierarchical_loss_terms(
    scores: Sequence[Tensor], labels: Sequence[np.ndarray], class_counts: Optional[Sequence[int]] = None
) -> list[Tensor]:
    """Per-level pixel-wise cross-entropy, with each score map upsampled to its label resolution."""
    if len(scores) != len(labels):
        raise ValueError(f"{len(scores)} score maps but {len(labels)} label maps")
    terms = []
    for i, (s, y) in enumerate(zip(scores, labels)):
        if class_counts is not None and s.shape[1] != class_counts[i]:
            raise ValueError(f"level {i}: score map has {s.shape[1]} channels, hierarchy has {class_counts[i]} classes")
        y = np.asarray(y)
        if y.ndim == 2:
            y = y[None]
        terms.append(softmax_cross_entropy(upsample_bilinear(s, y.shape[-2], y.shape[-1]), y))
    return terms


def hierarchical_loss(
    scores: Sequence[Tensor],
    labels: LabelMapSet | Sequence[np.ndarray],
    weights: Optional[Sequence[float]] = None,
    class_counts: Optional[Sequence[int]] = None,
) -> Tensor:
    """Weighted sum of the per-level cross-entropies (unit weights by default)."""
    maps = labels.maps if isinstance(labels, LabelMapSet) else list(labels)
    weights = [1.0] * len(scores) if weights is None else list(weights)
    if len(weights) != len(scores):
        raise ValueError(f"{len(weights)} weights for {len(scores)} levels")
    terms = hierarchical_loss_terms(scores, maps, class_counts)
    return _weighted_sum(terms, weights)


def _weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    total = None
    for w, term in zip(weights, terms):
        part = term * Tensor(w, dtype=np.float64)
        total = part if total is None else total + part
    return total


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    level_losses: list[float]
    total: float
    wall_time: float


@dataclass
class TrainLog:
    levels: list[int]
    weights: list[float]
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[MetricsReport] = field(default_factory=list)

    def check_decomposition(self, tol: float = 1e-9) -> float:
        """Largest |total - sum(w * L)| over all records; raises if above ``tol``."""
        worst = 0.0
        for r in self.steps:
            gap = abs(r.total - sum(w * l for w, l in zip(self.weights, r.level_losses)))
            worst = max(worst, gap)
        if worst > tol:
            raise AssertionError(f"loss decomposition off by {worst}")
        return worst

    def epoch_losses(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for r in self.steps:
            out.setdefault(r.epoch, []).append(r.total)
        return [float(np.mean(v)) for _, v in sorted(out.items())]

    def to_csv(self) -> str:
        """Step records without wall time, so identical runs give identical bytes."""
        cols = ",".join(f"loss_level{k}" for k in self.levels)
        lines = [f"# trainlog v1\nstep,epoch,lr,total,{cols}"]
        for r in self.steps:
            vals = ",".join(repr(v) for v in r.level_losses)
            lines.append(f"{r.step},{r.epoch},{r.lr!r},{r.total!r},{vals}")
        return "\n".join(lines) + "\n"

    def validation_csv(self) -> str:
        lines = ["# validation v1\nepoch,level,miou,accuracy,fg_accuracy,avg_precision,avg_recall,avg_f1,consistency"]
        for e, rep in enumerate(self.epochs):
            for k in sorted(rep.levels):
                m = rep.levels[k]
                vals = [m.miou, m.accuracy, m.fg_accuracy, m.avg_precision, m.avg_recall, m.avg_f1, rep.consistency]
                lines.append(f"{e},{k}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def evaluate(model: Model, ds: Dataset, batch_size: int = 16) -> MetricsReport:
    """Metrics of ``model`` on ``ds`` for the levels it predicts."""
    preds, gts = [], []
    for start in range(0, len(ds), batch_size):
        idx = slice(start, start + batch_size)
        p = predict(model, ds.images[idx])
        for i in range(p.maps[0].shape[0]):
            preds.append(LabelMapSet(tuple(m[i] for m in p.maps)))
            gts.append(LabelMapSet(tuple(ds.level_labels(k)[idx][i] for k in range(ds.hierarchy.num_levels))))
    return build_report(preds, gts, ds.hierarchy, model.levels)


def _grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    val: Optional[Dataset] = None,
    on_epoch: Optional[Callable[[int, Model, TrainLog], None]] = None,
) -> tuple[Model, TrainLog]:
    """SGD over seeded shuffles; every level the model predicts is supervised."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    levels = model.levels
    weights = config.weights(len(levels))
    config.check(len(levels))
    counts = [dataset.hierarchy.num_classes(k) for k in levels]
    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    total_steps = per_epoch * config.epochs
    log_ = TrainLog(levels=list(levels), weights=list(weights))
    labels = [dataset.level_labels(k) for k in levels]
    step = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = np.sort(order[b * config.batch_size : (b + 1) * config.batch_size])
            x = as_image_tensor(dataset.images[idx])
            with tape_scope():
                scores = model.forward(x)
                terms = hierarchical_loss_terms(scores, [y[idx] for y in labels], counts)
                total = _weighted_sum(terms, weights)
                value = total.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(step, value)
                backward(total)
            lr = config.lr_at(step, total_steps)
            if config.grad_clip is not None:
                norm = _grad_norm(params)
                if norm > config.grad_clip:
                    for p in params:
                        if p.grad is not None:
                            p.grad = p.grad * (config.grad_clip / norm)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            sgd_step(params, lr, config.momentum)
            log_.steps.append(
                StepRecord(step, epoch, lr, [t.item() for t in terms], value, time.perf_counter() - t0)
            )
            step += 1
        if val is not None:
            log_.epochs.append(evaluate(model, val))
        if on_epoch is not None:
            on_epoch(epoch, model, log_)
        log.debug("epoch %d loss %.4f", epoch, log_.epoch_losses()[-1] if log_.steps else float("nan"))
    return model, log_


STRATEGY_NAMES = {
    "standalone": "Standalone",
    "stack_full": "Stack full FCNs",
    "stack_fc": "Stack FC modules",
    "stack_fc_skip": "Stack FC modules with skip connections",
}


@dataclass
class AblationResult:
    level_names: list[str]
    # strategy -> per-level mIoU (coarse first)
    miou: dict[str, list[float]]
    reports: dict[str, list[MetricsReport]]
    logs: dict[str, list[TrainLog]]
    consistency: dict[str, float]

    CSV_VERSION = "# ablation v1"

    def to_csv(self) -> str:
        head = "strategy," + ",".join(f"{n}_miou" for n in self.level_names)
        lines = [head]
        for mode, vals in self.miou.items():
            lines.append(f"{mode}," + ",".join(f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max(len(s) for s in STRATEGY_NAMES.values()) + 2
        rows = [f"{'mIoU':<{width}}" + "".join(f"{n:>10}" for n in self.level_names)]
        for mode, vals in self.miou.items():
            rows.append(f"{STRATEGY_NAMES[mode]:<{width}}" + "".join(f"{v:>10.4f}" for v in vals))
        return "\n".join(rows)


def standalone_predictions(models: Sequence[Model], ds: Dataset, batch_size: int = 16) -> LabelMapSet:
    """Stack single-level predictions of independently trained nets into one set."""
    maps = []
    for m in models:
        parts = [predict(m, ds.images[s : s + batch_size]).maps[0] for s in range(0, len(ds), batch_size)]
        maps.append(np.concatenate(parts))
    return LabelMapSet(tuple(maps))


def run_ablation(
    train_ds: Dataset,
    val_ds: Dataset,
    encoder: EncoderConfig,
    heads: StackedHeadConfig,
    config: TrainConfig,
    modes: Sequence[str] = MODES,
) -> AblationResult:
    """Train every strategy with the same budget and seed; score each level on ``val_ds``."""
    from .metrics import consistency

    h = train_ds.hierarchy
    names = [lv.name for lv in h.levels]
    miou: dict[str, list[float]] = {}
    reports: dict[str, list[MetricsReport]] = {}
    logs: dict[str, list[TrainLog]] = {}
    cons: dict[str, float] = {}
    for mode in modes:
        if mode == "standalone":
            models, mlogs, mreps = [], [], []
            for k in range(h.num_levels):
                m = build_model(mode, encoder, heads, h, seed=config.seed, level=k)
                cfg = replace(config, mode=mode, loss_weights=None)
                m, lg = train(m, train_ds, cfg)
                models.append(m)
                mlogs.append(lg)
                mreps.append(evaluate(m, val_ds))
            miou[mode] = [mreps[k].levels[k].miou for k in range(h.num_levels)]
            preds = standalone_predictions(models, val_ds)
        else:
            m = build_model(mode, encoder, heads, h, seed=config.seed)
            m, lg = train(m, train_ds, replace(config, mode=mode))
            rep = evaluate(m, val_ds)
            mlogs, mreps = [lg], [rep]
            miou[mode] = [rep.levels[k].miou for k in range(h.num_levels)]
            preds = predict_all(m, val_ds)
        n = preds.maps[0].shape[0]
        cons[mode] = float(np.mean([consistency([p[i] for p in preds.maps], h) for i in range(n)]))
        reports[mode] = mreps
        logs[mode] = mlogs
        log.info("%s: %s", mode, " ".join(f"{v:.4f}" for v in miou[mode]))
    return AblationResult(names, miou, reports, logs, cons)


def predict_all(model: Model, ds: Dataset, batch_size: int = 16) -> LabelMapSet:
    parts = [predict(model, ds.images[s : s + batch_size]).maps for s in range(0, len(ds), batch_size)]
    return LabelMapSet(tuple(np.concatenate([p[j] for p in parts]) for j in range(len(parts[0]))))
