"""SGD with momentum under a constant-warmup + cosine schedule."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .classifier import PromptLearner
from .errors import NonFiniteLoss
from .numerics import Rng, mix_seed
from .synthdata import Dataset

_SHUFFLE_STREAM = 0x5F1E


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.002
    warmup_lr: float = 1e-5
    warmup_epochs: int = 1
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (self.base_lr > 0 and self.warmup_lr > 0):
            raise ValueError("learning rates must be positive")
        if not self.epochs >= self.warmup_epochs >= 0:
            raise ValueError("need epochs >= warmup_epochs >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def lr_at(cfg: SgdConfig, step: int, total_steps: int) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    steps_per_epoch = total_steps // cfg.epochs
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step < warmup:
        return cfg.warmup_lr
    t, T = step - warmup, total_steps - warmup
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             velocity: dict[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 0.0):
    """In-place update of ``params`` and ``velocity`` for every key in ``grads``."""
    for k, g in grads.items():
        p = params[k]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        v = velocity.setdefault(k, np.zeros_like(p))
        v *= momentum
        v += g
        p -= lr * v
    return params


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    step_lr: list[float] = field(default_factory=list)
    step_epoch: list[int] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "lr", "loss"])
        for i, (e, lr, loss) in enumerate(zip(self.step_epoch, self.step_lr, self.step_loss)):
            w.writerow([i, e, repr(lr), repr(loss)])
        return buf.getvalue()


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(mix_seed(seed ^ epoch, _SHUFFLE_STREAM)).permutation(n)


def train(learner: PromptLearner, dataset: Dataset, cfg: SgdConfig,
          class_ids=None) -> tuple[bytes, TrainHistory]:
    """Fit the learner's trainable groups in place; returns a COPL1 blob."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    class_ids = list(dataset.base_ids if class_ids is None else class_ids)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    params = learner.params.groups()
    trainable = learner.trainable()
    velocity: dict[str, np.ndarray] = {}
    hist = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        losses = []
        for b in range(steps_per_epoch):
            lr = lr_at(cfg, step, total)
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc = {k: np.zeros_like(params[k]) for k in trainable}
            batch_loss = 0.0
            for i in batch:
                s = dataset.samples[i]
                loss = learner.loss(s.patches, s.label, class_ids)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(step, lr, loss)
                batch_loss += loss
                g = learner.backward(s.label)
                for k in trainable:
                    acc[k] += g[k]
            batch_loss /= len(batch)
            for k in trainable:
                acc[k] /= len(batch)
            sgd_step(params, acc, lr, velocity, cfg.momentum, cfg.weight_decay)
            hist.step_loss.append(batch_loss)
            hist.step_lr.append(lr)
            hist.step_epoch.append(epoch)
            losses.append(batch_loss)
            step += 1
        hist.epoch_loss.append(float(np.mean(losses)))
    return checkpoint.dumps(learner.params), hist
