"""SGD with classical momentum, stepwise learning-rate schedules, flip/translate augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, shuffled_order
from .nn import Model, iter_batches


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    momentum: float = 0.9
    # (until_epoch, lr): lr applies to epochs < until_epoch; last entry usually inf
    lr_schedule: list = field(default_factory=lambda: [(math.inf, 0.1)])
    flip: bool = False
    translate_pixels: int = 0
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = [(float(u), float(lr)) for u, lr in self.lr_schedule]

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr_schedule:
            raise ValueError("lr_schedule is empty")
        untils = [u for u, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(untils, untils[1:])):
            raise ValueError(f"schedule epochs must be strictly increasing, got {untils}")
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ValueError("all learning rates must be positive")
        if self.translate_pixels < 0:
            raise ValueError("translate_pixels must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def eta(self) -> float:
        """Base learning rate (the first schedule entry)."""
        return self.lr_schedule[0][1]


# single-representation / avg-pool recipe, epochs as in the reference runs
REFERENCE_SCHEDULE = [(40, 0.1), (60, 0.02), (80, 0.004), (math.inf, 0.0008)]


def lr_at(schedule, epoch: int) -> float:
    for until, lr in schedule:
        if epoch < until:
            return float(lr)
    return float(schedule[-1][1])


def scaled_schedule(schedule, total_epochs: int, reference_epochs: int) -> list:
    """Compress breakpoints of a long schedule onto a shorter run."""
    out = []
    for until, lr in schedule:
        u = until if math.isinf(until) else max(1, round(until * total_epochs / reference_epochs))
        if out and u <= out[-1][0]:
            continue
        out.append((u, lr))
    return out


@dataclass
class OptimizerState:
    velocity: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()})


class NonFiniteGradient(FloatingPointError):
    pass


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float) -> None:
    """v <- momentum*v + g ; p <- p - lr*v, in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
        v = state.velocity[name]
        if v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {p.data.shape} for {name}")
        v *= momentum
        v += g
        p.data -= lr * v


def augment_batch(images: np.ndarray, idx: np.ndarray, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Random horizontal flip (p=0.5) and zero-padded translation.

    Draws are indexed by (seed, epoch, sample index) so the result does
    not depend on batch composition.
    """
    if not cfg.flip and cfg.translate_pixels == 0:
        return images
    out = np.empty_like(images)
    k = cfg.translate_pixels
    for row, (img, i) in enumerate(zip(images, idx)):
        rng = np.random.default_rng([cfg.seed, epoch, int(i), 7])
        x = img[:, :, ::-1] if cfg.flip and rng.random() < 0.5 else img
        if k:
            dy, dx = rng.integers(-k, k + 1, size=2)
            padded = np.pad(x, ((0, 0), (k, k), (k, k)))
            h, w = x.shape[1:]
            x = padded[:, k + dy : k + dy + h, k + dx : k + dx + w]
        out[row] = x
    return out


def train_step(model: Model, x: np.ndarray, y: np.ndarray, state: OptimizerState, lr: float, momentum: float):
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        h = model.stem_forward(Tensor(x))
        logits = model.run_from(0, h, "train")
        loss = ad.softmax_cross_entropy(logits, y)
    tape.backward(loss)
    sgd_momentum_step(params, {k: p.grad for k, p in params.items()}, state, lr, momentum)
    for p in params.values():
        p.grad = None
    return loss, logits.data


def train_epoch(model: Model, dataset: Dataset, cfg: TrainConfig, epoch: int, state: OptimizerState) -> dict:
    """One seeded pass over ``dataset``; returns lr, mean loss, accuracy."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.image_shape != model.config.input_shape:
        raise ValueError(f"dataset shape {dataset.image_shape} != model input {model.config.input_shape}")
    lr = lr_at(cfg.lr_schedule, epoch)
    order = shuffled_order(len(dataset), cfg.seed, epoch)
    total_loss, correct, seen = 0.0, 0, 0
    for sl in iter_batches(len(order), cfg.batch_size):
        idx = order[sl]
        if len(idx) < 2:  # batch statistics undefined
            continue
        x = augment_batch(dataset.images[idx], idx, cfg, epoch)
        y = dataset.labels[idx]
        loss, logits = train_step(model, x, y, state, lr, cfg.momentum)
        total_loss += float(loss.per_sample.sum())
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(idx)
    return {"lr": lr, "train_loss": total_loss / seen, "train_acc": correct / seen}


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.logits(images[sl], "eval") for sl in iter_batches(len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256):
    """Eval-mode (loss, accuracy, per-sample probabilities)."""
    logp = log_softmax(predict_logits(model, dataset.images, batch_size))
    y = dataset.labels
    loss = float(-logp[np.arange(len(y)), y].mean())
    probs = np.exp(logp)
    acc = float((probs.argmax(axis=1) == y).mean())
    return loss, acc, probs
