"""Loss, optimizer and the epoch loop with early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericalError, UsageError, ValidationError
from .network import Model, Parameter
from .rng import stream

log = logging.getLogger(__name__)

CLAMP = 1e-7
EPOCH_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "is_best")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.min_delta < 0:
            raise ConfigError("learning_rate and epsilon must be positive, min_delta non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    is_best: bool

    def as_row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.train_accuracy), repr(self.val_loss),
                repr(self.val_accuracy), str(int(self.is_best))]


def bce_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [1e-7, 1 - 1e-7]; outside that band the gradient
    is zero, as for any clamp.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if not np.isin(target, (0, 1)).all():
        raise ValidationError("targets must be binary (0/1)")
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    y = target.astype(p.dtype, copy=False)
    n = p.size
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n)
    grad = (p - y) / (p * (1.0 - p)) / n
    grad *= (pred >= CLAMP) & (pred <= 1.0 - CLAMP)
    return loss, grad


def pixel_accuracy(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean((pred >= threshold) == (target > 0.5)))


def adam_step(params: Sequence[Parameter], t: int, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if t < 1:
        raise UsageError("Adam step index starts at 1 (bias correction is undefined at t=0)")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * (g * g)
        p.value -= cfg.learning_rate * (p.adam_m / bc1) / (np.sqrt(p.adam_v / bc2) + cfg.epsilon)
        p.zero_grad()


class EarlyStopping:
    """Patience counter over validation loss.

    ``is_best`` is raised on any strict improvement, so the saved checkpoint
    always holds the lowest validation loss seen.  Only improvements larger
    than ``min_delta`` reset the patience counter.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf  # lowest loss seen
        self.reference = math.inf  # loss that reset the counter last
        self.wait = 0

    def update(self, loss: float) -> tuple[bool, bool]:
        is_best = loss < self.best
        if is_best:
            self.best = loss
        if loss < self.reference - self.min_delta:
            self.reference = loss
            self.wait = 0
        else:
            self.wait += 1
        return is_best, self.wait >= self.patience


Dataset = tuple[np.ndarray, np.ndarray]  # images (n, h, w, c), masks (n, h, w, 1)
Validator = Callable[[Model, int], tuple[float, float]]


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return np.concatenate([model.forward(images[i:i + batch_size], "infer")
                           for i in range(0, len(images), batch_size)])


def validation_pass(model: Model, dataset: Dataset, batch_size: int = 8) -> tuple[float, float]:
    images, masks = dataset
    pred = predict(model, images, batch_size)
    loss, _ = bce_loss(pred, masks)
    return loss, pixel_accuracy(pred, masks)


def write_epoch_csv(path: Path, logs: list[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for entry in logs:
            w.writerow(entry.as_row())


def train(model: Model, train_set: Dataset, val_set: Dataset | None, cfg: TrainConfig, out_dir: str | Path,
          validator: Validator | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[Path, list[EpochLog]]:
    """Fit ``model`` in place; returns the best checkpoint path and the epoch log.

    ``validator`` replaces the full validation pass (used to script loss
    curves in tests).  The log is rewritten to ``epochs.csv`` after every epoch.
    """
    cfg.validate()
    images, masks = train_set
    if len(images) == 0:
        raise ConfigError("training set is empty")
    if validator is None:
        if val_set is None or len(val_set[0]) == 0:
            raise ConfigError("validation set is empty")
        validator = lambda m, _epoch: validation_pass(m, val_set, cfg.batch_size)  # noqa: E731
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "best.ckpt"
    csv_path = out_dir / "epochs.csv"

    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    logs: list[EpochLog] = []
    n = len(images)
    step = 0
    model.zero_grad()
    for epoch in range(1, cfg.max_epochs + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum = correct = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], masks[idx]
            step += 1
            pred = model.forward(x, "train", step)
            loss, grad = bce_loss(pred, y)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            model.backward(grad)
            adam_step(model.trainable(), step, cfg)
            loss_sum += loss * len(idx)
            correct += pixel_accuracy(pred, y) * len(idx)
        val_loss, val_acc = validator(model, epoch)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        is_best, stop = stopper.update(val_loss)
        if is_best:
            save_checkpoint(model, ckpt)
        entry = EpochLog(epoch, loss_sum / n, correct / n, float(val_loss), float(val_acc), is_best)
        logs.append(entry)
        write_epoch_csv(csv_path, logs)
        log.info("epoch %d train_loss=%.5f train_acc=%.4f val_loss=%.5f val_acc=%.4f%s", epoch,
                 entry.train_loss, entry.train_accuracy, val_loss, val_acc, " *" if is_best else "")
        if on_epoch is not None:
            on_epoch(entry)
        if stop:
            break
    return ckpt, logs


def evaluate(model: Model, dataset: Dataset, threshold: float = 0.5, batch_size: int = 8,
             macro: bool = False) -> metrics.MetricsReport:
    """Infer-mode metrics; pixels pooled over the whole set unless ``macro``."""
    images, masks = dataset
    if len(images) == 0:
        raise ConfigError("evaluation set is empty")
    probs = predict(model, images, batch_size)
    truth = masks > 0.5
    if macro:
        return metrics.macro_report((metrics.binarize(p, threshold), t, p) for p, t in zip(probs, truth))
    return metrics.report(metrics.binarize(probs, threshold), truth, probs)
