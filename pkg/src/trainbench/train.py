"""Optimizers, learning-rate schedules, LR finder, training loop and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import AugmentSpec, augment_array
from .core import Dataset, RngStream
from .model import (
    HEAD_KINDS,
    LAYERS,
    SOFTMAX_CE,
    FreezeMask,
    ModelParams,
    apply_freeze,
    backward,
    forward,
    head_loss,
)


class NonFiniteError(FloatingPointError):
    pass


class LRFinderDivergedError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


# -- specs ----------------------------------------------------------------------------

_DEFAULT_EPS = {"sgd": 0.0, "adam": 1e-8, "adadelta": 1e-6}


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.95
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in _DEFAULT_EPS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        for name in ("momentum", "beta1", "beta2", "rho"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.eps is None:
            object.__setattr__(self, "eps", _DEFAULT_EPS[self.kind])
        if self.kind != "sgd" and not self.eps > 0:
            raise ValueError("eps must be > 0")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    gamma: float = 0.5
    every: int = 10
    lr_base: float = 1e-4
    lr_max: float = 1e-2
    step_size: int = 100

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "cyclic_triangular"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "step_decay" and not (0 < self.gamma < 1 and self.every >= 1):
            raise ValueError("step_decay needs 0 < gamma < 1 and every >= 1")
        if self.kind == "cyclic_triangular" and not (self.lr_base < self.lr_max and self.step_size >= 1):
            raise ValueError("cyclic schedule needs lr_base < lr_max and step_size >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Full training configuration. Defaults are the final settings of the study."""

    batch_size: int = 16
    learning_rate: float = 2e-5
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    head: str = SOFTMAX_CE
    trainable: tuple = ("head", "dense1")
    patience: int = 100
    max_epochs: int = 1000
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head!r}")
        unknown = set(self.trainable) - set(LAYERS)
        if unknown:
            raise ValueError(f"unknown layers {sorted(unknown)}")
        object.__setattr__(self, "trainable", tuple(n for n in LAYERS if n in set(self.trainable)))
        FreezeMask.unfrozen(self.trainable)

    @property
    def freeze(self) -> FreezeMask:
        return FreezeMask.unfrozen(self.trainable)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "optimizer" in obj:
            obj["optimizer"] = OptimizerSpec(**obj["optimizer"])
        if "schedule" in obj:
            obj["schedule"] = ScheduleSpec(**obj["schedule"])
        if "augment" in obj:
            obj["augment"] = AugmentSpec(**obj["augment"])
        if "trainable" in obj:
            obj["trainable"] = tuple(obj["trainable"])
        return cls(**obj)


# -- optimizers ---------------------------------------------------------------------


def init_optimizer_state(spec: OptimizerSpec, params: ModelParams) -> dict:
    slots = {}
    for name in LAYERS:
        w, b = params[name]
        if spec.kind == "sgd":
            slots[name] = {"v": (np.zeros_like(w), np.zeros_like(b))}
        elif spec.kind == "adam":
            slots[name] = {"m": (np.zeros_like(w), np.zeros_like(b)), "v": (np.zeros_like(w), np.zeros_like(b))}
        else:
            slots[name] = {"sq": (np.zeros_like(w), np.zeros_like(b)), "dx": (np.zeros_like(w), np.zeros_like(b))}
    return {"t": 0, "slots": slots}


def _update(spec: OptimizerSpec, slot: dict, p: np.ndarray, g: np.ndarray, lr: float, t: int, i: int):
    if spec.kind == "sgd":
        v = spec.momentum * slot["v"][i] + g
        return p - lr * v, {"v": v}
    if spec.kind == "adam":
        m = spec.beta1 * slot["m"][i] + (1 - spec.beta1) * g
        v = spec.beta2 * slot["v"][i] + (1 - spec.beta2) * g * g
        m_hat = m / (1 - spec.beta1 ** t)
        v_hat = v / (1 - spec.beta2 ** t)
        return p - lr * m_hat / (np.sqrt(v_hat) + spec.eps), {"m": m, "v": v}
    sq = spec.rho * slot["sq"][i] + (1 - spec.rho) * g * g
    delta = np.sqrt(slot["dx"][i] + spec.eps) / np.sqrt(sq + spec.eps) * g
    dx = spec.rho * slot["dx"][i] + (1 - spec.rho) * delta * delta
    return p - lr * delta, {"sq": sq, "dx": dx}


def optimizer_step(spec: OptimizerSpec, state: dict, params: ModelParams, grads: dict, lr: float,
                   layers=LAYERS) -> tuple[ModelParams, dict]:
    """One update of the listed layers; returns new params and new state."""
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    t = state["t"] + 1
    updates, slots = {}, dict(state["slots"])
    for name in layers:
        gw, gb = grads[name]
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NonFiniteError(f"non-finite gradient in layer {name!r} at step {t}")
        new_p, new_slot = [], {}
        for i, (p, g) in enumerate(zip(params[name], (gw, gb))):
            q, s = _update(spec, state["slots"][name], p, g, lr, t, i)
            new_p.append(q)
            for key, val in s.items():
                new_slot.setdefault(key, []).append(val)
        updates[name] = tuple(new_p)
        slots[name] = {k: tuple(v) for k, v in new_slot.items()}
    return params.replace(updates), {"t": t, "slots": slots}


# -- schedules ------------------------------------------------------------------------


def lr_at(schedule: ScheduleSpec, base_lr: float, epoch: int, step: int) -> float:
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind == "step_decay":
        return base_lr * schedule.gamma ** (epoch // schedule.every)
    cycle = math.floor(1 + step / (2 * schedule.step_size))
    x = abs(step / schedule.step_size - 2 * cycle + 1)
    return schedule.lr_base + (schedule.lr_max - schedule.lr_base) * max(0.0, 1.0 - x)


# -- metrics ------------------------------------------------------------------------


class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    def __init__(self, counts, class_names=None):
        self.counts = np.asarray(counts, dtype=np.int64)
        n = self.counts.shape[0]
        self.class_names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n))

    @classmethod
    def from_predictions(cls, labels, preds, n_classes, class_names=None):
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(counts, class_names)

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def per_class_error(self) -> np.ndarray:
        """1 - recall per class; NaN where the class was never evaluated."""
        rows = self.counts.sum(axis=1)
        diag = np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 1.0 - diag / np.maximum(rows, 1), np.nan)

    def to_json(self) -> dict:
        err = self.per_class_error()
        return {
            "class_names": list(self.class_names),
            "counts": self.counts.tolist(),
            "accuracy": self.accuracy,
            "per_class_error": [None if math.isnan(e) else float(e) for e in err],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["counts"], obj["class_names"])

    def to_text(self) -> str:
        names = list(self.class_names)
        width = max([len(n) for n in names] + [len(str(self.counts.max(initial=0))), 5])
        head = " " * width + " | " + " ".join(n.rjust(width) for n in names) + " | " + "total".rjust(width) + " | error"
        lines = [head, "-" * len(head)]
        err = self.per_class_error()
        for i, name in enumerate(names):
            row = " ".join(str(v).rjust(width) for v in self.counts[i])
            e = "n/a" if math.isnan(err[i]) else f"{100 * err[i]:.2f}%"
            lines.append(f"{name.rjust(width)} | {row} | {str(self.counts[i].sum()).rjust(width)} | {e}")
        lines.append(f"accuracy {self.accuracy:.4f} over {self.total} samples")
        return "\n".join(lines)


def predict(params: ModelParams, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    preds = [forward(params, images[i:i + chunk]).argmax(axis=1) for i in range(0, len(images), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(params: ModelParams, dataset: Dataset, indices) -> tuple[float, np.ndarray, ConfusionMatrix]:
    """Accuracy, per-class error (NaN for absent classes) and confusion matrix."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot evaluate on an empty view")
    preds = predict(params, dataset.images[idx])
    cm = ConfusionMatrix.from_predictions(dataset.labels[idx], preds, dataset.n_classes, dataset.class_names)
    return cm.accuracy, cm.per_class_error(), cm


# -- training -----------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class History:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0

    def __len__(self):
        return len(self.records)

    @property
    def val_accs(self) -> list:
        return [r.val_acc for r in self.records]

    def to_rows(self) -> list:
        return [asdict(r) for r in self.records]


class EarlyStopping:
    """Validation-accuracy monitor in max mode; only a strictly higher value resets patience."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; returns True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch = value, epoch
        return epoch - self.best_epoch >= self.patience


def train_loop(params: ModelParams, dataset: Dataset, train_indices, val_indices, config: TrainConfig,
               rng: RngStream) -> tuple[ModelParams, History]:
    """Mini-batch training with early stopping on validation accuracy.

    Returns the parameter snapshot from the best epoch and the per-epoch history.
    """
    train_idx = np.asarray(train_indices, dtype=np.int64)
    val_idx = np.asarray(val_indices, dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation views must be non-empty")
    if params.arch.n_classes != dataset.n_classes:
        raise ValueError(f"model has {params.arch.n_classes} outputs, dataset has {dataset.n_classes} classes")
    trainable = config.trainable
    state = init_optimizer_state(config.optimizer, params)
    monitor = EarlyStopping(config.patience)
    history = History()
    best = params
    step = 0
    for epoch in range(config.max_epochs):
        order = train_idx[rng.child(f"shuffle:{epoch}").permutation(train_idx.size)]
        aug_rng = rng.child(f"augment:{epoch}")
        losses, lr = [], config.learning_rate
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            x = augment_array(dataset.images[batch], config.augment, aug_rng)
            logits, cache = forward(params, x, return_cache=True)
            loss, dlogits = head_loss(config.head, logits, dataset.labels[batch])
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            losses.append(loss * batch.size)
            lr = lr_at(config.schedule, config.learning_rate, epoch, step)
            if trainable:
                grads = apply_freeze(backward(params, cache, dlogits, layers=trainable), config.freeze)
                params, state = optimizer_step(config.optimizer, state, params, grads, lr, layers=trainable)
            step += 1
        val_acc, _, _ = evaluate(params, dataset, val_idx)
        history.records.append(EpochRecord(epoch, float(sum(losses) / order.size), val_acc, lr))
        improved = val_acc > monitor.best
        stop = monitor.update(val_acc, epoch)
        if improved:
            best = params
        if stop:
            break
    history.best_epoch = monitor.best_epoch
    history.best_val_acc = monitor.best
    return best, history


def patience_from_history(val_accs) -> int:
    """Largest epoch gap between successive strict improvements of validation accuracy."""
    best, last, gap = -math.inf, None, 1
    for epoch, acc in enumerate(val_accs):
        if acc > best:
            if last is not None:
                gap = max(gap, epoch - last)
            best, last = acc, epoch
    return gap


def write_history_csv(history: History, path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc", "lr"])
        for r in history.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_acc), repr(r.lr)])


# -- learning-rate finder ------------------------------------------------------------------


@dataclass
class LRFinderResult:
    suggested_lr: float
    lrs: list
    losses: list
    smoothed: list

    def to_json(self) -> dict:
        return asdict(self)


def lr_range_test(step_fn: Callable[[float], float], lr_min: float, lr_max: float, n_steps: int,
                  beta: float = 0.98, diverge_factor: float = 4.0) -> LRFinderResult:
    """Exponential learning-rate sweep.

    ``step_fn(lr)`` must return the loss of the current mini-batch and then take
    one optimizer step at ``lr``. The loss is smoothed with a bias-corrected
    EMA; the sweep stops once the smoothed loss exceeds ``diverge_factor``
    times its best. The suggestion is the learning rate at the smoothed minimum
    divided by 10.
    """
    if not 0 < lr_min < lr_max:
        raise ValueError("need 0 < lr_min < lr_max")
    if n_steps < 10:
        raise ValueError("need at least 10 steps")
    ratio = lr_max / lr_min
    lrs, losses, smoothed = [], [], []
    avg, best = 0.0, math.inf
    for i in range(n_steps):
        lr = lr_min * ratio ** (i / (n_steps - 1))
        loss = float(step_fn(lr))
        if not math.isfinite(loss):
            break
        avg = beta * avg + (1 - beta) * loss
        sm = avg / (1 - beta ** (i + 1))
        lrs.append(lr)
        losses.append(loss)
        smoothed.append(sm)
        if i > 0 and sm > diverge_factor * best:
            break
        best = min(best, sm)
    if len(smoothed) < 2 or int(np.argmin(smoothed)) == 0 and len(smoothed) < n_steps:
        raise LRFinderDivergedError("loss diverged immediately", LRFinderResult(math.nan, lrs, losses, smoothed))
    return LRFinderResult(lrs[int(np.argmin(smoothed))] / 10.0, lrs, losses, smoothed)


def lr_finder(params: ModelParams, dataset: Dataset, train_indices, config: TrainConfig, rng: RngStream,
              lr_min: float = 1e-7, lr_max: float = 1.0, n_steps: int = 100) -> LRFinderResult:
    """Run the range test on the model, cycling over shuffled mini-batches."""
    idx = np.asarray(train_indices, dtype=np.int64)
    state = {"params": params, "opt": init_optimizer_state(config.optimizer, params), "pos": 0, "epoch": 0,
             "order": idx[rng.child("shuffle:0").permutation(idx.size)]}
    trainable = config.trainable or LAYERS

    def step(lr):
        if state["pos"] >= idx.size:
            state["epoch"] += 1
            state["order"] = idx[rng.child(f"shuffle:{state['epoch']}").permutation(idx.size)]
            state["pos"] = 0
        batch = state["order"][state["pos"]:state["pos"] + config.batch_size]
        state["pos"] += config.batch_size
        p = state["params"]
        logits, cache = forward(p, dataset.images[batch], return_cache=True)
        loss, d = head_loss(config.head, logits, dataset.labels[batch])
        if not math.isfinite(loss):
            return loss
        grads = backward(p, cache, d, layers=trainable)
        try:
            state["params"], state["opt"] = optimizer_step(config.optimizer, state["opt"], p, grads, lr,
                                                           layers=trainable)
        except NonFiniteError:
            return math.inf
        return loss

    return lr_range_test(step, lr_min, lr_max, n_steps)
