"""Minibatch training with a validation-plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TripletDataset
from .layers import cross_entropy, ib_penalty
from .models import Classifier
from .tensor import RngState, Tensor, backward

METRICS_HEADER = ("epoch", "split", "ce", "penalty", "total_loss", "top1")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    batch_per_n: int = 16  # 0 keeps batch_size fixed
    min_batch: int = 8
    max_epochs: int = 60
    patience: int = 5
    decay_factor: float = 10.0
    max_decays: int = 2
    beta: float = 0.1
    seed: int = 0
    mc_samples: int = 4

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.decay_factor > 1:
            raise ValueError("decay_factor must be > 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.mc_samples < 1 or self.min_batch < 1:
            raise ValueError("batch_size, min_batch, max_epochs and mc_samples must be >= 1")
        if self.batch_per_n < 0:
            raise ValueError("batch_per_n must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    def effective_batch(self, n: int) -> int:
        """Minibatch size for a training set of ``n`` samples.

        With ``batch_per_n > 0`` the batch shrinks on small sets so that an
        epoch still holds about ``batch_per_n`` updates, capped at ``batch_size``.
        """
        if self.batch_per_n == 0:
            return self.batch_size
        return min(self.batch_size, max(self.min_batch, n // self.batch_per_n))


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, decay_mask=None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask or {k: True for k in params}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and self.decay_mask[k]:
                g = g + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict, lr, momentum=0.9, weight_decay=0.0, decay_mask=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask or {k: True for k in params}
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and self.decay_mask[k]:
                g = g + self.weight_decay * p.data
            self.buf[k] = self.momentum * self.buf[k] + g
            p.data -= self.lr * self.buf[k]


def make_optimizer(model: Classifier, config: TrainConfig):
    params = model.named_parameters()
    mask = model.decay_mask()
    if config.optimizer == "adam":
        return Adam(params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay, mask)
    return SGD(params, config.lr, config.momentum, config.weight_decay, mask)


class PlateauSchedule:
    """Divide the learning rate after ``patience`` epochs without a strict
    improvement of the monitored metric; stop once ``max_decays`` decays in a
    row have brought no improvement."""

    def __init__(self, patience: int = 5, factor: float = 10.0, max_decays: int = 2):
        self.patience = patience
        self.factor = factor
        self.max_decays = max_decays
        self.best = -math.inf
        self.bad_epochs = 0
        self.decays_without_gain = 0

    def step(self, metric: float) -> str:
        """Returns one of ``"improved"``, ``"wait"``, ``"decay"``, ``"stop"``."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            self.decays_without_gain = 0
            return "improved"
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return "wait"
        self.bad_epochs = 0
        if self.decays_without_gain >= self.max_decays:
            return "stop"
        self.decays_without_gain += 1
        return "decay"


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    status: str = "ok"
    last_finite_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Diverged(Exception):
    pass


def _batch_args(ds: TripletDataset, idx: np.ndarray):
    present = ds.present[idx]
    if not present.any():
        return ds.x[idx], ds.y[idx], None, None
    return ds.x[idx], ds.y[idx], ds.xstar[idx], present


def predict_logits(model: Classifier, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([model.forward_eval(x[i : i + chunk]).data for i in range(0, len(x), chunk)])


def evaluate(model: Classifier, split: TripletDataset) -> dict:
    """Marginalized (eval-mode) accuracy and cross-entropy."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = predict_logits(model, split.x)
    pred = np.argmax(logits, axis=1)  # first maximum wins ties
    ce = cross_entropy(Tensor(logits), split.y).item()
    return {"top1": float(np.mean(pred == split.y)), "ce": ce}


def validation_penalty(model: Classifier, split: TripletDataset, beta: float) -> float:
    if not model.var_heads or not split.present.any():
        return 0.0
    rows = np.flatnonzero(split.present)
    return float(sum(ib_penalty(s, beta).item() for s in model.sigmas(split.xstar[rows])))


def _snapshot(model: Classifier) -> dict:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def _restore(model: Classifier, snap: dict) -> None:
    for k, p in model.named_parameters().items():
        p.data[...] = snap[k]


def train(model: Classifier, train_split: TripletDataset, val_split: TripletDataset, config: TrainConfig,
          test_split: TripletDataset | None = None) -> RunRecord:
    """Train in place; on return the model holds the best-validation parameters."""
    if len(train_split) == 0 or len(val_split) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if train_split.x.shape[1] != model.arch.input_dim:
        raise ValueError(f"dataset width {train_split.x.shape[1]} != model input_dim {model.arch.input_dim}")

    record = RunRecord(config=asdict(config), seed=config.seed)
    record.config["model"] = model.kind.name
    opt = make_optimizer(model, config)
    schedule = PlateauSchedule(config.patience, config.decay_factor, config.max_decays)
    data_rng = RngState(config.seed).child(10)
    noise_rng = RngState(config.seed).child(11)
    n = len(train_split)
    batch = config.effective_batch(n)
    best = _snapshot(model)
    best_epoch = 0

    try:
        for epoch in range(1, config.max_epochs + 1):
            order = data_rng.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                x, y, xs, present = _batch_args(train_split, idx)
                parts = model.loss(x, y, xs, config.beta, noise_rng, present, samples=config.mc_samples)
                total = parts.total.item()
                if not math.isfinite(total) or abs(total) > DIVERGENCE_LIMIT:
                    raise Diverged(f"loss {total} at epoch {epoch}")
                backward(parts.total)
                opt.step()
                sums += len(idx) * np.array([parts.ce.item(), parts.penalty.item(), total])
            ce, pen, tot = sums / n
            train_eval = evaluate(model, train_split)
            record.rows.append({"epoch": epoch, "split": "train", "ce": ce, "penalty": pen,
                                "total_loss": tot, "top1": train_eval["top1"]})
            val = evaluate(model, val_split)
            vpen = validation_penalty(model, val_split, config.beta) if model.kind.name == "lupi" else 0.0
            record.rows.append({"epoch": epoch, "split": "val", "ce": val["ce"], "penalty": vpen,
                                "total_loss": val["ce"] + vpen, "top1": val["top1"]})
            record.last_finite_epoch = epoch
            action = schedule.step(val["top1"])
            if action == "improved":
                best = _snapshot(model)
                best_epoch = epoch
            elif action == "decay":
                opt.lr = opt.lr / config.decay_factor
            elif action == "stop":
                break
    except Diverged:
        record.status = "diverged"

    _restore(model, best)
    record.final = {"best_epoch": best_epoch, "lr_final": opt.lr, "batch_size": batch}
    record.final["train_top1"] = evaluate(model, train_split)["top1"]
    record.final["val_top1"] = evaluate(model, val_split)["top1"]
    if test_split is not None and len(test_split):
        test = evaluate(model, test_split)
        record.final["test_top1"] = test["top1"]
        record.final["test_ce"] = test["ce"]
    return record


def write_metrics_csv(path, record: RunRecord) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in record.rows:
            w.writerow([row["epoch"], row["split"], repr(float(row["ce"])), repr(float(row["penalty"])),
                        repr(float(row["total_loss"])), repr(float(row["top1"]))])
