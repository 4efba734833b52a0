"""Training protocol: combined CE/focal loss, Adam, cosine warm restarts,
masked updates and validation-based early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from .data import Dataset, SplitIndices
from .network import BranchNetModel, forward, backward

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``record`` holds the epochs completed so far."""

    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


@dataclass
class TrainConfig:
    max_epochs: int = 1500
    patience: int = 100
    batch_size_cap: int = 256
    lr: float = 0.01
    t0: float = 180
    t_mult: float = 1
    ce_weight: float = 0.6
    focal_weight: float = 0.4
    focal_alpha: float = 0.5
    focal_gamma: float = 2.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eta_min: float = 0.0
    seed: int = 0
    restore_best: bool = True
    schedule_per_batch: bool = False

    def __post_init__(self):
        if not math.isclose(self.ce_weight + self.focal_weight, 1.0, abs_tol=1e-12):
            raise ValueError("ce_weight + focal_weight must equal 1")
        for name in ("max_epochs", "patience", "batch_size_cap", "t0", "t_mult", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.eta_min < 0 or self.focal_alpha < 0 or self.focal_gamma < 0:
            raise ValueError("lr, eta_min, focal_alpha and focal_gamma must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def combined_loss(probs, targets, ce_weight=0.6, focal_weight=0.4, alpha=0.5, gamma=2.5):
    """Mean of ce_weight*CE + focal_weight*FL and its gradient w.r.t. the logits.

    ``probs`` must be the softmax of the logits the gradient refers to. p_t
    is clamped at 1e-12 inside the logarithm only.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    B, C = probs.shape
    if targets.shape != (B,) or targets.min() < 0 or targets.max() >= C:
        raise ValueError("targets must be class indices aligned with probs rows")
    rows = np.arange(B)
    pt = probs[rows, targets]
    log_pt = np.log(np.maximum(pt, LOG_CLAMP))
    q = np.clip(1.0 - pt, 0.0, None)
    ce = -log_pt
    fl = -alpha * q ** gamma * log_pt
    loss = float(np.mean(ce_weight * ce + focal_weight * fl))

    # d(-log p_t)/dz = p - e_t ; for FL use dp_t/dz = p_t (e_t - p)
    onehot = np.zeros_like(probs)
    onehot[rows, targets] = 1.0
    d_ce = probs - onehot
    # dFL/dp_t = alpha*(gamma q^(gamma-1) log p_t - q^gamma / p_t)
    # at q = 0 the factor multiplies p_t log p_t = 0, so it is set to 0
    q_gm1 = np.where(q > 0, np.where(q > 0, q, 1.0) ** (gamma - 1), 0.0)
    coef = alpha * (gamma * q_gm1 * pt * log_pt - q ** gamma)  # dFL/dp_t * p_t
    d_fl = coef[:, None] * (onehot - probs)
    dlogits = (ce_weight * d_ce + focal_weight * d_fl) / B
    return loss, dlogits


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts at fractional epoch t."""
    if t < 0:
        raise ValueError("t must be non-negative")
    t0, mult = cfg.t0, cfg.t_mult
    if mult == 1:
        period = t0
        t_cur = math.fmod(t, t0)
    else:
        n = int(math.floor(math.log(t / t0 * (mult - 1) + 1, mult)))
        period = t0 * mult ** n
        t_cur = t - t0 * (mult ** n - 1) / (mult - 1)
        if t_cur >= period:  # float slop at the boundary
            t_cur -= period
            period *= mult
    return cfg.eta_min + (cfg.lr - cfg.eta_min) * (1 + math.cos(math.pi * t_cur / period)) / 2


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, w):
        return cls(np.zeros_like(w, dtype=np.float64), np.zeros_like(w, dtype=np.float64), 0)


def adam_step(w, grad, state: AdamState, lr: float, mask=None,
              beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
    """One bias-corrected Adam update; returns the new weights.

    With a mask the result is re-multiplied by it so masked entries stay
    exactly zero.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(w):
        raise ValueError(f"gradient shape {grad.shape} != weight shape {np.shape(w)}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    new = np.asarray(w, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    if mask is not None:
        new = new * mask
    return new


class Adam:
    """Adam over all trainable tensors of a model; W1 updates are masked."""

    def __init__(self, model: BranchNetModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.states = {name: AdamState.zeros_like(p) for name, p in model.parameters().items()}

    def step(self, grads: dict, lr: float) -> None:
        c = self.cfg
        for name, p in self.model.parameters().items():
            mask = self.model.mask_m1 if name == "w1" else None
            new = adam_step(p, grads[name], self.states[name], lr, mask, c.adam_beta1, c.adam_beta2, c.adam_eps)
            self.model.set_parameter(name, new)

    def state_dict(self):
        return {k: (s.m.copy(), s.v.copy(), s.step) for k, s in self.states.items()}


def train_step(model: BranchNetModel, opt: Adam, X, y, lr: float, cfg: TrainConfig) -> float:
    model.train()
    trace = forward(model, X)
    loss, dlogits = combined_loss(trace.probs, y, cfg.ce_weight, cfg.focal_weight, cfg.focal_alpha, cfg.focal_gamma)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    opt.step(backward(model, trace, dlogits), lr)
    return loss


def eval_loss(model: BranchNetModel, X, y, cfg: TrainConfig) -> float:
    prev = model.mode
    model.eval()
    try:
        probs = forward(model, X).probs
    finally:
        model.mode = prev
    return combined_loss(probs, y, cfg.ce_weight, cfg.focal_weight, cfg.focal_alpha, cfg.focal_gamma)[0]


class EarlyStopping:
    """Tracks the best (strictly lowest) validation loss; 1-based epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.inf

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.best_val_loss,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, json_path, csv_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "train_loss", "val_loss", "lr"])
                for i, row in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
                    w.writerow([i, *(repr(float(v)) for v in row)])


def batch_size_for(n_train: int, cap: int) -> int:
    return min(cap, n_train)


def epoch_batches(train_idx: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one sample is dropped.

    Indices inside a batch are sorted so batch statistics do not depend on
    row order.
    """
    perm = rng.permutation(train_idx)
    batches = [np.sort(perm[i:i + batch_size]) for i in range(0, perm.size, batch_size)]
    return [b for b in batches if b.size >= 2]


def train(model: BranchNetModel, ds: Dataset, splits: SplitIndices, cfg: TrainConfig | None = None):
    """Run the full protocol; returns (model, TrainRecord).

    The model is left in eval mode holding the best-epoch state (unless
    ``cfg.restore_best`` is off).
    """
    cfg = cfg or TrainConfig()
    train_idx = np.asarray(splits.train, dtype=np.int64)
    val_idx = np.asarray(splits.val, dtype=np.int64)
    if train_idx.size < 2:
        raise ValueError("need at least 2 training samples")
    if val_idx.size == 0:
        raise ValueError("early stopping needs a non-empty validation split")
    X, y = ds.features, ds.labels
    Xv, yv = X[val_idx], y[val_idx]
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed)))
    bs = batch_size_for(train_idx.size, cfg.batch_size_cap)
    opt = Adam(model, cfg)
    stopper = EarlyStopping(cfg.patience)
    record = TrainRecord()
    best = model.snapshot()
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        batches = epoch_batches(train_idx, bs, rng)
        total, count = 0.0, 0
        for b, idx in enumerate(batches):
            t = (epoch - 1) + (b / len(batches) if cfg.schedule_per_batch else 0.0)
            lr = cosine_lr(t, cfg)
            try:
                loss = train_step(model, opt, X[idx], y[idx], lr, cfg)
            except FloatingPointError as exc:
                record.stopped_epoch = epoch
                record.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"epoch {epoch}: {exc}", record) from exc
            total += loss * idx.size
            count += idx.size
        vloss = eval_loss(model, Xv, yv, cfg)
        record.train_loss.append(total / count)
        record.val_loss.append(vloss)
        record.lr.append(cosine_lr(epoch - 1, cfg))
        if not math.isfinite(vloss):
            record.stopped_epoch = epoch
            record.wall_time = time.perf_counter() - start
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", record)
        improved, stop = stopper.update(epoch, vloss)
        if improved:
            best = model.snapshot()
        record.stopped_epoch = epoch
        if stop:
            log.info("early stop at epoch %d (best %d, val loss %.6g)", epoch, stopper.best_epoch, stopper.best_loss)
            break

    record.best_epoch = stopper.best_epoch
    record.wall_time = time.perf_counter() - start
    if cfg.restore_best:
        model.restore(best)
    model.eval()
    return model, record
