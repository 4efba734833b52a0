"""BranchNet forward pass and exact backpropagation in numpy.

    y = softmax(W2 . BN_post(sigmoid(BN_pre(W1~ . BN_in(x)))))

with W1~ = W1 * M1. Only W1 (and optionally the batch-norm affine
parameters) is trainable; W2 is stored read-only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .branchmap import Architecture

MODEL_FORMAT = "branchnet-model/1"
TRAIN = "train"
EVAL = "eval"


class BatchNorm:
    """Per-feature batch normalization over the batch axis.

    Train mode normalizes with the biased batch variance; running statistics
    track the unbiased variance, as the common frameworks do.
    """

    def __init__(self, width: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        self.width = width
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, x, train: bool, update_running: bool = True):
        if train:
            n = x.shape[0]
            mu = x.mean(axis=0)
            xc = x - mu
            var = (xc * xc).mean(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv_std
            if update_running:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * var * (n / (n - 1))
            return self.gamma * xhat + self.beta, (xhat, inv_std)
        xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return self.gamma * xhat + self.beta, None

    def backward(self, dout, cache):
        xhat, inv_std = cache
        n = dout.shape[0]
        dgamma = (dout * xhat).sum(axis=0)
        dbeta = dout.sum(axis=0)
        dxhat = dout * self.gamma
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    def state(self) -> dict:
        return {k: getattr(self, k).copy() for k in ("gamma", "beta", "running_mean", "running_var")}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, np.array(v, dtype=np.float64))

    def config(self) -> dict:
        return {"width": self.width, "eps": self.eps, "momentum": self.momentum}


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _rowwise_matmul(a, b_t):
    # a @ b_t.T computed row by row without BLAS blocking, so every output row
    # is bit-identical no matter how the batch is chunked
    return np.einsum("bk,hk->bh", a, b_t)


@dataclass
class ForwardTrace:
    mode: str
    x: np.ndarray
    a0: np.ndarray
    z1: np.ndarray
    n1: np.ndarray
    s: np.ndarray
    a2: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    caches: dict = field(default_factory=dict)


class BranchNetModel:
    """Masked single-hidden-layer network built from an Architecture."""

    BN_NAMES = ("bn_in", "bn_pre", "bn_post")

    def __init__(self, w1, mask_m1, w2, eps=1e-5, momentum=0.1, affine_trainable=True, dtype=np.float64):
        mask = np.asarray(mask_m1, dtype=np.float64)
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask_m1 must be binary")
        w1 = np.asarray(w1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        H, d = mask.shape
        if w1.shape != (H, d) or w2.shape[1] != H:
            raise ValueError(f"inconsistent shapes: w1 {w1.shape}, mask {mask.shape}, w2 {w2.shape}")
        self.dtype = np.dtype(dtype)
        self.mask_m1 = mask
        self.mask_m1.setflags(write=False)
        self.w1 = (w1 * mask).astype(self.dtype)
        w2.setflags(write=False)
        self.w2 = w2
        self.d, self.H, self.C = d, H, w2.shape[0]
        self.affine_trainable = affine_trainable
        self.bn_in = BatchNorm(d, eps, momentum)
        self.bn_pre = BatchNorm(H, eps, momentum)
        self.bn_post = BatchNorm(H, eps, momentum)
        self.mode = TRAIN
        self.meta: dict = {}

    @classmethod
    def from_architecture(cls, arch: Architecture, **kwargs) -> "BranchNetModel":
        return cls(arch.w1_init, arch.mask_m1, arch.w2, **kwargs)

    def train(self):
        self.mode = TRAIN
        return self

    def eval(self):
        self.mode = EVAL
        return self

    def bns(self):
        return [(name, getattr(self, name)) for name in self.BN_NAMES]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name (live references)."""
        params = {"w1": self.w1}
        if self.affine_trainable:
            for name, bn in self.bns():
                params[f"{name}.gamma"] = bn.gamma
                params[f"{name}.beta"] = bn.beta
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "w1":
            self.w1 = (np.asarray(value, dtype=np.float64) * self.mask_m1).astype(self.dtype)
            return
        bn_name, attr = name.split(".")
        setattr(getattr(self, bn_name), attr, np.asarray(value, dtype=np.float64))

    def snapshot(self) -> dict:
        return {"w1": self.w1.copy(), **{name: bn.state() for name, bn in self.bns()}}

    def restore(self, snap: dict) -> None:
        self.w1 = snap["w1"].copy()
        for name, bn in self.bns():
            bn.load_state(snap[name])

    def forward(self, X, update_running: bool = True) -> ForwardTrace:
        return forward(self, X, update_running)

    def backward(self, trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
        return backward(self, trace, dlogits)

    def predict(self, X, chunk: int | None = None):
        return predict(self, X, chunk)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = {
            "format": MODEL_FORMAT,
            "d": self.d,
            "H": self.H,
            "C": self.C,
            "mode": self.mode,
            "dtype": self.dtype.str,
            "affine_trainable": self.affine_trainable,
            "bn": {name: {**bn.config(), **{k: v.tolist() for k, v in bn.state().items()}}
                   for name, bn in self.bns()},
            "meta": self.meta,
            "matrices": {
                "w1": serialize.write_matrix(os.path.join(directory, "w1.bin"), self.w1),
                "mask_m1": serialize.write_matrix(os.path.join(directory, "mask_m1.bin"), self.mask_m1),
                "w2": serialize.write_matrix(os.path.join(directory, "w2.bin"), self.w2),
            },
        }
        with open(os.path.join(directory, "model.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, directory) -> "BranchNetModel":
        with open(os.path.join(directory, "model.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {meta.get('format')!r}")
        m = {k: serialize.read_matrix(os.path.join(directory, v["file"]), v) for k, v in meta["matrices"].items()}
        bn_cfg = meta["bn"]["bn_in"]
        model = cls(m["w1"], m["mask_m1"], m["w2"], eps=bn_cfg["eps"], momentum=bn_cfg["momentum"],
                    affine_trainable=meta["affine_trainable"], dtype=np.dtype(meta["dtype"]))
        for name, bn in model.bns():
            bn.load_state({k: meta["bn"][name][k] for k in ("gamma", "beta", "running_mean", "running_var")})
        model.mode = meta["mode"]
        model.meta = meta.get("meta", {})
        return model


def forward(model: BranchNetModel, X, update_running: bool = True) -> ForwardTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError(f"expected input of shape (batch, {model.d}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    train = model.mode == TRAIN
    if train and X.shape[0] < 2:
        raise ValueError("train-mode forward needs a batch of at least 2 rows")
    w1 = model.w1.astype(np.float64) * model.mask_m1
    matmul = (lambda a, b: a @ b.T) if train else _rowwise_matmul

    a0, c_in = model.bn_in.forward(X, train, update_running)
    z1 = matmul(a0, w1)
    n1, c_pre = model.bn_pre.forward(z1, train, update_running)
    s = sigmoid(n1)
    a2, c_post = model.bn_post.forward(s, train, update_running)
    logits = matmul(a2, model.w2)
    probs = softmax(logits)
    return ForwardTrace(model.mode, X, a0, z1, n1, s, a2, logits, probs,
                        {"bn_in": c_in, "bn_pre": c_pre, "bn_post": c_post})


def backward(model: BranchNetModel, trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
    """Gradients of the loss for every trainable tensor, given dLoss/dlogits."""
    if trace.mode != TRAIN:
        raise ValueError("backward needs a train-mode trace (batch statistics)")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape:
        raise ValueError(f"dlogits shape {dlogits.shape} != logits shape {trace.logits.shape}")
    w1 = model.w1.astype(np.float64) * model.mask_m1

    da2 = dlogits @ model.w2
    ds, dg_post, db_post = model.bn_post.backward(da2, trace.caches["bn_post"])
    dn1 = ds * trace.s * (1.0 - trace.s)
    dz1, dg_pre, db_pre = model.bn_pre.backward(dn1, trace.caches["bn_pre"])
    grads = {"w1": (dz1.T @ trace.a0) * model.mask_m1}
    if model.affine_trainable:
        da0 = dz1 @ w1
        _, dg_in, db_in = model.bn_in.backward(da0, trace.caches["bn_in"])
        grads.update({
            "bn_in.gamma": dg_in, "bn_in.beta": db_in,
            "bn_pre.gamma": dg_pre, "bn_pre.beta": db_pre,
            "bn_post.gamma": dg_post, "bn_post.beta": db_post,
        })
    return grads


def predict(model: BranchNetModel, X, chunk: int | None = None):
    """Class indices (ties to the lower index) and probability matrix."""
    if model.mode != EVAL:
        raise ValueError("predict needs an eval-mode model")
    X = np.asarray(X, dtype=np.float64)
    if chunk is None:
        probs = forward(model, X).probs
    else:
        probs = np.concatenate([forward(model, X[i:i + chunk]).probs for i in range(0, X.shape[0], chunk)])
    return np.argmax(probs, axis=1), probs
