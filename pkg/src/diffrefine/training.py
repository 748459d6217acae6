"""Optimization of feed-forward nets: losses, Adam, training loops.

Loss kinds
    mse    mean squared error per output entry
    eps    identical arithmetic to mse, tagged for noise-prediction
    pinn   mse plus a squared-potential penalty on denormalized outputs
    bce    sigmoid + binary cross-entropy on a single logit column

Gradients flow through the hand-written backward pass of the network;
training is deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError, NonFiniteLossError
from .network import FeedForwardNet, NetSpec, _sigmoid
from .numerics import Rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"
    pinn_weight: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss not in ("mse", "eps", "pinn", "bce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.loss == "pinn" and self.pinn_weight < 0:
            raise ConfigError("pinn_weight must be non-negative")

    def to_config(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "loss": self.loss,
            "pinn_weight": self.pinn_weight,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**cfg)


@dataclass(frozen=True)
class Normalizer:
    """Per-coordinate affine map to zero mean and unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = 1e-8) -> "Normalizer":
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        std = np.where(std < floor, 1.0, std)
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def encode(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def decode(self, z):
        return self.mean + self.std * np.asarray(z, dtype=float)


class Adam:
    """Standard Adam over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def loss_and_output_grad(kind, y_pred, y_true, pinn_penalty=None, pinn_weight=0.0, row_ids=None):
    """Scalar loss and d(loss)/d(output) for one batch.

    For "pinn", ``pinn_penalty`` maps (decoded predictions, row ids)
    to per-row potential values and gradients in normalized output
    coordinates; the penalty term is the squared potential averaged
    over the batch.
    """
    n = y_pred.shape[0]
    if y_true.shape != y_pred.shape:
        raise DimensionMismatchError(
            f"targets shape {y_true.shape} does not match outputs {y_pred.shape}"
        )
    if kind in ("mse", "eps"):
        diff = y_pred - y_true
        loss = float(np.mean(diff * diff))
        d_out = 2.0 * diff / diff.size
        return loss, d_out
    if kind == "bce":
        if y_pred.shape[1] != 1:
            raise DimensionMismatchError("bce expects a single logit column")
        z = y_pred[:, 0]
        y = y_true[:, 0]
        # log(1 + exp(-|z|)) keeps the loss finite for large logits
        loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
        d_out = ((_sigmoid(z) - y) / n)[:, None]
        return loss, d_out
    if kind == "pinn":
        diff = y_pred - y_true
        loss = float(np.mean(diff * diff))
        d_out = 2.0 * diff / diff.size
        if pinn_penalty is not None and pinn_weight > 0.0:
            phi, phi_grad_norm = pinn_penalty(y_pred, row_ids)
            loss += pinn_weight * float(np.mean(phi * phi))
            d_out = d_out + pinn_weight * (2.0 * phi[:, None] * phi_grad_norm) / n
        return loss, d_out
    raise ConfigError(f"unknown loss {kind!r}")


def backprop_grads(net, x, y, kind="mse", t=None, cond=None, pinn_penalty=None, pinn_weight=0.0, row_ids=None):
    """Loss plus full parameter gradient for one batch."""
    out, cache = net.forward_batch(x, t, cond, want_cache=True)
    loss, d_out = loss_and_output_grad(
        kind, out, np.asarray(y, dtype=float), pinn_penalty, pinn_weight, row_ids
    )
    grads, d_input = net.backward_batch(cache, d_out)
    return loss, grads, d_input


@dataclass
class TrainResult:
    net: FeedForwardNet
    history: np.ndarray  # mean training loss per epoch


def train_network(
    net: FeedForwardNet,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    cond: np.ndarray | None = None,
    pinn_penalty=None,
) -> TrainResult:
    """Mini-batch Adam on (x, y); deterministic given cfg.seed.

    All arrays are expected pre-normalized by the caller.  Aborts with
    NonFiniteLossError (carrying the epoch) if the loss leaves the
    reals.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatchError("x and y must have matching row counts")
    n = x.shape[0]
    rng = Rng(cfg.seed).fork("shuffle")
    opt = Adam(net.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch_cond = cond[idx] if cond is not None else None
            loss, grads, _ = backprop_grads(
                net,
                x[idx],
                y[idx],
                kind=cfg.loss,
                cond=batch_cond,
                pinn_penalty=pinn_penalty,
                pinn_weight=cfg.pinn_weight,
                row_ids=idx,
            )
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"training loss became non-finite", epoch=epoch)
            net.set_params(opt.step(net.get_params(), grads.flatten()))
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return TrainResult(net=net, history=np.array(history))


def windowed_history(history: np.ndarray, window: int = 5) -> np.ndarray:
    """Mean loss over consecutive windows; used for monotonicity checks."""
    history = np.asarray(history, dtype=float)
    usable = (history.size // window) * window
    if usable == 0:
        return history.copy()
    return history[:usable].reshape(-1, window).mean(axis=1)
