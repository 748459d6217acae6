"""Feed-forward nets with mirrored additive skips and explicit backprop.

No autograd framework: the forward pass caches pre-activations and the
backward pass replays them in reverse.  The architecture is a plain
multilayer perceptron whose hidden halves can be tied by additive skip
connections (output of hidden layer i is added to the pre-activation
of its mirror), which requires a width-symmetric hidden stack.  Step
inputs enter through a fixed sinusoidal embedding concatenated to the
feature vector, condition vectors are concatenated the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatchError
from .numerics import Rng, require_finite


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z):
    """Sigmoid-weighted linear unit, z * sigmoid(z)."""
    return z * _sigmoid(z)


def silu_prime(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


_ACTIVATIONS = {"silu": (silu, silu_prime)}


class TimeEmbedding:
    """Sinusoidal embedding of an integer step index.

    Even slots carry sin, odd slots cos, at geometrically spaced
    frequencies; entries are bounded by one and the map is injective
    over practical step ranges for dim >= 8.
    """

    def __init__(self, dim: int, base: float = 10000.0):
        if dim <= 0 or dim % 2 != 0:
            raise ConfigError(f"embedding dim must be positive and even, got {dim}")
        self.dim = dim
        half = dim // 2
        self.freqs = base ** (-np.arange(half) / half)

    def __call__(self, t) -> np.ndarray:
        ang = float(t) * self.freqs
        out = np.empty(self.dim)
        out[0::2] = np.sin(ang)
        out[1::2] = np.cos(ang)
        return out

    def batch(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        ang = ts[:, None] * self.freqs[None, :]
        out = np.empty((ts.shape[0], self.dim))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; the parameter layout is derived from it."""

    x_dim: int
    hidden: tuple
    out_dim: int
    time_dim: int = 0
    cond_dim: int = 0
    skips: bool = False
    activation: str = "silu"
    final_zero: bool = False

    def __post_init__(self):
        if self.x_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("x_dim and out_dim must be positive")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.time_dim and (self.time_dim % 2 != 0):
            raise ConfigError("time_dim must be even")
        if self.skips:
            for src, dst in self.skip_pairs():
                if self.hidden[src - 1] != self.hidden[dst - 1]:
                    raise ConfigError(
                        "additive skips require mirror-symmetric hidden widths"
                    )

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.time_dim + self.cond_dim

    def widths(self) -> list:
        return [self.in_dim, *self.hidden, self.out_dim]

    def skip_pairs(self):
        """(src, dst) pairs of 1-indexed hidden layers, src < dst."""
        if not self.skips:
            return []
        m = len(self.hidden)
        return [(i, m + 1 - i) for i in range(1, m // 2 + 1) if i < m + 1 - i]

    def to_config(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "time_dim": self.time_dim,
            "cond_dim": self.cond_dim,
            "skips": self.skips,
            "activation": self.activation,
            "final_zero": self.final_zero,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NetSpec":
        return cls(
            x_dim=int(cfg["x_dim"]),
            hidden=tuple(int(h) for h in cfg["hidden"]),
            out_dim=int(cfg["out_dim"]),
            time_dim=int(cfg.get("time_dim", 0)),
            cond_dim=int(cfg.get("cond_dim", 0)),
            skips=bool(cfg.get("skips", False)),
            activation=str(cfg.get("activation", "silu")),
            final_zero=bool(cfg.get("final_zero", False)),
        )


@dataclass
class Gradients:
    d_weights: list
    d_biases: list

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.d_weights, self.d_biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)


class FeedForwardNet:
    """MLP with optional mirrored additive skips and a linear head."""

    def __init__(self, spec: NetSpec, weights: list, biases: list):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self._embed = TimeEmbedding(spec.time_dim) if spec.time_dim else None
        self._act, self._act_prime = _ACTIVATIONS[spec.activation]
        self._skip_into = {dst: src for src, dst in spec.skip_pairs()}

    @classmethod
    def init(cls, spec: NetSpec, rng: Rng) -> "FeedForwardNet":
        """Scaled-normal initialization; final layer optionally zeroed."""
        widths = spec.widths()
        weights = []
        biases = []
        last = len(widths) - 2
        for j in range(len(widths) - 1):
            fan_in, fan_out = widths[j], widths[j + 1]
            if spec.final_zero and j == last:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.normal((fan_out, fan_in)) * np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.param_count():
            raise DimensionMismatchError(
                f"expected {self.param_count()} parameters, got {flat.size}"
            )
        pos = 0
        for j in range(len(self.weights)):
            w = self.weights[j]
            self.weights[j] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            b = self.biases[j]
            self.biases[j] = flat[pos : pos + b.size].copy()
            pos += b.size

    def _assemble_input(self, x, t, cond) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.spec.x_dim:
            raise DimensionMismatchError(
                f"x has width {x.shape[1]}, expected {self.spec.x_dim}"
            )
        parts = [x]
        if self.spec.time_dim:
            if t is None:
                raise DimensionMismatchError("net expects a step input t")
            ts = np.full(x.shape[0], float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=float)
            parts.append(self._embed.batch(ts))
        if self.spec.cond_dim:
            if cond is None:
                raise DimensionMismatchError("net expects a condition vector")
            c = np.asarray(cond, dtype=float)
            if c.ndim == 1:
                c = np.broadcast_to(c, (x.shape[0], c.shape[0]))
            if c.shape[1] != self.spec.cond_dim:
                raise DimensionMismatchError(
                    f"condition has width {c.shape[1]}, expected {self.spec.cond_dim}"
                )
            parts.append(c)
        return np.concatenate(parts, axis=1), single

    def forward(self, x, t=None, cond=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            y, _ = self.forward_batch(x[None, :], t, cond)
            return y[0]
        y, _ = self.forward_batch(x, t, cond)
        return y

    def forward_batch(self, x, t=None, cond=None, want_cache: bool = False):
        """Batched forward pass; returns (outputs, cache or None)."""
        inp, _ = self._assemble_input(x, t, cond)
        m = len(self.spec.hidden)
        cache = ForwardCache(inputs=inp) if want_cache else None
        a = inp
        acts = [inp]
        pres = []
        for j in range(1, m + 1):
            z = a @ self.weights[j - 1].T + self.biases[j - 1][None, :]
            src = self._skip_into.get(j)
            if src is not None:
                z = z + acts[src]
            a = self._act(z)
            pres.append(z)
            acts.append(a)
        out = a @ self.weights[m].T + self.biases[m][None, :]
        if want_cache:
            cache.activations = acts
            cache.pre_activations = pres
        return out, cache

    def backward_batch(self, cache: ForwardCache, d_out: np.ndarray):
        """Backpropagate d_loss/d_output; returns (Gradients, d_input).

        d_input covers the assembled input row (x, step embedding,
        condition); slice the first x_dim columns for the gradient
        with respect to x alone.
        """
        m = len(self.spec.hidden)
        acts = cache.activations
        pres = cache.pre_activations
        d_w = [None] * (m + 1)
        d_b = [None] * (m + 1)
        d_a = [np.zeros_like(a) for a in acts]

        d_w[m] = d_out.T @ acts[m]
        d_b[m] = d_out.sum(axis=0)
        d_a[m] += d_out @ self.weights[m]

        for j in range(m, 0, -1):
            d_z = d_a[j] * self._act_prime(pres[j - 1])
            d_w[j - 1] = d_z.T @ acts[j - 1]
            d_b[j - 1] = d_z.sum(axis=0)
            d_a[j - 1] += d_z @ self.weights[j - 1]
            src = self._skip_into.get(j)
            if src is not None:
                d_a[src] += d_z
        return Gradients(d_weights=d_w, d_biases=d_b), d_a[0]

    def input_gradient(self, d_input_full: np.ndarray) -> np.ndarray:
        """Restrict an assembled-input gradient to the x columns."""
        return d_input_full[:, : self.spec.x_dim]

    def clone(self) -> "FeedForwardNet":
        return FeedForwardNet(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )
