"""Noise schedules, corruption, and deterministic denoising steps.

The forward process mixes a clean vector with Gaussian noise,
x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, where abar is the
running product of per-step retention factors.  The reverse step is
the non-Markovian deterministic update driven by a noise estimate;
eta > 0 reintroduces stochasticity up to the ancestral amount.

Two reverse modes exist.  "standard" carries the estimated noise
through the direction term and satisfies the perfect-estimate
round-trip identity; "truncated" drops the direction term and keeps
only the rescaled clean estimate plus fresh noise.  The truncated
variant is retained for comparison because it demonstrably fails the
round-trip identity; "standard" is the default everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateAlphaError, DimensionMismatchError
from .model_store import TrainedModel
from .network import FeedForwardNet, NetSpec
from .numerics import Rng, as_vector, require_finite
from .training import Adam, Normalizer, TrainConfig, backprop_grads

DDIM_MODES = ("standard", "truncated")

ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and their cumulative products.

    betas has length T; alpha_bars has length T + 1 with the index-0
    entry pinned to one, so alpha_bar(t) is meaningful for t in
    [0, T] and the t = 1 -> 0 transition needs no special casing.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=float)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a non-empty one-dimensional array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ConfigError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def sigma(self, t: int, eta: float, t_prev: int | None = None) -> float:
        """Stochasticity of the t -> t_prev transition for a given eta."""
        if t_prev is None:
            t_prev = t - 1
        if not 0 <= t_prev < t <= self.T:
            raise ConfigError(f"invalid transition {t} -> {t_prev}")
        ab_t = self.alpha_bar(t)
        ab_p = self.alpha_bar(t_prev)
        return float(
            eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
        )


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02, shape: str = "linear") -> NoiseSchedule:
    """Build a T-step schedule with a linear or squared-cosine profile."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    if shape == "linear":
        if not (0.0 < beta_min <= beta_max < 1.0):
            raise ConfigError("need 0 < beta_min <= beta_max < 1")
        betas = np.linspace(beta_min, beta_max, T)
    elif shape == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=float)
        f = np.cos((steps / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule shape {shape!r}")
    return NoiseSchedule.from_betas(betas)


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt x0 to step t with the provided noise draw."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise DimensionMismatchError("x0 and eps must have identical shapes")
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"step {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def estimate_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward mixing under a noise estimate."""
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise DimensionMismatchError("x_t and eps_hat must have identical shapes")
    ab = schedule.alpha_bar(t)
    if ab < ALPHA_BAR_FLOOR:
        raise DegenerateAlphaError(f"alpha_bar({t}) = {ab:.3e} too small to invert")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(
    x_t,
    t: int,
    eps_hat,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    mode: str = "standard",
    rng: Rng | None = None,
    t_prev: int | None = None,
) -> np.ndarray:
    """One reverse transition t -> t_prev (default t - 1).

    eta = 0 is fully deterministic; eta > 0 requires an rng for the
    fresh noise draw.  t_prev may skip levels, which is how a short
    trajectory covers the whole schedule.
    """
    if mode not in DDIM_MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {DDIM_MODES}")
    if eta < 0.0:
        raise ConfigError("eta must be non-negative")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t <= schedule.T:
        raise ConfigError(f"invalid transition {t} -> {t_prev}")
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    x0_hat = estimate_x0(x_t, t, eps_hat, schedule)
    ab_p = schedule.alpha_bar(t_prev)
    sig = schedule.sigma(t, eta, t_prev) if eta > 0.0 else 0.0
    out = np.sqrt(ab_p) * x0_hat
    if mode == "standard":
        direction = max(1.0 - ab_p - sig * sig, 0.0)
        out = out + np.sqrt(direction) * eps_hat
    if sig > 0.0:
        if rng is None:
            raise ConfigError("eta > 0 requires an rng")
        out = out + sig * rng.normal(x_t.shape)
    require_finite(out, "ddim step")
    return out


# ---------------------------------------------------------------------------
# Noise-estimator training.
# ---------------------------------------------------------------------------

def train_noise_model(
    data: np.ndarray,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    conditions: np.ndarray | None = None,
    hidden: tuple = (128, 128),
    time_dim: int = 16,
    skips: bool = True,
    val_fraction: float = 0.1,
) -> TrainedModel:
    """Fit a noise estimator to samples (optionally conditioned).

    Data and conditions are z-scored internally and the statistics are
    stored on the artifact.  Each epoch draws one fresh (step, noise)
    pair per example.  Validation uses a held-out slice with a frozen
    set of draws; the final value lands in extra["val_eps_mse"].
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DimensionMismatchError("data must be (n, dim)")
    n, dim = data.shape
    y_norm = Normalizer.fit(data)
    z = y_norm.encode(data)
    cond_dim = 0
    c_all = None
    x_norm = Normalizer.identity(0)
    if conditions is not None:
        conditions = np.asarray(conditions, dtype=float)
        if conditions.shape[0] != n:
            raise DimensionMismatchError("conditions must match data rows")
        cond_dim = conditions.shape[1]
        x_norm = Normalizer.fit(conditions)
        c_all = x_norm.encode(conditions)

    rng = Rng(cfg.seed)
    n_val = int(round(n * val_fraction))
    perm = rng.fork("split").permutation(n)
    val_idx = perm[:n_val]
    trn_idx = perm[n_val:]
    z_trn = z[trn_idx]
    c_trn = c_all[trn_idx] if c_all is not None else None
    n_trn = z_trn.shape[0]

    spec = NetSpec(
        x_dim=dim,
        hidden=tuple(hidden),
        out_dim=dim,
        time_dim=time_dim,
        cond_dim=cond_dim,
        skips=skips,
        final_zero=True,
    )
    net = FeedForwardNet.init(spec, rng.fork("init"))
    opt = Adam(net.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    draw = rng.fork("draws")
    shuffle = rng.fork("shuffle")
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n_trn)
        ts = draw.integers(1, schedule.T + 1, size=n_trn)
        eps = draw.normal((n_trn, dim))
        ab = schedule.alpha_bars[ts]
        x_noised = np.sqrt(ab)[:, None] * z_trn + np.sqrt(1.0 - ab)[:, None] * eps
        losses = []
        for lo in range(0, n_trn, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch_cond = c_trn[idx] if c_trn is not None else None
            loss, grads, _ = backprop_grads(
                net, x_noised[idx], eps[idx], kind="eps", t=ts[idx], cond=batch_cond
            )
            net.set_params(opt.step(net.get_params(), grads.flatten()))
            losses.append(loss)
        history.append(float(np.mean(losses)))

    extra = {"schedule_betas": schedule.betas}
    if n_val:
        vrng = Rng(cfg.seed).fork("val-draws")
        ts = vrng.integers(1, schedule.T + 1, size=n_val)
        eps = vrng.normal((n_val, dim))
        ab = schedule.alpha_bars[ts]
        x_noised = np.sqrt(ab)[:, None] * z[val_idx] + np.sqrt(1.0 - ab)[:, None] * eps
        batch_cond = c_all[val_idx] if c_all is not None else None
        pred = net.forward(x_noised, t=ts, cond=batch_cond)
        extra["val_eps_mse"] = float(np.mean((pred - eps) ** 2))

    return TrainedModel(
        kind="noise",
        net=net,
        x_norm=x_norm,
        y_norm=y_norm,
        seed=cfg.seed,
        train_config=cfg.to_config(),
        loss_history=np.array(history),
        extra=extra,
    )


def model_schedule(model: TrainedModel) -> NoiseSchedule:
    if "schedule_betas" not in model.extra:
        raise ConfigError("model carries no noise schedule")
    return NoiseSchedule.from_betas(np.asarray(model.extra["schedule_betas"], dtype=float))


def predict_noise(model: TrainedModel, z_t, t: int, cond_norm=None) -> np.ndarray:
    """Noise estimate in normalized sample coordinates."""
    z_t = as_vector(z_t, "z_t")
    out = model.net.forward(z_t, t=t, cond=cond_norm)
    return out


def generate(
    model: TrainedModel,
    n: int,
    rng: Rng,
    eta: float = 0.0,
    mode: str = "standard",
    conditions: np.ndarray | None = None,
) -> np.ndarray:
    """Sample by running the full reverse chain from standard noise.

    Used by sanity tests; refinement starts from a prediction instead
    and lives in the guidance module.
    """
    schedule = model_schedule(model)
    dim = model.net.spec.x_dim
    z = rng.normal((n, dim))
    c = None
    if conditions is not None:
        c = model.x_norm.encode(np.asarray(conditions, dtype=float))
    for t in range(schedule.T, 0, -1):
        eps_hat = model.net.forward(z, t=np.full(n, t), cond=c)
        x0_hat = (z - np.sqrt(1.0 - schedule.alpha_bar(t)) * eps_hat) / np.sqrt(
            schedule.alpha_bar(t)
        )
        ab_p = schedule.alpha_bar(t - 1)
        sig = schedule.sigma(t, eta) if eta > 0.0 else 0.0
        z = np.sqrt(ab_p) * x0_hat
        if mode == "standard":
            z = z + np.sqrt(max(1.0 - ab_p - sig * sig, 0.0)) * eps_hat
        if sig > 0.0:
            z = z + sig * rng.normal((n, dim))
    return model.y_norm.decode(z)
