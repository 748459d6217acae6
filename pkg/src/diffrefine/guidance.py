"""Constraint-guided refinement of predictions along denoising paths.

Each reverse transition is corrected along the constraint descent
direction delta = -grad/||grad||.  The correction length gamma has a
closed form: it minimizes the proximal objective

    L(gamma) = || x' + gamma delta - x0_hat ||^2
               + lam * (phi + gamma grad . delta)^2

whose solution, using grad . delta = -||grad||, is

    gamma = (<r, delta> + lam * phi * ||grad||) / (1 + lam * ||grad||^2)

with r = x0_hat - x'.  With lam = 0 this reduces to the projection of
the denoising residual onto the descent direction, d * cos(theta).
The refinement loop runs the corrected transitions over a decreasing
subsequence of schedule steps, starting from an injected prediction,
and operates in normalized sample coordinates; the potential is
evaluated in physical coordinates through the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DDIM_MODES, NoiseSchedule, ddim_step, estimate_x0, forward_noise, model_schedule
from .errors import ConfigError, NonFiniteGradientError
from .model_store import TrainedModel
from .numerics import Rng, as_vector, finite_diff_jacobian, least_squares_min_norm, require_finite
from .potentials import ConstraintPotential, NormalizedPotential


@dataclass(frozen=True)
class RefineConfig:
    """Knobs of the guided refinement loop.

    steps is the number of reverse transitions (0 means no-op);
    start_step the schedule index where the prediction is injected
    (None means the top of the chain).  gamma_clip of None activates
    an adaptive cap at ten times the running median step scale;
    explicit values cap |gamma| directly.  noised_start forward-noises
    the injected prediction to the start level instead of using it
    verbatim.
    """

    steps: int
    start_step: int | None = None
    lam: float = 0.0
    gamma_clip: float | None = None
    grad_floor: float = 1e-10
    mode: str = "standard"
    eta: float = 0.0
    noised_start: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.start_step is not None and self.start_step < 1:
            raise ConfigError("start_step must be at least 1")
        if self.lam < 0.0:
            raise ConfigError("lam must be non-negative")
        if self.gamma_clip is not None and self.gamma_clip <= 0.0:
            raise ConfigError("gamma_clip must be positive")
        if self.mode not in DDIM_MODES:
            raise ConfigError(f"mode must be one of {DDIM_MODES}, got {self.mode!r}")
        if self.grad_floor < 0.0:
            raise ConfigError("grad_floor must be non-negative")
        if self.eta < 0.0:
            raise ConfigError("eta must be non-negative")

    def to_config(self) -> dict:
        return {
            "steps": self.steps,
            "start_step": self.start_step,
            "lam": self.lam,
            "gamma_clip": self.gamma_clip,
            "grad_floor": self.grad_floor,
            "mode": self.mode,
            "eta": self.eta,
            "noised_start": self.noised_start,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "RefineConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown refine config keys: {sorted(extra)}")
        return cls(**cfg)


@dataclass
class StepRecord:
    """Everything observable about one guided transition."""

    t: int
    t_prev: int
    gamma: float
    cos_angle: float
    dist: float
    phi: float
    grad_norm: float
    clipped: bool
    x_prev: np.ndarray
    x0_hat: np.ndarray
    delta: np.ndarray | None


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)

    def to_lines(self) -> list:
        """One tab-separated line per step: t, phi, gamma, cos, dist."""
        lines = ["t\tphi\tgamma\tcos_angle\tdist"]
        for s in self.steps:
            lines.append(
                f"{s.t}\t{s.phi!r}\t{s.gamma!r}\t{s.cos_angle!r}\t{s.dist!r}"
            )
        return lines

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")


def descent_direction(pot: ConstraintPotential, x, grad_floor: float = 1e-10):
    """Unit steepest-descent direction, or None below the gradient floor.

    Returns (delta, grad_norm).  Raises NonFiniteGradientError when the
    gradient has non-finite entries.
    """
    g = np.asarray(pot.grad(x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(f"potential gradient non-finite at {x}")
    norm = float(np.linalg.norm(g))
    if norm <= grad_floor:
        return None, norm
    return -g / norm, norm


def compute_gamma(
    r,
    delta,
    phi: float,
    grad_norm: float,
    lam: float = 0.0,
    clip: float | None = None,
):
    """Closed-form correction length; returns (gamma, clipped).

    Minimizes the proximal objective described in the module
    docstring.  The denominator 1 + lam * ||grad||^2 is at least one,
    so the expression is always well defined.
    """
    r = as_vector(r, "r")
    delta = as_vector(delta, "delta")
    if r.shape != delta.shape:
        raise ConfigError("r and delta must have matching shapes")
    gamma = (float(r @ delta) + lam * phi * grad_norm) / (1.0 + lam * grad_norm * grad_norm)
    clipped = False
    if clip is not None and abs(gamma) > clip:
        gamma = float(np.sign(gamma)) * clip
        clipped = True
    return gamma, clipped


def guided_step(
    x_t,
    t: int,
    eps_hat,
    pot: ConstraintPotential,
    schedule: NoiseSchedule,
    cfg: RefineConfig,
    t_prev: int | None = None,
    rng: Rng | None = None,
    clip: float | None = None,
):
    """One corrected reverse transition; returns (x_next, StepRecord).

    The plain transition runs first; the correction then moves the
    result along the descent direction of the potential evaluated at
    the transition output.  Below the gradient floor (flat or critical
    regions) the correction is skipped entirely.
    """
    if t_prev is None:
        t_prev = t - 1
    x_t = as_vector(x_t, "x_t")
    x0_hat = estimate_x0(x_t, t, eps_hat, schedule)
    x_prev = ddim_step(x_t, t, eps_hat, schedule, eta=cfg.eta, mode=cfg.mode, rng=rng, t_prev=t_prev)
    r = x0_hat - x_prev
    dist = float(np.linalg.norm(r))
    phi = float(pot.value(x_prev))
    delta, grad_norm = descent_direction(pot, x_prev, cfg.grad_floor)
    if delta is None:
        rec = StepRecord(
            t=t, t_prev=t_prev, gamma=0.0, cos_angle=0.0, dist=dist, phi=phi,
            grad_norm=grad_norm, clipped=False, x_prev=x_prev, x0_hat=x0_hat, delta=None,
        )
        return x_prev, rec
    gamma, clipped = compute_gamma(r, delta, phi, grad_norm, cfg.lam, clip)
    cos_angle = float(r @ delta) / dist if dist > 0.0 else 0.0
    x_next = x_prev + gamma * delta
    require_finite(x_next, "guided step")
    rec = StepRecord(
        t=t, t_prev=t_prev, gamma=gamma, cos_angle=cos_angle, dist=dist, phi=phi,
        grad_norm=grad_norm, clipped=clipped, x_prev=x_prev, x0_hat=x0_hat, delta=delta,
    )
    return x_next, rec


def step_subsequence(start_step: int, steps: int) -> list:
    """Strictly decreasing schedule levels visited by the refinement.

    steps == start_step walks every level; fewer steps spread evenly
    from start_step down to 1.  The final transition always lands on
    level 0.
    """
    if steps > start_step:
        raise ConfigError(f"steps ({steps}) must not exceed start_step ({start_step})")
    if steps == 0:
        return []
    if steps == start_step:
        return list(range(start_step, 0, -1))
    levels = np.unique(np.round(np.linspace(start_step, 1, steps)).astype(int))[::-1]
    return [int(t) for t in levels]


@dataclass
class RefineResult:
    x: np.ndarray
    trajectory: Trajectory


def refine(
    x_init,
    pot: ConstraintPotential,
    model: TrainedModel,
    cfg: RefineConfig,
    condition=None,
    rng: Rng | None = None,
    record: bool = True,
) -> RefineResult:
    """Pull a prediction toward the constraint manifold.

    x_init and the potential live in physical coordinates; the loop
    operates in the model's normalized sample space and the potential
    is viewed through the normalization chain rule.  The trajectory
    records per-step diagnostics in the normalized frame.
    """
    x_init = as_vector(x_init, "x_init")
    require_finite(x_init, "x_init")
    trajectory = Trajectory()
    if cfg.steps == 0:
        return RefineResult(x=x_init.copy(), trajectory=trajectory)

    schedule = model_schedule(model)
    start = cfg.start_step if cfg.start_step is not None else schedule.T
    if start > schedule.T:
        raise ConfigError(f"start_step {start} exceeds schedule length {schedule.T}")
    levels = step_subsequence(start, cfg.steps)

    z = np.asarray(model.y_norm.encode(x_init), dtype=float)
    cond_norm = None
    if model.net.spec.cond_dim:
        if condition is None:
            raise ConfigError("model is conditional but no condition was given")
        cond_norm = np.asarray(model.x_norm.encode(condition), dtype=float)
    pot_norm = NormalizedPotential(pot, model.y_norm.mean, model.y_norm.std)

    if cfg.noised_start:
        if rng is None:
            raise ConfigError("noised_start requires an rng")
        z = forward_noise(z, start, rng.normal(z.shape), schedule)
    if cfg.eta > 0.0 and rng is None:
        raise ConfigError("eta > 0 requires an rng")

    dists: list = []
    for i, t in enumerate(levels):
        t_prev = levels[i + 1] if i + 1 < len(levels) else 0
        eps_hat = model.net.forward(z, t=t, cond=cond_norm)
        if cfg.gamma_clip is not None:
            clip = cfg.gamma_clip
        elif len(dists) >= 3:
            clip = 10.0 * float(np.median(dists))
        else:
            clip = None
        z, rec = guided_step(z, t, eps_hat, pot_norm, schedule, cfg, t_prev=t_prev, rng=rng, clip=clip)
        dists.append(rec.dist)
        if record:
            trajectory.steps.append(rec)

    return RefineResult(x=np.asarray(model.y_norm.decode(z), dtype=float), trajectory=trajectory)


# ---------------------------------------------------------------------------
# One-shot residual correction through the local linearization.
# ---------------------------------------------------------------------------

@dataclass
class CorrectionResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    rank_deficient: bool


def residual_correction(
    residual_fn,
    x0,
    jacobian_fn=None,
    max_steps: int = 1,
    tol: float = 0.0,
) -> CorrectionResult:
    """Move x by the minimum-norm solution of the linearized residual.

    Each step solves J(x) r = -F(x) in the least-squares sense and
    adds r.  With max_steps > 1 this is the Gauss-Newton iteration;
    on square nondegenerate systems it reproduces the Newton update
    exactly.  jacobian_fn defaults to a central finite difference.
    """
    x = as_vector(x0, "x0").copy()
    if jacobian_fn is None:
        jacobian_fn = lambda p: finite_diff_jacobian(residual_fn, p)
    deficient = False
    res_norm = float(np.linalg.norm(np.asarray(residual_fn(x), dtype=float)))
    it = 0
    for it in range(1, max_steps + 1):
        f = np.asarray(residual_fn(x), dtype=float)
        res_norm = float(np.linalg.norm(f))
        if res_norm <= tol:
            it -= 1
            break
        sol = least_squares_min_norm(jacobian_fn(x), f)
        deficient = deficient or sol.rank_deficient
        x = x + sol.r
        res_norm = float(np.linalg.norm(np.asarray(residual_fn(x), dtype=float)))
    return CorrectionResult(x=x, iterations=it, residual_norm=res_norm, rank_deficient=deficient)
