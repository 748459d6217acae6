"""Constraint potentials: non-negative scalar fields with gradients.

A potential measures violation of a constraint set; its zero level set
is the feasible manifold.  Implementations expose ``value`` and
``grad`` on single points plus batch variants, and every one of them
is held to a finite-difference conformance check in the test suite.
"""

from __future__ import annotations

import functools
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    NonFiniteGradientError,
    SamplerStalledError,
    SingularMatrixError,
    ValidationError,
)
from .numerics import Rng, as_vector, require_finite, solve_linear

# Exponent magnitude above which the surface evaluation saturates
# instead of overflowing.
EXP_CLAMP = 500.0


class ConstraintPotential:
    """Interface for scalar constraint potentials.

    Subclasses set ``dim`` and implement ``value`` and ``grad``; the
    batch variants fall back to a row loop unless overridden with a
    vectorized path.
    """

    dim: int = 0

    def value(self, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, x):
        return self.value(x), self.grad(x)

    def value_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        return np.array([self.value(row) for row in xs])

    def grad_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.shape[0] == 0:
            return np.zeros_like(xs)
        return np.stack([self.grad(row) for row in xs])


class ZeroPotential(ConstraintPotential):
    """Identically zero; useful as a guidance no-op."""

    def __init__(self, dim: int):
        self.dim = dim

    def value(self, x) -> float:
        return 0.0

    def grad(self, x) -> np.ndarray:
        return np.zeros(self.dim)


class CallablePotential(ConstraintPotential):
    """Adapter wrapping plain value/grad callables."""

    def __init__(self, dim: int, value_fn: Callable, grad_fn: Callable):
        self.dim = dim
        self._value = value_fn
        self._grad = grad_fn

    def value(self, x) -> float:
        return float(self._value(np.asarray(x, dtype=float)))

    def grad(self, x) -> np.ndarray:
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)


class NormalizedPotential(ConstraintPotential):
    """View of a potential in affinely rescaled coordinates.

    The wrapped potential lives in physical coordinates y; this view
    evaluates at z with y = mean + scale * z, so gradients pick up a
    factor of ``scale`` by the chain rule.
    """

    def __init__(self, base: ConstraintPotential, mean, scale):
        self.base = base
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.dim = base.dim

    def _decode(self, z):
        return self.mean + self.scale * np.asarray(z, dtype=float)

    def value(self, z) -> float:
        return self.base.value(self._decode(z))

    def grad(self, z) -> np.ndarray:
        return self.scale * self.base.grad(self._decode(z))

    def value_batch(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=float)
        return self.base.value_batch(self.mean[None, :] + self.scale[None, :] * zs)

    def grad_batch(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=float)
        return self.scale[None, :] * self.base.grad_batch(
            self.mean[None, :] + self.scale[None, :] * zs
        )


# ---------------------------------------------------------------------------
# Two-dimensional four-term exponential test surface.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MullerBrownParams:
    """Canonical parameters of the four-Gaussian test surface."""

    depths: tuple = (-200.0, -100.0, -170.0, 15.0)
    curv_a: tuple = (-1.0, -1.0, -6.5, 0.7)
    curv_b: tuple = (0.0, 0.0, 11.0, 0.6)
    curv_c: tuple = (-10.0, -10.0, -6.5, 0.7)
    centers_x: tuple = (1.0, 0.0, -0.5, -1.0)
    centers_y: tuple = (0.0, 0.5, 1.5, 1.0)


# Region of interest containing all five stationary points.
WORKING_BOX = np.array([[-1.8, 1.2], [-0.5, 2.2]])


class MullerBrown:
    """Raw surface evaluation: four exponential terms over the plane."""

    def __init__(self, params: MullerBrownParams | None = None):
        self.params = params or MullerBrownParams()

    def _terms(self, x, y):
        p = self.params
        ex = []
        for i in range(4):
            dx = x - p.centers_x[i]
            dy = y - p.centers_y[i]
            arg = p.curv_a[i] * dx * dx + p.curv_b[i] * dx * dy + p.curv_c[i] * dy * dy
            ex.append((dx, dy, arg))
        return ex

    def surface_value(self, point) -> float:
        point = as_vector(point, "point")
        x, y = float(point[0]), float(point[1])
        p = self.params
        total = 0.0
        for i, (_, _, arg) in enumerate(self._terms(x, y)):
            if abs(arg) > EXP_CLAMP:
                warnings.warn("surface exponent clamped", RuntimeWarning, stacklevel=2)
                arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
            total += p.depths[i] * np.exp(arg)
        return float(total)

    def surface_grad(self, point) -> np.ndarray:
        point = as_vector(point, "point")
        x, y = float(point[0]), float(point[1])
        p = self.params
        gx = 0.0
        gy = 0.0
        for i, (dx, dy, arg) in enumerate(self._terms(x, y)):
            if abs(arg) > EXP_CLAMP:
                warnings.warn("surface exponent clamped", RuntimeWarning, stacklevel=2)
                arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
            e = p.depths[i] * np.exp(arg)
            gx += e * (2.0 * p.curv_a[i] * dx + p.curv_b[i] * dy)
            gy += e * (p.curv_b[i] * dx + 2.0 * p.curv_c[i] * dy)
        g = np.array([gx, gy])
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"surface gradient non-finite at {point}")
        return g

    def surface_value_batch(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        x = pts[..., 0]
        y = pts[..., 1]
        p = self.params
        total = np.zeros_like(x)
        for i in range(4):
            dx = x - p.centers_x[i]
            dy = y - p.centers_y[i]
            arg = p.curv_a[i] * dx * dx + p.curv_b[i] * dx * dy + p.curv_c[i] * dy * dy
            total += p.depths[i] * np.exp(np.clip(arg, -EXP_CLAMP, EXP_CLAMP))
        return total

    def surface_grad_batch(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        x = pts[..., 0]
        y = pts[..., 1]
        p = self.params
        gx = np.zeros_like(x)
        gy = np.zeros_like(y)
        for i in range(4):
            dx = x - p.centers_x[i]
            dy = y - p.centers_y[i]
            arg = p.curv_a[i] * dx * dx + p.curv_b[i] * dx * dy + p.curv_c[i] * dy * dy
            e = p.depths[i] * np.exp(np.clip(arg, -EXP_CLAMP, EXP_CLAMP))
            gx += e * (2.0 * p.curv_a[i] * dx + p.curv_b[i] * dy)
            gy += e * (p.curv_b[i] * dx + 2.0 * p.curv_c[i] * dy)
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class StationaryPoint:
    location: tuple
    value: float
    kind: str  # "minimum" | "saddle" | "maximum"

    @property
    def point(self) -> np.ndarray:
        return np.array(self.location)


def _fd_hessian(mb: MullerBrown, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    cols = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        cols.append((mb.surface_grad(point + e) - mb.surface_grad(point - e)) / (2.0 * h))
    hess = np.stack(cols, axis=1)
    return 0.5 * (hess + hess.T)


def _polish(mb: MullerBrown, seed_point: np.ndarray, box: np.ndarray):
    """Newton iteration on the gradient from one seed; None if it escapes."""
    p = seed_point.astype(float).copy()
    lo = box[:, 0] - 0.5
    hi = box[:, 1] + 0.5
    for _ in range(80):
        g = mb.surface_grad(p)
        if float(np.abs(g).max()) < 1e-11:
            return p
        try:
            step = solve_linear(_fd_hessian(mb, p), g)
        except SingularMatrixError:
            return None
        norm = float(np.abs(step).max())
        if norm > 0.25:
            step *= 0.25 / norm
        p = p - step
        if np.any(p < lo) or np.any(p > hi):
            return None
    return None


@functools.lru_cache(maxsize=8)
def locate_stationary_points(
    params: MullerBrownParams | None = None, grid_n: int = 61
) -> tuple:
    """Grid-seeded Newton search for all stationary points in the box.

    Seeds are the grid nodes with the smallest gradient norms plus the
    deepest surface values; converged points are deduplicated and
    classified by the eigenvalues of the local Hessian.  Minima come
    first, sorted deepest first, then saddles, then maxima.
    """
    mb = MullerBrown(params)
    xs = np.linspace(WORKING_BOX[0, 0], WORKING_BOX[0, 1], grid_n)
    ys = np.linspace(WORKING_BOX[1, 0], WORKING_BOX[1, 1], grid_n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    vals = mb.surface_value_batch(pts)
    grads = mb.surface_grad_batch(pts)
    gnorm = np.abs(grads).max(axis=1)

    def grid_local_minima(field_flat):
        # Nodes not exceeded by any of their eight neighbors.
        field = field_flat.reshape(grid_n, grid_n)
        padded = np.pad(field, 1, constant_values=np.inf)
        is_min = np.ones_like(field, dtype=bool)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                neigh = padded[1 + di : 1 + di + grid_n, 1 + dj : 1 + dj + grid_n]
                is_min &= field <= neigh
        return np.flatnonzero(is_min.ravel())

    seed_idx = set(np.argsort(gnorm)[:200].tolist())
    seed_idx.update(np.argsort(vals)[:80].tolist())
    seed_idx.update(grid_local_minima(vals).tolist())
    seed_idx.update(grid_local_minima(gnorm).tolist())

    found: list[StationaryPoint] = []
    for idx in sorted(seed_idx):
        p = _polish(mb, pts[idx], WORKING_BOX)
        if p is None:
            continue
        if np.any(p < WORKING_BOX[:, 0]) or np.any(p > WORKING_BOX[:, 1]):
            continue
        if any(np.linalg.norm(p - s.point) < 1e-4 for s in found):
            continue
        eig = np.linalg.eigvalsh(_fd_hessian(mb, p))
        if np.all(eig > 0):
            kind = "minimum"
        elif np.all(eig < 0):
            kind = "maximum"
        else:
            kind = "saddle"
        found.append(
            StationaryPoint(
                location=(float(p[0]), float(p[1])),
                value=mb.surface_value(p),
                kind=kind,
            )
        )

    order = {"minimum": 0, "saddle": 1, "maximum": 2}
    found.sort(key=lambda s: (order[s.kind], s.value))
    return tuple(found)


def global_minimum(params: MullerBrownParams | None = None) -> StationaryPoint:
    points = locate_stationary_points(params)
    minima = [s for s in points if s.kind == "minimum"]
    if not minima:
        raise ValidationError("no minimum located on the surface")
    return minima[0]


class MullerBrownPotential(ConstraintPotential):
    """Non-negative shift of the surface: value = max(V - zero_level, 0).

    ``zero_level`` defaults to the located global minimum value, which
    makes the potential vanish only at the minimizer.  Raising it
    carves out a flat feasible neighborhood around the minimum, where
    the gradient is identically zero.
    """

    dim = 2

    def __init__(self, params: MullerBrownParams | None = None, zero_level: float | None = None):
        self.surface = MullerBrown(params)
        if zero_level is None:
            zero_level = global_minimum(params).value
        self.zero_level = float(zero_level)

    def value(self, x) -> float:
        return max(self.surface.surface_value(x) - self.zero_level, 0.0)

    def grad(self, x) -> np.ndarray:
        if self.surface.surface_value(x) - self.zero_level <= 0.0:
            return np.zeros(2)
        return self.surface.surface_grad(x)

    def value_batch(self, xs) -> np.ndarray:
        return np.maximum(self.surface.surface_value_batch(xs) - self.zero_level, 0.0)

    def grad_batch(self, xs) -> np.ndarray:
        raw = self.surface.surface_grad_batch(xs)
        active = self.surface.surface_value_batch(xs) - self.zero_level > 0.0
        return raw * active[:, None]


def muller_brown_potential(
    params: MullerBrownParams | None = None,
    zero_level: float | None = None,
    margin: float = 0.0,
) -> MullerBrownPotential:
    """Build the shifted non-negative surface potential.

    ``margin`` lifts the zero level above the located global minimum,
    producing a flat feasible pocket of that energy width.
    """
    if zero_level is None:
        zero_level = global_minimum(params).value + margin
    return MullerBrownPotential(params, zero_level)


# ---------------------------------------------------------------------------
# Relational constraint sets over named tabular features.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearSumTerm:
    """c = sum_j weights[j] * x[features[j]] - offset"""

    features: tuple
    weights: tuple
    offset: float = 0.0


@dataclass(frozen=True)
class ProductTerm:
    """c = x[result] - x[left] * x[right]"""

    result: str
    left: str
    right: str


@dataclass(frozen=True)
class OrderTerm:
    """c = max(0, x[smaller] - x[larger]); feasible when smaller <= larger."""

    smaller: str
    larger: str


@dataclass(frozen=True)
class RangeTerm:
    """c = max(0, x[feature] - upper) + max(0, lower - x[feature])"""

    feature: str
    lower: float
    upper: float


class RelationalConstraintSet(ConstraintPotential):
    """Sum of squared relational violations over named features.

    The potential is sum_r c_r(x)^2 with c_r one of the four term
    kinds above.  Feature bounds are carried alongside the terms so
    consumers (attack projection, data generation) share one source
    of truth.
    """

    def __init__(self, feature_names: Sequence[str], bounds, terms: Sequence):
        self.feature_names = tuple(feature_names)
        self.dim = len(self.feature_names)
        bounds = np.asarray(bounds, dtype=float)
        if bounds.shape != (self.dim, 2):
            raise DimensionMismatchError(f"bounds must have shape ({self.dim}, 2)")
        if np.any(bounds[:, 0] >= bounds[:, 1]):
            raise ValidationError("every feature bound must satisfy lower < upper")
        self.bounds = bounds
        self.terms = tuple(terms)
        self._index = {name: i for i, name in enumerate(self.feature_names)}
        if len(self._index) != self.dim:
            raise ValidationError("feature names must be unique")
        for term in self.terms:
            for name in self._term_features(term):
                if name not in self._index:
                    raise ValidationError(f"constraint references unknown feature {name!r}")

    @staticmethod
    def _term_features(term):
        if isinstance(term, LinearSumTerm):
            return term.features
        if isinstance(term, ProductTerm):
            return (term.result, term.left, term.right)
        if isinstance(term, OrderTerm):
            return (term.smaller, term.larger)
        if isinstance(term, RangeTerm):
            return (term.feature,)
        raise ValidationError(f"unknown constraint term {term!r}")

    def idx(self, name: str) -> int:
        return self._index[name]

    def residuals_batch(self, xs) -> np.ndarray:
        """Per-term residuals c_r for a batch, shape (n, n_terms)."""
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[None, :]
        cols = []
        for term in self.terms:
            if isinstance(term, LinearSumTerm):
                c = sum(
                    w * xs[:, self.idx(f)] for f, w in zip(term.features, term.weights)
                ) - term.offset
            elif isinstance(term, ProductTerm):
                c = xs[:, self.idx(term.result)] - xs[:, self.idx(term.left)] * xs[:, self.idx(term.right)]
            elif isinstance(term, OrderTerm):
                c = np.maximum(xs[:, self.idx(term.smaller)] - xs[:, self.idx(term.larger)], 0.0)
            elif isinstance(term, RangeTerm):
                v = xs[:, self.idx(term.feature)]
                c = np.maximum(v - term.upper, 0.0) + np.maximum(term.lower - v, 0.0)
            else:  # pragma: no cover - guarded in __init__
                raise ValidationError(f"unknown constraint term {term!r}")
            cols.append(np.asarray(c, dtype=float))
        if not cols:
            return np.zeros((xs.shape[0], 0))
        return np.stack(cols, axis=1)

    def breakdown(self, x) -> np.ndarray:
        """Squared violation per term at a single point."""
        return self.residuals_batch(np.asarray(x, dtype=float)[None, :])[0] ** 2

    def value(self, x) -> float:
        return float(np.sum(self.breakdown(x)))

    def value_batch(self, xs) -> np.ndarray:
        return np.sum(self.residuals_batch(xs) ** 2, axis=1)

    def grad(self, x) -> np.ndarray:
        return self.grad_batch(np.asarray(x, dtype=float)[None, :])[0]

    def grad_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[None, :]
        n = xs.shape[0]
        g = np.zeros((n, self.dim))
        for term in self.terms:
            if isinstance(term, LinearSumTerm):
                c = sum(
                    w * xs[:, self.idx(f)] for f, w in zip(term.features, term.weights)
                ) - term.offset
                for f, w in zip(term.features, term.weights):
                    g[:, self.idx(f)] += 2.0 * c * w
            elif isinstance(term, ProductTerm):
                ir, il, iright = self.idx(term.result), self.idx(term.left), self.idx(term.right)
                c = xs[:, ir] - xs[:, il] * xs[:, iright]
                g[:, ir] += 2.0 * c
                g[:, il] += -2.0 * c * xs[:, iright]
                g[:, iright] += -2.0 * c * xs[:, il]
            elif isinstance(term, OrderTerm):
                i_s, i_l = self.idx(term.smaller), self.idx(term.larger)
                z = xs[:, i_s] - xs[:, i_l]
                c = np.maximum(z, 0.0)
                active = (z > 0.0).astype(float)
                g[:, i_s] += 2.0 * c * active
                g[:, i_l] += -2.0 * c * active
            elif isinstance(term, RangeTerm):
                i_f = self.idx(term.feature)
                v = xs[:, i_f]
                c = np.maximum(v - term.upper, 0.0) + np.maximum(term.lower - v, 0.0)
                slope = (v > term.upper).astype(float) - (v < term.lower).astype(float)
                g[:, i_f] += 2.0 * c * slope
        return g

    # -- declarative schema -------------------------------------------------

    def to_config(self) -> dict:
        feats = [
            {"name": n, "lower": float(self.bounds[i, 0]), "upper": float(self.bounds[i, 1])}
            for i, n in enumerate(self.feature_names)
        ]
        terms = []
        for term in self.terms:
            if isinstance(term, LinearSumTerm):
                terms.append(
                    {
                        "kind": "linear_sum",
                        "features": list(term.features),
                        "weights": list(term.weights),
                        "offset": term.offset,
                    }
                )
            elif isinstance(term, ProductTerm):
                terms.append(
                    {"kind": "product", "result": term.result, "left": term.left, "right": term.right}
                )
            elif isinstance(term, OrderTerm):
                terms.append({"kind": "order", "smaller": term.smaller, "larger": term.larger})
            elif isinstance(term, RangeTerm):
                terms.append(
                    {"kind": "range", "feature": term.feature, "lower": term.lower, "upper": term.upper}
                )
        return {"features": feats, "constraints": terms}

    @classmethod
    def from_config(cls, cfg: dict) -> "RelationalConstraintSet":
        try:
            names = [f["name"] for f in cfg["features"]]
            bounds = [[f["lower"], f["upper"]] for f in cfg["features"]]
            terms = []
            for t in cfg["constraints"]:
                kind = t["kind"]
                if kind == "linear_sum":
                    terms.append(
                        LinearSumTerm(
                            features=tuple(t["features"]),
                            weights=tuple(float(w) for w in t["weights"]),
                            offset=float(t.get("offset", 0.0)),
                        )
                    )
                elif kind == "product":
                    terms.append(ProductTerm(result=t["result"], left=t["left"], right=t["right"]))
                elif kind == "order":
                    terms.append(OrderTerm(smaller=t["smaller"], larger=t["larger"]))
                elif kind == "range":
                    terms.append(
                        RangeTerm(feature=t["feature"], lower=float(t["lower"]), upper=float(t["upper"]))
                    )
                else:
                    raise ConfigError(f"unknown constraint kind {kind!r}")
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed constraint schema: {exc}") from exc
        return cls(names, bounds, terms)

    @classmethod
    def from_json(cls, path) -> "RelationalConstraintSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_config(json.load(fh))


def relational_phi(
    constraints: RelationalConstraintSet, x
) -> tuple[float, np.ndarray, np.ndarray]:
    """Evaluate a relational constraint set at one point.

    Returns the total squared violation, its gradient, and the per-term
    squared residuals in declaration order.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != constraints.dim:
        raise DimensionMismatchError(
            f"expected a point of dimension {constraints.dim}, got shape {x.shape}"
        )
    breakdown = constraints.breakdown(x)
    return float(np.sum(breakdown)), constraints.grad(x), breakdown


# ---------------------------------------------------------------------------
# Low-potential dataset samplers.
# ---------------------------------------------------------------------------

STALL_WINDOW = 100_000
STALL_RATE = 1e-3


def sample_manifold_dataset(
    pot: ConstraintPotential,
    box,
    n: int,
    sampler: str = "metropolis",
    kT: float = 1.0,
    seed: int = 0,
    chains: int = 64,
    burn_in: int = 500,
    thin: int = 5,
    proposal_scale: float | None = None,
) -> np.ndarray:
    """Draw n points with density proportional to exp(-value/kT) on a box.

    ``rejection`` uses the trivial unit envelope (value >= 0 makes the
    density at most one); ``metropolis`` runs vectorized random-walk
    chains in parallel, each thinned independently.  Both raise
    SamplerStalledError when acceptance collapses below 0.1% over a
    100k-proposal window.
    """
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise DimensionMismatchError("box must have shape (dim, 2)")
    if np.any(box[:, 0] >= box[:, 1]):
        raise ValidationError("box must satisfy lower < upper in every coordinate")
    if kT <= 0:
        raise ConfigError("kT must be positive")
    if n <= 0:
        raise ConfigError("n must be positive")
    dim = box.shape[0]
    rng = Rng(seed)
    lo = box[:, 0]
    span = box[:, 1] - box[:, 0]

    if sampler == "rejection":
        out = np.empty((0, dim))
        proposed = 0
        accepted = 0
        while out.shape[0] < n:
            batch = 4096
            cand = lo[None, :] + span[None, :] * rng.random((batch, dim))
            dens = np.exp(-pot.value_batch(cand) / kT)
            keep = rng.random(batch) < dens
            out = np.concatenate([out, cand[keep]], axis=0)
            proposed += batch
            accepted += int(keep.sum())
            if proposed >= STALL_WINDOW:
                if accepted / proposed < STALL_RATE:
                    raise SamplerStalledError(
                        f"rejection acceptance {accepted / proposed:.2e} over {proposed} proposals"
                    )
                proposed = 0
                accepted = 0
        return out[:n]

    if sampler != "metropolis":
        raise ConfigError(f"unknown sampler {sampler!r}")

    chains = max(1, min(chains, n))
    per_chain = -(-n // chains)  # ceil
    if proposal_scale is None:
        proposal_scale = 0.15 * float(span.min())
    x = lo[None, :] + span[None, :] * rng.random((chains, dim))
    v = pot.value_batch(x)
    kept = []
    proposed = 0
    accepted = 0
    total_steps = burn_in + per_chain * thin
    for step in range(total_steps):
        prop = x + proposal_scale * rng.normal((chains, dim))
        inside = np.all((prop >= lo[None, :]) & (prop <= lo[None, :] + span[None, :]), axis=1)
        pv = np.where(inside, pot.value_batch(prop), np.inf)
        logu = np.log(rng.random(chains))
        accept = inside & (logu < (v - pv) / kT)
        x = np.where(accept[:, None], prop, x)
        v = np.where(accept, pv, v)
        proposed += chains
        accepted += int(accept.sum())
        if proposed >= STALL_WINDOW:
            if accepted / proposed < STALL_RATE:
                raise SamplerStalledError(
                    f"metropolis acceptance {accepted / proposed:.2e} over {proposed} proposals"
                )
            proposed = 0
            accepted = 0
        if step >= burn_in and (step - burn_in) % thin == 0:
            kept.append(x.copy())
    samples = np.concatenate(kept, axis=0)
    return samples[:n]


def finite_difference_conformance(
    pot: ConstraintPotential, probes, rtol: float = 1e-4, h: float | None = None
) -> float:
    """Worst relative disagreement between grad() and a central difference.

    Returns the maximum relative error over the probe points; the
    caller asserts it against the tolerance.  Probes should avoid
    kinks of hinge terms, where the two-sided difference straddles a
    derivative jump.
    """
    from .numerics import finite_diff_grad

    worst = 0.0
    for x in np.asarray(probes, dtype=float):
        g = pot.grad(x)
        g_fd = finite_diff_grad(pot.value, x, h=h)
        require_finite(g, "grad")
        scale = max(float(np.abs(g_fd).max()), 1e-6)
        err = float(np.abs(g - g_fd).max()) / scale
        worst = max(worst, err)
    return worst
