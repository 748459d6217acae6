"""Newton-Raphson power flow and the Kirchhoff mismatch potential.

Conventions: per-unit throughout, angles in radians.  The mismatch is
spec minus calculated, with active rows at every non-slack bus and
reactive rows at PQ buses.  The unknown vector packs Va at non-slack
buses followed by Vm at PQ buses, in bus order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import (
    DimensionMismatchError,
    NoConvergenceError,
    SingularMatrixError,
)
from ..numerics import solve_linear
from ..potentials import ConstraintPotential
from .grid import GridCase
from .ybus import YBus, build_ybus


@dataclass(frozen=True)
class Injections:
    """Specified bus power context: p_spec everywhere (slack entry
    unused), q_spec meaningful at PQ buses."""

    p_spec: np.ndarray
    q_spec: np.ndarray


def nominal_injections(case: GridCase) -> Injections:
    return Injections(p_spec=case.pg - case.pd, q_spec=-case.qd)


def load_injections(case: GridCase, pd, qd, pg) -> Injections:
    """Injections for explicit per-bus load and generation arrays."""
    return Injections(
        p_spec=np.asarray(pg, dtype=float) - np.asarray(pd, dtype=float),
        q_spec=-np.asarray(qd, dtype=float),
    )


@dataclass
class PowerFlowState:
    vm: np.ndarray
    va: np.ndarray


def flat_start(case: GridCase) -> PowerFlowState:
    """Unit magnitude and zero angle at every unknown; regulated buses
    sit at their setpoints."""
    vm = np.ones(case.n)
    fixed = np.concatenate(([case.slack], case.pv)).astype(int)
    vm[fixed] = case.vset[fixed]
    va = np.full(case.n, case.va_ref[case.slack])
    return PowerFlowState(vm=vm, va=va)


def pack_state(case: GridCase, state: PowerFlowState) -> np.ndarray:
    return np.concatenate([state.va[case.non_slack], state.vm[case.pq]])


def unpack_state(case: GridCase, x) -> PowerFlowState:
    x = np.asarray(x, dtype=float)
    if x.shape != (case.n_unknowns,):
        raise DimensionMismatchError(
            f"unknown vector needs shape ({case.n_unknowns},), got {x.shape}"
        )
    k = len(case.non_slack)
    state = flat_start(case)
    state.va[case.non_slack] = x[:k]
    state.vm[case.pq] = x[k:]
    return state


def complex_power(ybus: YBus, vm, va) -> np.ndarray:
    """Injected complex power per bus; accepts (n,) or (m, n) arrays."""
    v = np.asarray(vm, dtype=float) * np.exp(1j * np.asarray(va, dtype=float))
    i = v @ ybus.complex_matrix.T
    return v * np.conj(i)


def mismatch(case: GridCase, ybus: YBus, state: PowerFlowState, injections: Injections | None = None):
    """(ΔP at non-slack buses, ΔQ at PQ buses), spec minus calculated."""
    if injections is None:
        injections = nominal_injections(case)
    s = complex_power(ybus, state.vm, state.va)
    dp = injections.p_spec[case.non_slack] - s.real[case.non_slack]
    dq = injections.q_spec[case.pq] - s.imag[case.pq]
    return dp, dq


def mismatch_vector(case, ybus, x, injections=None) -> np.ndarray:
    dp, dq = mismatch(case, ybus, unpack_state(case, x), injections)
    return np.concatenate([dp, dq])


def _ds_dv(y_c: np.ndarray, v: np.ndarray):
    """Complex-form partial derivatives of injected power.

    v has shape (m, n); returns (dS/dVa, dS/dVm), each (m, n, n).
    """
    m, n = v.shape
    i_bus = v @ y_c.T
    vn = v / np.abs(v)
    d = np.arange(n)

    ds_dva = -1j * (v[:, :, None] * np.conj(y_c)[None, :, :] * np.conj(v)[:, None, :])
    ds_dva[:, d, d] += 1j * v * np.conj(i_bus)

    ds_dvm = v[:, :, None] * np.conj(y_c)[None, :, :] * np.conj(vn)[:, None, :]
    ds_dvm[:, d, d] += np.conj(i_bus) * vn
    return ds_dva, ds_dvm


def power_jacobian(case: GridCase, ybus: YBus, state: PowerFlowState) -> np.ndarray:
    """d(calculated P, Q)/d(unknowns), the standard polar NR Jacobian."""
    return mismatch_jacobian_batch(
        case, ybus, state.vm[None, :], state.va[None, :]
    )[0]


def mismatch_jacobian_batch(case: GridCase, ybus: YBus, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    """d(mismatch)/d(unknowns) for a batch of full (vm, va) states."""
    v = vm * np.exp(1j * va)
    ds_dva, ds_dvm = _ds_dv(ybus.complex_matrix, v)
    ns, pq = case.non_slack, case.pq
    top = np.concatenate(
        [ds_dva[:, ns][:, :, ns].real, ds_dvm[:, ns][:, :, pq].real], axis=2
    )
    bot = np.concatenate(
        [ds_dva[:, pq][:, :, ns].imag, ds_dvm[:, pq][:, :, pq].imag], axis=2
    )
    return np.concatenate([top, bot], axis=1)


@dataclass
class NewtonResult:
    state: PowerFlowState
    iterations: int
    residuals: np.ndarray  # max-mismatch after each update, leading entry at x0


def newton_raphson(
    case: GridCase,
    ybus: YBus | None = None,
    injections: Injections | None = None,
    x0: PowerFlowState | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> NewtonResult:
    """Full Newton iteration on the mismatch equations.

    Raises NoConvergenceError when max_iter updates leave the worst
    mismatch above tol, or the Jacobian goes singular (voltage
    collapse / infeasible injections).
    """
    if ybus is None:
        ybus = build_ybus(case)
    if injections is None:
        injections = nominal_injections(case)
    state = x0 if x0 is not None else flat_start(case)
    state = PowerFlowState(vm=state.vm.copy(), va=state.va.copy())
    history = []
    for it in range(max_iter + 1):
        dp, dq = mismatch(case, ybus, state, injections)
        f = np.concatenate([dp, dq])
        worst = float(np.abs(f).max()) if f.size else 0.0
        history.append(worst)
        if not np.isfinite(worst):
            raise NoConvergenceError(
                "mismatch diverged to non-finite values",
                iterations=it, residual=worst,
            )
        if worst < tol:
            return NewtonResult(state=state, iterations=it, residuals=np.array(history))
        if it == max_iter:
            break
        jac = power_jacobian(case, ybus, state)
        try:
            step = solve_linear(jac, f)
        except SingularMatrixError:
            raise NoConvergenceError(
                "singular Jacobian during Newton iteration",
                iterations=it, residual=worst,
            ) from None
        k = len(case.non_slack)
        state.va[case.non_slack] += step[:k]
        state.vm[case.pq] += step[k:]
    raise NoConvergenceError(
        f"no convergence after {max_iter} iterations",
        iterations=max_iter, residual=history[-1],
    )


class KirchhoffPotential(ConstraintPotential):
    """Sum of squared per-unit power mismatches over the unknown vector.

    Zero exactly on power-flow solutions.  The gradient reuses the NR
    Jacobian: d(mismatch)/dx = -J, so grad = -2 J^T F.
    """

    def __init__(self, case: GridCase, ybus: YBus | None = None, injections: Injections | None = None):
        self.dim = case.n_unknowns
        self.case = case
        self.ybus = ybus if ybus is not None else build_ybus(case)
        self.injections = injections if injections is not None else nominal_injections(case)

    def _states(self, xs: np.ndarray):
        case = self.case
        m = xs.shape[0]
        k = len(case.non_slack)
        base = flat_start(case)
        vm = np.tile(base.vm, (m, 1))
        va = np.tile(base.va, (m, 1))
        va[:, case.non_slack] = xs[:, :k]
        vm[:, case.pq] = xs[:, k:]
        return vm, va

    def _residual_batch(self, xs: np.ndarray) -> np.ndarray:
        vm, va = self._states(xs)
        s = complex_power(self.ybus, vm, va)
        dp = self.injections.p_spec[self.case.non_slack] - s.real[:, self.case.non_slack]
        dq = self.injections.q_spec[self.case.pq] - s.imag[:, self.case.pq]
        return np.concatenate([dp, dq], axis=1)

    def value(self, x) -> float:
        return float(self.value_batch(np.asarray(x, dtype=float)[None, :])[0])

    def grad(self, x) -> np.ndarray:
        return self.grad_batch(np.asarray(x, dtype=float)[None, :])[0]

    def value_batch(self, xs) -> np.ndarray:
        f = self._residual_batch(np.asarray(xs, dtype=float))
        return np.sum(f * f, axis=1)

    def grad_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        f = self._residual_batch(xs)
        vm, va = self._states(xs)
        jac = mismatch_jacobian_batch(self.case, self.ybus, vm, va)
        return -2.0 * np.einsum("bij,bi->bj", jac, f)

    # Hooks for the linearized one-shot correction baseline.
    def residual(self, x) -> np.ndarray:
        return self._residual_batch(np.asarray(x, dtype=float)[None, :])[0]

    def residual_jacobian(self, x) -> np.ndarray:
        state = unpack_state(self.case, x)
        return -power_jacobian(self.case, self.ybus, state)


def kirchhoff_potential(
    case: GridCase, ybus: YBus | None = None, injections: Injections | None = None
) -> KirchhoffPotential:
    return KirchhoffPotential(case, ybus, injections)
