"""Prediction quality metrics for the power-flow track.

Peak mismatches are reported in physical units: the worst absolute
active-power residual per sample in MW and the worst reactive
residual at PQ buses in MVAr.  MSE is computed on the unknown vector
in normalized target units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatchError
from ..training import Normalizer
from .grid import GridCase
from .solver import complex_power, flat_start
from .ybus import YBus, build_ybus


@dataclass
class MetricsReport:
    mse: np.ndarray
    mapm: np.ndarray  # MW per sample
    mrpm: np.ndarray  # MVAr per sample

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def mean_mapm(self) -> float:
        return float(self.mapm.mean())

    @property
    def mean_mrpm(self) -> float:
        return float(self.mrpm.mean())

    def summary(self) -> dict:
        return {
            "mse": self.mean_mse,
            "mapm_mw": self.mean_mapm,
            "mrpm_mvar": self.mean_mrpm,
        }


def batch_states(case: GridCase, xs: np.ndarray):
    """Expand packed unknown vectors to full (vm, va) arrays."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != case.n_unknowns:
        raise DimensionMismatchError(
            f"need (m, {case.n_unknowns}) unknown vectors, got {xs.shape}"
        )
    m = xs.shape[0]
    base = flat_start(case)
    vm = np.tile(base.vm, (m, 1))
    va = np.tile(base.va, (m, 1))
    k = len(case.non_slack)
    va[:, case.non_slack] = xs[:, :k]
    vm[:, case.pq] = xs[:, k:]
    return vm, va


def peak_mismatches(case: GridCase, ybus: YBus, predictions: np.ndarray, features: np.ndarray):
    """Per-sample worst |ΔP| (MW) and |ΔQ| (MVAr) under each feature
    row's injections."""
    predictions = np.asarray(predictions, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.shape[0] != predictions.shape[0]:
        raise DimensionMismatchError("features and predictions row counts differ")
    vm, va = batch_states(case, predictions)
    s = complex_power(ybus, vm, va)
    k = len(case.non_slack)
    dp = features[:, :k] - s.real[:, case.non_slack]
    dq = features[:, k:] - s.imag[:, case.pq]
    mapm = np.abs(dp).max(axis=1) * case.base_mva
    mrpm = (
        np.abs(dq).max(axis=1) * case.base_mva
        if dq.shape[1]
        else np.zeros(dp.shape[0])
    )
    return mapm, mrpm


def evaluate(
    case: GridCase,
    predictions: np.ndarray,
    targets: np.ndarray,
    features: np.ndarray,
    ybus: YBus | None = None,
    norm: Normalizer | None = None,
) -> MetricsReport:
    """Per-sample MSE/peak-mismatch report for a prediction batch.

    norm defaults to statistics fitted on the given targets; pass the
    training-set normalizer to score like the model was trained.
    """
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise DimensionMismatchError("predictions and targets shapes differ")
    if ybus is None:
        ybus = build_ybus(case)
    if norm is None:
        norm = Normalizer.fit(targets)
    diff = norm.encode(predictions) - norm.encode(targets)
    mse = np.mean(diff * diff, axis=1)
    mapm, mrpm = peak_mismatches(case, ybus, predictions, features)
    return MetricsReport(mse=mse, mapm=mapm, mrpm=mrpm)
