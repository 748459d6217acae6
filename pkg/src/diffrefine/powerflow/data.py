"""Scenario dataset generation and its on-disk TSV + manifest format.

Each sample scales every load by an independent uniform factor in
[1-spread, 1+spread], rescales generator active power by the total
load ratio, solves the scenario exactly, and stores

    features: p_spec at non-slack buses, then q_spec at PQ buses
    targets:  Va at non-slack buses, then Vm at PQ buses

all per-unit, in bus order.  Scenarios that fail to converge are
discarded and redrawn; a failure share above one half aborts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, DatasetInfeasibleError, NoConvergenceError
from ..numerics import Rng
from .grid import BUNDLED_CASES, GridCase, case_text
from .solver import Injections, newton_raphson, pack_state
from .ybus import build_ybus

FORMAT_VERSION = 1


@dataclass
class Split:
    features: np.ndarray
    targets: np.ndarray


@dataclass
class PowerFlowDataset:
    case_name: str
    base_mva: float
    seed: int
    train_spread: float
    test_spread: float
    feature_names: list
    target_names: list
    train: Split
    val: Split
    test: Split


def feature_names(case: GridCase) -> list:
    ids = [case.buses[i].id for i in case.non_slack]
    pq_ids = [case.buses[i].id for i in case.pq]
    return [f"p_{i}" for i in ids] + [f"q_{i}" for i in pq_ids]


def target_names(case: GridCase) -> list:
    ids = [case.buses[i].id for i in case.non_slack]
    pq_ids = [case.buses[i].id for i in case.pq]
    return [f"va_{i}" for i in ids] + [f"vm_{i}" for i in pq_ids]


def injections_from_features(case: GridCase, row) -> Injections:
    """Rebuild the per-bus spec arrays from one feature row."""
    row = np.asarray(row, dtype=float)
    k = len(case.non_slack)
    p = np.zeros(case.n)
    q = np.zeros(case.n)
    p[case.non_slack] = row[:k]
    q[case.pq] = row[k:]
    return Injections(p_spec=p, q_spec=q)


def _draw_split(case, ybus, n: int, spread: float, rng: Rng, tol: float) -> Split:
    d_in = case.n_unknowns
    feats = np.empty((n, d_in))
    targs = np.empty((n, case.n_unknowns))
    total_pd = float(case.pd.sum())
    got = 0
    failures = 0
    draws = 0
    cap = max(4 * n, 50)
    while got < n:
        if draws >= cap:
            raise DatasetInfeasibleError(
                f"{failures} of {draws} scenario draws failed to converge"
            )
        draws += 1
        fp = 1.0 + spread * rng.uniform(-1.0, 1.0, size=case.n)
        fq = 1.0 + spread * rng.uniform(-1.0, 1.0, size=case.n)
        pd = case.pd * fp
        qd = case.qd * fq
        ratio = float(pd.sum()) / total_pd if total_pd > 0 else 1.0
        pg = case.pg * ratio
        inj = Injections(p_spec=pg - pd, q_spec=-qd)
        try:
            res = newton_raphson(case, ybus, inj, tol=tol)
        except NoConvergenceError:
            failures += 1
            if failures > draws / 2 and draws >= 20:
                raise DatasetInfeasibleError(
                    f"{failures} of {draws} scenario draws failed to converge"
                ) from None
            continue
        feats[got, : len(case.non_slack)] = inj.p_spec[case.non_slack]
        feats[got, len(case.non_slack) :] = inj.q_spec[case.pq]
        targs[got] = pack_state(case, res.state)
        got += 1
    return Split(features=feats, targets=targs)


def generate_dataset(
    case: GridCase,
    n_train: int,
    n_val: int,
    n_test: int,
    train_spread: float = 0.10,
    test_spread: float = 0.20,
    seed: int = 0,
    tol: float = 1e-8,
) -> PowerFlowDataset:
    if min(n_train, n_val, n_test) < 0:
        raise DataError("split sizes must be non-negative")
    if train_spread < 0 or test_spread < 0:
        raise DataError("spreads must be non-negative")
    ybus = build_ybus(case)
    root = Rng(seed)
    return PowerFlowDataset(
        case_name=case.name,
        base_mva=case.base_mva,
        seed=seed,
        train_spread=train_spread,
        test_spread=test_spread,
        feature_names=feature_names(case),
        target_names=target_names(case),
        train=_draw_split(case, ybus, n_train, train_spread, root.fork("train"), tol),
        val=_draw_split(case, ybus, n_val, train_spread, root.fork("val"), tol),
        test=_draw_split(case, ybus, n_test, test_spread, root.fork("test"), tol),
    )


def _write_tsv(path: Path, names: list, features: np.ndarray, targets: np.ndarray) -> None:
    with path.open("w") as fh:
        fh.write("\t".join(names) + "\n")
        for f_row, t_row in zip(features, targets):
            row = np.concatenate([f_row, t_row])
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def _read_tsv(path: Path, n_features: int):
    with path.open() as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    data = np.array([[float(v) for v in row] for row in rows]) if rows else np.empty(
        (0, len(header))
    )
    if data.size and data.shape[1] != len(header):
        raise DataError(f"{path.name}: row width does not match header")
    return header, data[:, :n_features], data[:, n_features:]


def save_dataset(ds: PowerFlowDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ds.feature_names + ds.target_names
    for split_name in ("train", "val", "test"):
        split = getattr(ds, split_name)
        _write_tsv(out / f"{split_name}.tsv", names, split.features, split.targets)
    case_sha = None
    if ds.case_name in BUNDLED_CASES:
        case_sha = hashlib.sha256(case_text(ds.case_name).encode()).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "powerflow-dataset",
        "case": ds.case_name,
        "case_sha256": case_sha,
        "base_mva": ds.base_mva,
        "seed": ds.seed,
        "train_spread": ds.train_spread,
        "test_spread": ds.test_spread,
        "counts": {
            "train": int(ds.train.features.shape[0]),
            "val": int(ds.val.features.shape[0]),
            "test": int(ds.test.features.shape[0]),
        },
        "feature_names": ds.feature_names,
        "target_names": ds.target_names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir) -> PowerFlowDataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {src}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "powerflow-dataset":
        raise DataError(f"{manifest_path}: not a powerflow dataset manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {manifest.get('format_version')}")
    f_names = manifest["feature_names"]
    t_names = manifest["target_names"]
    splits = {}
    for split_name in ("train", "val", "test"):
        header, feats, targs = _read_tsv(src / f"{split_name}.tsv", len(f_names))
        if header != f_names + t_names:
            raise DataError(f"{split_name}.tsv columns do not match the manifest")
        splits[split_name] = Split(features=feats, targets=targs)
    return PowerFlowDataset(
        case_name=manifest["case"],
        base_mva=manifest["base_mva"],
        seed=manifest["seed"],
        train_spread=manifest["train_spread"],
        test_spread=manifest["test_spread"],
        feature_names=f_names,
        target_names=t_names,
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
    )
