#!/usr/bin/env python3
"""Search for demonstration start points on the toy landscape.

Scans a grid over the working box for starts where gradient descent
stays in a local basin, Newton-Raphson lands on a saddle, and guided
refinement reaches the global minimum, then scans a far ring outside
the box for starts where refinement itself goes local.  The shipped
demo start groups were picked from this search's output.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from diffrefine.baselines import build_toy_setup, trajectory_comparison
from diffrefine.potentials import WORKING_BOX


def outcome(table) -> dict:
    return {row.method: row for row in table.rows}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=9, help="points per box axis")
    ap.add_argument("--ring", type=int, default=16, help="far-field candidates")
    ap.add_argument("--ring-radius", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("training toy noise model")
    pot, model, refine_cfg, _ = build_toy_setup()
    (x_lo, x_hi), (y_lo, y_hi) = WORKING_BOX

    print("figure-like candidates (gd local, nr saddle, refine global):")
    xs = np.linspace(x_lo + 0.1, x_hi - 0.1, args.grid)
    ys = np.linspace(y_lo + 0.1, y_hi - 0.1, args.grid)
    hits = 0
    for x in xs:
        for y in ys:
            rows = outcome(
                trajectory_comparison(pot, [[x, y]], model=model, refine_cfg=refine_cfg)
            )
            if (
                rows["gd"].label.startswith("local")
                and (rows["nr"].label == "saddle" or rows["nr"].saddle)
                and rows["refine"].label == "global"
            ):
                hits += 1
                print(f"  ({x:+.3f}, {y:+.3f})")
    print(f"  {hits} of {args.grid ** 2} grid points qualify")

    print("far-field candidates (refine lands local):")
    rng = np.random.default_rng(args.seed)
    center = np.array([(x_lo + x_hi) / 2, (y_lo + y_hi) / 2])
    angles = rng.uniform(0.0, 2 * np.pi, args.ring)
    hits = 0
    for a in angles:
        start = center + args.ring_radius * np.array([np.cos(a), np.sin(a)])
        rows = outcome(
            trajectory_comparison(pot, [start], model=model, refine_cfg=refine_cfg)
        )
        if rows["refine"].label.startswith("local"):
            hits += 1
            print(f"  ({start[0]:+.3f}, {start[1]:+.3f}) -> {rows['refine'].label}")
    print(f"  {hits} of {args.ring} ring points qualify")
    return 0


if __name__ == "__main__":
    sys.exit(main())
