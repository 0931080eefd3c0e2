"""Objective versus compute time for blended training and the 20-sweep double loop.

Writes ``algo<TAB>seconds<TAB>iteration<TAB>objective`` rows for plotting and
reports the fraction of checkpoints (after the first 10% of the budget) where
blended training is at least as low.
"""
from __future__ import annotations

import argparse

import numpy as np

from deepstruct.config import instantiate, load
from deepstruct.data import generate_dataset
from deepstruct.learning import dataset_objective, run_strategy, with_overrides


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default="scripts/configs/desk.ini")
    ap.add_argument("--budget", type=float, default=30.0, help="seconds of training compute per algorithm")
    ap.add_argument("--monitor", type=int, default=200, help="training words used to measure the objective")
    ap.add_argument("--every", type=int, default=10, help="iterations between measurements")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    doc = load(args.spec)
    data = generate_dataset(doc.data)
    inst = instantiate(doc)
    monitor = data["train"].subset(np.arange(min(args.monitor, len(data["train"]))))
    cfg = with_overrides(doc.train, iterations=10**7, validate_every=0, strategy="JointTrain")
    curves = {}
    for algo in ("blended", "doubleloop"):
        pts = []

        def record(state, pts=pts):
            obj = dataset_objective(monitor, inst.graph, inst.model, state.params, cfg.epsilon)
            pts.append((state.compute_time, state.iteration, obj))

        state = run_strategy(data["train"], inst.graph, inst.model, inst.params, cfg, algo=algo,
                             callback=record, callback_every=args.every, time_budget=args.budget)
        curves[algo] = pts
        print(f"{algo}: {state.iteration} iterations, final monitor objective {pts[-1][2]:.2f}", flush=True)

    def at(pts, t):
        seen = [v for s, _, v in pts if s <= t]
        return seen[-1] if seen else np.inf

    grid = [t for t in np.linspace(0, args.budget, 41)[1:] if t > 0.1 * args.budget]
    frac = np.mean([at(curves["blended"], t) <= at(curves["doubleloop"], t) for t in grid])
    print(f"blended at or below the double loop at {frac:.0%} of {len(grid)} checkpoints")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("algo\tseconds\titeration\tobjective\n")
            for algo, pts in curves.items():
                for s, it, v in pts:
                    fh.write(f"{algo}\t{s:.4f}\t{it}\t{v:.6f}\n")


if __name__ == "__main__":
    main()
