"""Run the enumeration-backed inference suites over a grid of small chains and temperatures."""
from __future__ import annotations

import argparse
import time

from deepstruct.oracles import run_suites
from deepstruct.region_graph import build_chain_model

GRID = [  # (N, K, order, unary counting)
    (5, 6, 1, 1.0),
    (5, 6, 1, 0.0),
    (4, 3, 2, 1.0),
    (6, 4, 2, 1.0),
    (2, 8, 1, 0.0),
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=50)
    ap.add_argument("--eps", type=float, nargs="+", default=[1.0, 0.1, 0.0])
    args = ap.parse_args()
    print("N\tK\torder\tc_unary\teps\tfailures\tsuite worst values\tseconds")
    for N, K, order, cu in GRID:
        graph = build_chain_model(N, K, order, unary_counting=cu)
        for eps in args.eps:
            t0 = time.perf_counter()
            rep = run_suites(graph, eps, args.trials)
            worst = ", ".join(f"{k}={v:.1e}" for k, v in sorted(rep.worst.items()))
            print(f"{N}\t{K}\t{order}\t{cu}\t{eps}\t{len(rep.failures)}\t{worst}\t{time.perf_counter() - t0:.1f}",
                  flush=True)


if __name__ == "__main__":
    main()
