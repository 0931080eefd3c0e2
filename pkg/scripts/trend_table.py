"""Word accuracy of the four training strategies plus structure variants, over several seeds.

    python3 scripts/trend_table.py --seeds 0 1 2 --out trend.tsv
"""
from __future__ import annotations

import argparse
import time
from dataclasses import replace

import numpy as np

from deepstruct.config import instantiate, load
from deepstruct.data import generate_dataset
from deepstruct.learning import evaluate, run_strategy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default="scripts/configs/desk.ini")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int, default=None)
    ap.add_argument("--no-variants", action="store_true", help="skip the order-2 and mlp-pairwise runs")
    ap.add_argument("--out", default=None, help="write one row per run as TSV")
    args = ap.parse_args()

    base = load(args.spec)
    if args.iterations:
        base.train = replace(base.train, iterations=args.iterations, pretrain_iterations=args.iterations)
    data = generate_dataset(base.data)
    rows = []
    for seed in args.seeds:
        base.train = replace(base.train, seed=seed)
        inst = instantiate(base)

        def run(name, inst, strategy, **kw):
            t0 = time.perf_counter()
            cfg = replace(inst.train, strategy=strategy)
            state = run_strategy(data["train"], inst.graph, inst.model, inst.params, cfg, val=data["val"], **kw)
            acc = evaluate(data["test"], inst.graph, inst.model, state.params, cfg.epsilon, cfg.eval_sweeps)
            rows.append((name, seed, acc["word_accuracy"], acc["char_accuracy"], time.perf_counter() - t0))
            print("\t".join(map(str, rows[-1][:4])) + f"\t{rows[-1][4]:.0f}s", flush=True)
            return state

        pre = run("UnaryOnly", inst, "UnaryOnly").params
        run("JointTrain", inst, "JointTrain")
        run("PwTrain", inst, "PwTrain", pretrained=pre)
        run("PreTrainJoint", inst, "PreTrainJoint", pretrained=pre)
        if not args.no_variants:
            doc2 = load(args.spec)
            doc2.train, doc2.graph.order = base.train, 2
            run("JointTrain order2", instantiate(doc2), "JointTrain")
            doc3 = load(args.spec)
            doc3.train, doc3.graph.pairwise = base.train, "mlp"
            run("JointTrain mlp", instantiate(doc3), "JointTrain")

    print("\nsetting\tmedian_word\tmedian_char")
    for name in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == name]
        print(f"{name}\t{np.median([r[2] for r in sel]):.2f}\t{np.median([r[3] for r in sel]):.2f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("setting\tseed\tword_accuracy\tchar_accuracy\tseconds\n")
            for r in rows:
                fh.write(f"{r[0]}\t{r[1]}\t{r[2]:.2f}\t{r[3]:.2f}\t{r[4]:.1f}\n")


if __name__ == "__main__":
    main()
