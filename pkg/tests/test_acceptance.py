"""End-to-end acceptance checks, one test per check.

Each test appends a ``PASS``/``FAIL`` line to the run summary.  Run alone with
``pytest tests/test_acceptance.py -v`` (about 10 minutes on a desktop CPU).
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import VERDICTS
from deepstruct.cli import main
from deepstruct.data import DatasetSpec, dataset_bytes, generate_dataset, parse_dataset
from deepstruct.inference import (
    MessageSet,
    beliefs_from_messages,
    brute_force_log_partition,
    brute_force_map,
    brute_force_marginals,
    dual_objective,
    run_to_convergence,
    update_lambda,
)
from deepstruct.learning import (
    TrainConfig,
    dataset_objective,
    evaluate,
    gradient_check,
    objective_value,
    run_strategy,
    with_overrides,
)
from deepstruct.modelfile import checksum, model_bytes, parse_model
from deepstruct.region_graph import (
    PotentialTables,
    build_chain_model,
    build_potential_model,
    build_region_graph,
    evaluate_potentials,
    score_configuration,
)

SEEDS = (0, 1, 2)
ITERATIONS = 700
STEP = 3e-4


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def _random_tables(graph, seed):
    rng = np.random.default_rng(seed)
    return PotentialTables.for_graph(graph, [rng.standard_normal(graph.shape(r.id)) for r in graph.regions])


# --------------------------------------------------------------------------
# shared desk-scale experiment


@pytest.fixture(scope="module")
def desk():
    return generate_dataset(DatasetSpec())


@pytest.fixture(scope="module")
def trend_runs(desk):
    """Test word accuracy for every (setting, seed), plus the wall time of the strategy comparison."""
    acc: dict[str, list[float]] = {}
    strategy_time = 0.0
    g1, g2 = build_chain_model(5, 26, 1), build_chain_model(5, 26, 2)
    for seed in SEEDS:
        cfg = TrainConfig(step_size=STEP, iterations=ITERATIONS, pretrain_iterations=ITERATIONS,
                          pretrained_step_size=STEP / 10, validate_every=100, seed=seed)

        def run(name, graph, model, params, strategy, **kw):
            state = run_strategy(desk["train"], graph, model, params, with_overrides(cfg, strategy=strategy),
                                 val=desk["val"], **kw)
            acc.setdefault(name, []).append(evaluate(desk["test"], graph, model, state.params)["word_accuracy"])
            return state

        t0 = time.perf_counter()
        model, params = build_potential_model(g1, 784, [128], seed=seed)
        # UnaryOnly trains exactly the pretraining phase, so its weights are reused
        pre = run("UnaryOnly", g1, model, params, "UnaryOnly").params
        run("JointTrain", g1, model, params, "JointTrain")
        run("PwTrain", g1, model, params, "PwTrain", pretrained=pre)
        run("PreTrainJoint", g1, model, params, "PreTrainJoint", pretrained=pre)
        strategy_time += time.perf_counter() - t0
        m2, p2 = build_potential_model(g2, 784, [128], seed=seed)
        run("JointTrain order 2", g2, m2, p2, "JointTrain")
        m3, p3 = build_potential_model(g1, 784, [128], pairwise="mlp", pair_hidden=32, seed=seed)
        run("JointTrain mlp pairwise", g1, m3, p3, "JointTrain")
    return acc, strategy_time


def _median(runs, name):
    return float(np.median(runs[name]))


# --------------------------------------------------------------------------


class TestInference:
    def test_tree_exactness(self):
        g = build_chain_model(5, 6, 1)
        t0 = time.perf_counter()
        worst_dual = worst_belief = 0.0
        for seed in range(50):
            t = _random_tables(g, seed)
            m = MessageSet.zeros(g, 1, 1.0)
            run_to_convergence(g, t, m, tol=1e-13, max_sweeps=5000)
            worst_dual = max(worst_dual, abs(dual_objective(g, t, m)[0] - brute_force_log_partition(g, t, 1.0)[0]))
            exact = brute_force_marginals(g, t, 1.0)
            beliefs = beliefs_from_messages(g, t, m)
            worst_belief = max(worst_belief, max(float(np.max(np.abs(b - e))) for b, e in zip(beliefs, exact)))
        elapsed = time.perf_counter() - t0
        ok = worst_dual < 1e-8 and worst_belief < 1e-8 and elapsed < 10
        verdict("tree exactness", ok,
                f"max |dual - eps lnZ| = {worst_dual:.3e}, max belief error = {worst_belief:.3e}, {elapsed:.1f}s")

    def test_monotone_dual_and_upper_bound(self):
        g = build_chain_model(4, 3, 2)
        t0 = time.perf_counter()
        worst_rise, worst_gap = -np.inf, np.inf
        for seed in range(50):
            t = _random_tables(g, seed)
            m = MessageSet.zeros(g, 1, 1.0)
            prev = dual_objective(g, t, m)[0]
            for _ in range(1000):
                for r in g.sweep_order():
                    update_lambda(g, t, m, r)
                    cur = dual_objective(g, t, m)[0]
                    worst_rise = max(worst_rise, cur - prev)
                    last, prev = prev, cur
                if abs(last - cur) < 1e-10:
                    break
            worst_gap = min(worst_gap, cur - brute_force_log_partition(g, t, 1.0)[0])
        elapsed = time.perf_counter() - t0
        ok = worst_rise <= 1e-9 and worst_gap >= -1e-9 and elapsed < 10
        verdict("dual monotonicity and upper bound", ok,
                f"largest rise {worst_rise:.3e}, smallest dual - eps lnZ {worst_gap:.3e}, {elapsed:.1f}s")


class TestLearning:
    def test_gradient_fidelity(self):
        rng = np.random.default_rng(0)
        g = build_chain_model(3, 26, 1)
        model, params = build_potential_model(g, 784, [8], seed=0)
        x, y = rng.random((2, 3, 784)), rng.integers(0, 26, (2, 3))
        msgs = MessageSet.zeros(g, 2, 1.0)
        tables = evaluate_potentials(g, model, params, x)
        run_to_convergence(g, tables, msgs, max_sweeps=3)
        t0 = time.perf_counter()
        err, worst = gradient_check(x, y, g, model, params, msgs, h=1e-5)
        elapsed = time.perf_counter() - t0
        verdict("gradient fidelity", err < 1e-4 and elapsed < 60,
                f"max relative error {err:.3e} ({worst}), {elapsed:.1f}s")

    def test_hinge_recovery(self):
        g = build_chain_model(5, 6, 1)
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model, params = build_potential_model(g, 10, [8], seed=seed)
            params["pair_d1_W"] = rng.standard_normal((6, 6))
            x, y = rng.standard_normal((1, 5, 10)), rng.integers(0, 6, (1, 5))
            tables = evaluate_potentials(g, model, params, x)
            msgs = MessageSet.zeros(g, 1, 0.0)
            run_to_convergence(g, tables, msgs, tol=1e-13, max_sweeps=5000)
            want = score_configuration(tables, brute_force_map(g, tables)[0]) - score_configuration(tables, y[0])
            worst = max(worst, abs(objective_value(x, y, g, model, params, msgs) - want))
        verdict("hinge recovery", worst < 1e-8, f"max |objective - structured hinge| = {worst:.3e}")

    def test_convex_agreement(self, desk):
        g = build_region_graph([26] * 5, [])
        model, params = build_potential_model(g, 784, [], seed=0)
        train = desk["train"].subset(np.arange(300))
        cfg = TrainConfig(step_size=1e-4, iterations=2000, validate_every=100, strategy="UnaryOnly")
        finals = {}
        for algo in ("blended", "doubleloop"):
            state = run_strategy(train, g, model, params, cfg, val=desk["val"], algo=algo)
            finals[algo] = dataset_objective(train, g, model, state.params)
        gap = abs(finals["blended"] - finals["doubleloop"])
        verdict("convex agreement", gap < 1e-6,
                f"blended {finals['blended']:.8f}, double loop {finals['doubleloop']:.8f}, gap {gap:.2e}")


class TestTrends:
    def test_joint_training_helps(self, trend_runs):
        acc, elapsed = trend_runs
        j, u = _median(acc, "JointTrain"), _median(acc, "UnaryOnly")
        ok = j >= u + 5 and elapsed < 15 * 60
        verdict("joint over unary", ok, f"median word accuracy JointTrain {j:.2f} vs UnaryOnly {u:.2f}, "
                                        f"runs {acc['JointTrain']} vs {acc['UnaryOnly']}, {elapsed:.0f}s")

    def test_pretrain_joint_not_below_piecewise(self, trend_runs):
        acc, _ = trend_runs
        ptj, pw = _median(acc, "PreTrainJoint"), _median(acc, "PwTrain")
        verdict("pretrain-joint over piecewise", ptj >= pw,
                f"median word accuracy PreTrainJoint {ptj:.2f} vs PwTrain {pw:.2f}, "
                f"runs {acc['PreTrainJoint']} vs {acc['PwTrain']}")

    def test_second_order_structure(self, trend_runs):
        acc, _ = trend_runs
        o2, o1 = _median(acc, "JointTrain order 2"), _median(acc, "JointTrain")
        verdict("order-2 chain over order-1", o2 >= o1,
                f"median word accuracy {o2:.2f} vs {o1:.2f}, runs {acc['JointTrain order 2']} vs {acc['JointTrain']}")

    def test_nonlinear_pairwise(self, trend_runs):
        acc, _ = trend_runs
        mlp, lin = _median(acc, "JointTrain mlp pairwise"), _median(acc, "JointTrain")
        verdict("mlp pairwise vs linear", mlp >= lin - 1,
                f"median word accuracy {mlp:.2f} vs {lin:.2f}, runs {acc['JointTrain mlp pairwise']} "
                f"vs {acc['JointTrain']}")

    def test_blending_efficiency(self, desk):
        budget = 20.0
        g = build_chain_model(5, 26, 1)
        model, params = build_potential_model(g, 784, [128], seed=0)
        monitor = desk["train"].subset(np.arange(200))
        cfg = TrainConfig(step_size=STEP, iterations=10**7, validate_every=0)
        curves = {}
        for algo in ("blended", "doubleloop"):
            pts = []

            def record(state, pts=pts):
                pts.append((state.compute_time, dataset_objective(monitor, g, model, state.params)))

            run_strategy(desk["train"], g, model, params, cfg, algo=algo, callback=record, callback_every=10,
                         time_budget=budget)
            curves[algo] = pts

        def at(pts, t):
            seen = [v for s, v in pts if s <= t]
            return seen[-1] if seen else np.inf

        grid = [t for t in np.linspace(0, budget, 41)[1:] if t > 0.1 * budget]
        wins = [at(curves["blended"], t) <= at(curves["doubleloop"], t) for t in grid]
        frac = float(np.mean(wins))
        verdict("blending efficiency", frac >= 0.8,
                f"blended objective <= double loop at {frac:.0%} of {len(grid)} checkpoints "
                f"({len(curves['blended'])} vs {len(curves['doubleloop'])} logged points)")


class TestArtifacts:
    def test_serialization_and_determinism(self, tmp_path):
        spec = DatasetSpec(train=20, val=5, test=5)
        data = generate_dataset(spec)
        raw = dataset_bytes(data["train"])
        data_ok = dataset_bytes(parse_dataset(raw)) == raw and generate_dataset(spec)["train"] == data["train"]

        g = build_chain_model(5, 26, 1)
        _, params = build_potential_model(g, 784, [16], seed=0)
        mraw = model_bytes(params, "text", bytes(range(32)))
        mf = parse_model(mraw)
        model_ok = model_bytes(mf.params, mf.config_text, mf.config_hash) == mraw

        (tmp_path / "s.ini").write_text("[network]\nhidden = 16\n[graph]\nvariables = 5\ncardinality = 26\n"
                                        "[train]\nstep_size = 0.001\nbatch_size = 10\niterations = 40\n"
                                        "validate_every = 10\n[data]\ntrain = 20\nval = 5\ntest = 5\n")
        assert main(["gen-data", "--spec", str(tmp_path / "s.ini"), "--out", str(tmp_path / "d")]) == 0
        sums = []
        for k in range(2):
            out = tmp_path / f"m{k}.dsm"
            assert main(["train", "--spec", str(tmp_path / "s.ini"), "--data", str(tmp_path / "d"),
                         "--out", str(out)]) == 0
            sums.append(checksum(out))
        ok = data_ok and model_ok and sums[0] == sums[1]
        verdict("serialization and determinism", ok,
                f"dataset round trip {data_ok}, model round trip {model_ok}, train checksums equal {sums[0] == sums[1]}")
