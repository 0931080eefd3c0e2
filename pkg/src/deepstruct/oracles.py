"""Randomised property suites for the message-passing solver, checked against enumeration."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import (
    ORACLE_LIMIT,
    MessageSet,
    beliefs_from_messages,
    brute_force_log_partition,
    brute_force_marginals,
    dual_objective,
    run_to_convergence,
    update_lambda,
)
from .region_graph import PotentialTables, RegionGraph, state_space_size

SUITES = ("tree_exactness", "dual_monotonicity", "upper_bound", "belief_normalization")


@dataclass
class OracleReport:
    trials: int = 0
    failures: list[tuple[int, str, str]] = field(default_factory=list)  # (instance seed, suite, detail)
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def note(self, suite: str, value: float) -> None:
        self.worst[suite] = max(self.worst.get(suite, 0.0), value)


def random_tables(graph: RegionGraph, rng: np.random.Generator, scale: float = 1.0) -> PotentialTables:
    """Independent Normal(0, scale^2) entries for every region table, batch of one."""
    return PotentialTables.for_graph(graph, [scale * rng.standard_normal(graph.shape(r.id)) for r in graph.regions])


def check_instance(graph: RegionGraph, tables: PotentialTables, epsilon: float, report: OracleReport,
                   seed: int, exact_tol: float = 1e-8, mono_tol: float = 1e-9, norm_tol: float = 1e-10,
                   max_sweeps: int = 2000) -> None:
    msgs = MessageSet.zeros(graph, tables.batch_size, epsilon)
    # block-coordinate monotonicity over the first few sweeps
    prev = dual_objective(graph, tables, msgs)
    worst_rise = 0.0
    for _ in range(5):
        for r in graph.sweep_order():
            update_lambda(graph, tables, msgs, r)
            cur = dual_objective(graph, tables, msgs)
            worst_rise = max(worst_rise, float(np.max(cur - prev)))
            prev = cur
    report.note("dual_monotonicity", worst_rise)
    if worst_rise > mono_tol:
        report.failures.append((seed, "dual_monotonicity", f"dual rose by {worst_rise:.3e}"))
    run_to_convergence(graph, tables, msgs, tol=1e-13, max_sweeps=max_sweeps)
    dual = dual_objective(graph, tables, msgs)
    logz = brute_force_log_partition(graph, tables, epsilon)
    gap = float(np.min(dual - logz))
    report.note("upper_bound", max(0.0, -gap))
    if gap < -mono_tol:
        report.failures.append((seed, "upper_bound", f"dual below exact value by {-gap:.3e}"))
    beliefs = beliefs_from_messages(graph, tables, msgs)
    norm_err = max(float(np.max(np.abs(b.reshape(b.shape[0], -1).sum(axis=1) - 1.0))) for b in beliefs)
    report.note("belief_normalization", norm_err)
    if norm_err > norm_tol:
        report.failures.append((seed, "belief_normalization", f"belief sums off by {norm_err:.3e}"))
    if graph.is_tree():
        exact = brute_force_marginals(graph, tables, epsilon)
        dz = float(np.max(np.abs(dual - logz)))
        db = max(float(np.max(np.abs(b - e))) for b, e in zip(beliefs, exact))
        report.note("tree_exactness", max(dz, db))
        if dz > exact_tol or db > exact_tol:
            report.failures.append((seed, "tree_exactness", f"|dual - eps lnZ| = {dz:.3e}, max belief error = {db:.3e}"))


def run_suites(graph: RegionGraph, epsilon: float, trials: int, seed: int = 0) -> OracleReport:
    """Check ``trials`` random instances; instance ``t`` uses seed ``seed + t``."""
    if state_space_size(graph) > ORACLE_LIMIT:
        raise ValueError(f"state space {state_space_size(graph)} exceeds the enumeration bound {ORACLE_LIMIT}")
    report = OracleReport()
    for t in range(trials):
        s = seed + t
        tables = random_tables(graph, np.random.default_rng(s))
        check_instance(graph, tables, epsilon, report, s)
        report.trials += 1
    return report
