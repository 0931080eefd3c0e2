"""Training loops: blended message passing + SGD, the double-loop baseline, and strategies."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .compute_graph import GradientStore, ParameterStore, check_gradient
from .data import Dataset
from .inference import (
    MessageSet,
    dual_and_belief_sums,
    dual_objective,
    map_decode,
    message_pass,
    run_to_convergence,
)
from .region_graph import (
    PotentialModel,
    RegionGraph,
    backprop_potentials,
    evaluate_potentials,
    loss_augment,
    point_mass_targets,
    score_configuration,
)

STRATEGIES = ("UnaryOnly", "JointTrain", "PwTrain", "PreTrainJoint")
_ALIASES = {"unary": "UnaryOnly", "unaryonly": "UnaryOnly", "joint": "JointTrain", "jointtrain": "JointTrain",
            "pw": "PwTrain", "pwtrain": "PwTrain", "pretrainjoint": "PreTrainJoint",
            "pretrain_joint": "PreTrainJoint", "pretrain-joint": "PreTrainJoint"}


def canonical_strategy(name: str) -> str:
    if name in STRATEGIES:
        return name
    key = name.lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
    return _ALIASES[key]


class TrainingDiverged(RuntimeError):
    """``last_good`` holds the most recent parameters whose objective was finite."""

    def __init__(self, message: str, state: TrainState, last_good: ParameterStore | None = None):
        super().__init__(message)
        self.state = state
        self.last_good = state.params if last_good is None else last_good


@dataclass
class TrainConfig:
    epsilon: float = 1.0
    step_size: float = 0.01
    momentum: float = 0.95
    batch_size: int = 100
    iterations: int = 5000
    # None: 1 sweep (blended) or 20 sweeps (double loop)
    message_sweeps_per_update: int | None = None
    step_decay: float = 0.5
    strategy: str = "JointTrain"
    loss_augment: float = 0.0
    seed: int = 0
    pretrain_iterations: int = 5000
    pretrained_step_size: float = 0.001
    validate_every: int = 100
    eval_sweeps: int = 200

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0 or self.pretrained_step_size <= 0:
            raise ValueError("step sizes must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.loss_augment < 0:
            raise ValueError("loss_augment must be >= 0")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.message_sweeps_per_update is not None and self.message_sweeps_per_update < 0:
            raise ValueError("message_sweeps_per_update must be >= 0")

    @property
    def hinge(self) -> bool:
        """epsilon = 0: the objective is the structured hinge loss."""
        return self.epsilon == 0.0


class MessageBank:
    """Warm-start storage of every training sample's multipliers."""

    def __init__(self, graph: RegionGraph, n: int, epsilon: float):
        self.epsilon = epsilon
        self.lam = {(reg.id, p): np.zeros((n,) + graph.shape(reg.id))
                    for reg in graph.regions for p in reg.parents}

    def gather(self, idx) -> MessageSet:
        return MessageSet(self.epsilon, {k: v[idx] for k, v in self.lam.items()})

    def scatter(self, idx, messages: MessageSet) -> None:
        for k, v in messages.lam.items():
            self.lam[k][idx] = v


@dataclass
class TrainState:
    params: ParameterStore
    velocity: GradientStore
    step_size: float
    bank: MessageBank | None = None
    iteration: int = 0
    best_val: float = -np.inf
    trace: list[dict] = field(default_factory=list)
    compute_time: float = 0.0


# --------------------------------------------------------------------------
# objective and gradient


def objective_and_gradient(x: np.ndarray, y: np.ndarray, graph: RegionGraph, model: PotentialModel,
                           params: ParameterStore, messages: MessageSet, loss_weight: float = 0.0,
                           targets: list[np.ndarray] | None = None, sweeps: int = 0,
                           frozen: set[str] | None = None, need_grad: bool = True):
    """Batch objective sum_b [dual_b - F(x_b, y_b)] and its gradient at the given multipliers.

    ``sweeps`` message sweeps are run first (updating ``messages`` in place).
    Returns ``(objective, grads)``; ``grads`` is None when ``need_grad`` is False.
    """
    tables = evaluate_potentials(graph, model, params, x)
    aug = loss_augment(tables, y, loss_weight) if loss_weight else tables
    if sweeps:
        message_pass(graph, aug, messages, sweeps)
    if not need_grad:
        obj = float(np.sum(dual_objective(graph, aug, messages) - score_configuration(tables, y)))
        return obj, None
    dual, beliefs = dual_and_belief_sums(graph, aug, messages)
    obj = float(np.sum(dual - score_configuration(tables, y)))
    if targets is None:
        targets = point_mass_targets(graph, y)
    # beliefs of shared pair tables arrive already summed over the batch
    table_grads = [b - (t if b.shape[0] == t.shape[0] else t.sum(axis=0, keepdims=True))
                   for b, t in zip(beliefs, targets)]
    skip = set()
    if frozen:
        if set(model.unary_params) <= frozen:
            skip.add("unary")
        if set(model.pairwise_params) <= frozen:
            skip.add("pairwise")
    grads = backprop_potentials(graph, model, params, tables, table_grads, skip=skip)
    return obj, grads


def objective_value(x, y, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                    messages: MessageSet, loss_weight: float = 0.0) -> float:
    return objective_and_gradient(x, y, graph, model, params, messages, loss_weight, need_grad=False)[0]


def gradient_check(x, y, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                   messages: MessageSet, h: float = 1e-5, loss_weight: float = 0.0) -> tuple[float, str]:
    """Central-difference check of the structured objective at fixed multipliers."""
    _, grads = objective_and_gradient(x, y, graph, model, params, messages, loss_weight)

    def fn(p):
        return objective_value(x, y, graph, model, p, messages, loss_weight)

    return check_gradient(fn, params, grads, h)


def gradient_step(state: TrainState, grads: GradientStore, config: TrainConfig,
                  frozen: set[str] = frozenset()) -> None:
    """Heavy-ball update v <- m v + g, w <- w - eta v on every non-frozen tensor."""
    for name in state.params:
        if name in frozen:
            continue
        v = state.velocity[name]
        v *= config.momentum
        v += grads[name]
        state.params.tensors[name] -= state.step_size * v


def step_decay_on_validation(state: TrainState, val_metric: float, decay: float = 0.5) -> TrainState:
    if val_metric < state.best_val:
        state.step_size *= decay
    state.best_val = max(state.best_val, val_metric)
    return state


# --------------------------------------------------------------------------
# evaluation


def predict(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
            epsilon: float = 1.0, sweeps: int = 200, chunk: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        tables = evaluate_potentials(graph, model, params, dataset.features(idx))
        msgs = MessageSet.zeros(graph, len(idx), epsilon)
        run_to_convergence(graph, tables, msgs, tol=1e-8, max_sweeps=sweeps)
        out.append(map_decode(graph, tables, msgs))
    return np.concatenate(out) if out else np.zeros((0, graph.space.N), dtype=np.intp)


def accuracy(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Word (zero-one) and character (Hamming) accuracy in percent."""
    if len(truth) == 0:
        return {"word_accuracy": 0.0, "char_accuracy": 0.0}
    correct = pred == truth
    return {"word_accuracy": 100.0 * float(np.mean(correct.all(axis=1))),
            "char_accuracy": 100.0 * float(np.mean(correct))}


def evaluate(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
             epsilon: float = 1.0, sweeps: int = 200) -> dict[str, float]:
    return accuracy(predict(dataset, graph, model, params, epsilon, sweeps), dataset.labels)


def dataset_objective(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                      epsilon: float = 1.0, sweeps: int = 1000, tol: float = 1e-9) -> float:
    """Approximate negative log-likelihood with multipliers optimised from scratch."""
    tables = evaluate_potentials(graph, model, params, dataset.features())
    msgs = MessageSet.zeros(graph, len(dataset), epsilon)
    run_to_convergence(graph, tables, msgs, tol=tol, max_sweeps=sweeps)
    return float(np.sum(dual_objective(graph, tables, msgs) - score_configuration(tables, dataset.labels)))


# --------------------------------------------------------------------------
# training loops


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch):
            yield order[start:start + batch]


def _train(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
           config: TrainConfig, *, sweeps: int, reset: bool, iterations: int | None = None,
           step_size: float | None = None, frozen: set[str] = frozenset(), val: Dataset | None = None,
           log: Callable[[str], None] | None = None, callback: Callable[[TrainState], None] | None = None,
           callback_every: int = 0, time_budget: float | None = None) -> TrainState:
    iterations = config.iterations if iterations is None else iterations
    state = TrainState(params.copy(), params.zeros_like(), step_size or config.step_size)
    state.bank = MessageBank(graph, len(dataset), config.epsilon)
    rng = np.random.default_rng([config.seed, 11])
    batches = _batches(len(dataset), min(config.batch_size, max(len(dataset), 1)), rng)
    last_good = state.params.copy()
    if log:
        log("iteration\tobjective\tstep_size\tval_word\tval_char\telapsed")
    for it in range(iterations):
        if time_budget is not None and state.compute_time >= time_budget:
            break
        t0 = time.perf_counter()
        idx = next(batches)
        x, y = dataset.features(idx), dataset.labels[idx]
        msgs = MessageSet.zeros(graph, len(idx), config.epsilon) if reset else state.bank.gather(idx)
        with np.errstate(over="ignore", invalid="ignore"):
            obj, grads = objective_and_gradient(x, y, graph, model, state.params, msgs, config.loss_augment,
                                                sweeps=sweeps, frozen=frozen)
        if not np.isfinite(obj) or not grads.is_finite():
            bad = [n for n in grads if not np.all(np.isfinite(grads[n]))]
            raise TrainingDiverged(f"non-finite objective/gradient at iteration {it} (parameters: {bad})",
                                   state, last_good)
        last_good = state.params.copy()
        if not reset:
            state.bank.scatter(idx, msgs)
        gradient_step(state, grads, config, frozen)
        state.iteration += 1
        state.compute_time += time.perf_counter() - t0
        row = {"iteration": state.iteration, "objective": obj, "step_size": state.step_size,
               "elapsed": state.compute_time}
        if val is not None and config.validate_every and state.iteration % config.validate_every == 0:
            acc = evaluate(val, graph, model, state.params, config.epsilon, config.eval_sweeps)
            step_decay_on_validation(state, acc["char_accuracy"], config.step_decay)
            row.update(val_word=acc["word_accuracy"], val_char=acc["char_accuracy"])
        state.trace.append(row)
        if log:
            log(f"{row['iteration']}\t{obj:.10g}\t{row['step_size']:.6g}\t{row.get('val_word', '')}\t"
                f"{row.get('val_char', '')}\t{row['elapsed']:.4f}")
        if callback and callback_every and state.iteration % callback_every == 0:
            callback(state)
    return state


def train_blended(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                  config: TrainConfig, **kw) -> TrainState:
    """One warm-started message sweep per weight update."""
    sweeps = 1 if config.message_sweeps_per_update is None else config.message_sweeps_per_update
    return _train(dataset, graph, model, params, config, sweeps=sweeps, reset=False, **kw)


def train_double_loop(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                      config: TrainConfig, reset: bool = True, **kw) -> TrainState:
    """Messages reset and re-solved with several sweeps before every weight update."""
    sweeps = 20 if config.message_sweeps_per_update is None else config.message_sweeps_per_update
    return _train(dataset, graph, model, params, config, sweeps=sweeps, reset=reset, **kw)


def zero_pairwise(model: PotentialModel, params: ParameterStore) -> ParameterStore:
    out = params.copy()
    for name in model.pairwise_params:
        out[name] = np.zeros_like(out[name])
    return out


def pretrain_unary(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                   config: TrainConfig, val: Dataset | None = None, **kw) -> ParameterStore:
    """Train the unary network alone on the singleton-only graph; pairwise tensors come back zeroed."""
    p0 = zero_pairwise(model, params)
    state = train_blended(dataset, graph.unary_only(), model, p0, config, iterations=config.pretrain_iterations,
                          frozen=set(model.pairwise_params), val=val, **kw)
    return state.params


def run_strategy(dataset: Dataset, graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                 config: TrainConfig, val: Dataset | None = None, algo: str = "blended",
                 pretrained: ParameterStore | None = None, **kw) -> TrainState:
    """Train with one of the four strategies.

    ``pretrained`` (unary weights from :func:`pretrain_unary`) skips phase one of
    PwTrain / PreTrainJoint.  Phase-two pairwise weights start from ``params``.
    """
    trainer = train_blended if algo == "blended" else train_double_loop
    strategy = config.strategy
    pair = set(model.pairwise_params)
    unary = set(model.unary_params)
    if strategy == "UnaryOnly":
        p0 = zero_pairwise(model, params)
        state = trainer(dataset, graph.unary_only(), model, p0, config, frozen=pair, val=val, **kw)
        return state
    if strategy == "JointTrain":
        return trainer(dataset, graph, model, params, config, val=val, **kw)
    if pretrained is None:
        pretrained = pretrain_unary(dataset, graph, model, params, config, val=val)
    p1 = params.copy()
    for name in unary:
        p1[name] = pretrained[name].copy()
    if strategy == "PwTrain":
        return trainer(dataset, graph, model, p1, config, frozen=unary, val=val, **kw)
    return trainer(dataset, graph, model, p1, config, val=val, step_size=config.pretrained_step_size, **kw)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
