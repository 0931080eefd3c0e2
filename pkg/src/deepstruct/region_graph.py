"""Region graphs, potential models and per-sample potential tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compute_graph import ComputationGraph, GradientStore, ParameterStore, backward, forward, mlp


class RegionGraphError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpace:
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        if len(self.cardinalities) < 1:
            raise RegionGraphError("need at least one variable")
        if any(k < 1 for k in self.cardinalities):
            raise RegionGraphError("every cardinality must be >= 1")

    @property
    def N(self) -> int:
        return len(self.cardinalities)

    def configuration_count(self, limit: int | None = None) -> int:
        """Product of cardinalities; raises once it exceeds ``limit``."""
        total = 1
        for k in self.cardinalities:
            total *= k
            if limit is not None and total > limit:
                raise OverflowError(f"state space exceeds {limit}")
        return total


@dataclass
class Region:
    id: int
    scope: tuple[int, ...]
    parents: list[int] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    counting_number: float = 1.0
    # ("unary", variable) | ("pairwise", edge_class) | ("zero",)
    binding: tuple = ("zero",)


@dataclass
class RegionGraph:
    space: VariableSpace
    regions: list[Region]

    def shape(self, r: int) -> tuple[int, ...]:
        return tuple(self.space.cardinalities[i] for i in self.regions[r].scope)

    @property
    def scopes(self) -> list[tuple[int, ...]]:
        return [reg.scope for reg in self.regions]

    def sweep_order(self) -> list[int]:
        """Regions that have parents, ordered by (scope size, lowest variable)."""
        rs = [reg for reg in self.regions if reg.parents]
        rs.sort(key=lambda reg: (len(reg.scope), reg.scope[0] if reg.scope else -1, reg.id))
        return [reg.id for reg in rs]

    def edge_classes(self) -> list[str]:
        seen: list[str] = []
        for reg in self.regions:
            if reg.binding[0] == "pairwise" and reg.binding[1] not in seen:
                seen.append(reg.binding[1])
        return seen

    def unary_only(self) -> RegionGraph:
        """Copy stripped to the singleton regions (no parents, no children)."""
        regs = []
        for reg in self.regions:
            if len(reg.scope) == 1:
                regs.append(Region(len(regs), reg.scope, [], [], reg.counting_number, reg.binding))
        return RegionGraph(self.space, regs)

    def is_tree(self) -> bool:
        """True for pairwise graphs whose variable adjacency is a forest."""
        edges = [reg.scope for reg in self.regions if len(reg.scope) == 2]
        if any(len(reg.scope) > 2 for reg in self.regions):
            return False
        parent = list(range(self.space.N))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in edges:
            a, b = find(i), find(j)
            if a == b:
                return False
            parent[a] = b
        return True


def link(regions: list[Region], child: int, par: int) -> None:
    regions[child].parents.append(par)
    regions[par].children.append(child)


def build_chain_model(N: int, K: int, order: int = 1, unary_counting: float = 1.0,
                      pairwise_counting: float = 1.0) -> RegionGraph:
    """Unary regions plus distance-1 (and, for order 2, distance-2) pairwise regions."""
    if order not in (1, 2):
        raise RegionGraphError("order must be 1 or 2")
    if N < 2:
        raise RegionGraphError("chain needs N >= 2")
    if order == 2 and N < 3:
        raise RegionGraphError("order 2 needs N >= 3")
    if K < 2:
        raise RegionGraphError("K must be >= 2")
    space = VariableSpace((K,) * N)
    regions = [Region(i, (i,), counting_number=unary_counting, binding=("unary", i)) for i in range(N)]
    for dist in range(1, order + 1):
        for i in range(N - dist):
            rid = len(regions)
            regions.append(Region(rid, (i, i + dist), counting_number=pairwise_counting,
                                  binding=("pairwise", f"d{dist}")))
            link(regions, i, rid)
            link(regions, i + dist, rid)
    return RegionGraph(space, regions)


def build_region_graph(cardinalities, pair_scopes, unary_counting: float = 1.0,
                       pairwise_counting: float = 1.0, edge_class: str = "pair") -> RegionGraph:
    """Unary regions for every variable plus the given pairwise regions, all in one edge class."""
    space = VariableSpace(tuple(cardinalities))
    regions = [Region(i, (i,), counting_number=unary_counting, binding=("unary", i)) for i in range(space.N)]
    for scope in pair_scopes:
        i, j = sorted(scope)
        rid = len(regions)
        regions.append(Region(rid, (i, j), counting_number=pairwise_counting, binding=("pairwise", edge_class)))
        link(regions, i, rid)
        link(regions, j, rid)
    return RegionGraph(space, regions)


def validate(graph: RegionGraph, epsilon: float = 1.0) -> list[str]:
    """All invariant violations (empty list means the graph is fine)."""
    out = []
    n = len(graph.regions)
    for k, reg in enumerate(graph.regions):
        if reg.id != k:
            out.append(f"region {k}: id {reg.id} does not match position")
        if list(reg.scope) != sorted(set(reg.scope)):
            out.append(f"region {k}: scope must be sorted and duplicate free")
        if any(v < 0 or v >= graph.space.N for v in reg.scope):
            out.append(f"region {k}: scope variable out of range")
        if epsilon * reg.counting_number < 0:
            out.append(f"region {k}: negative weighted entropy (epsilon*c_r = {epsilon * reg.counting_number})")
        for p in reg.parents:
            if not 0 <= p < n:
                out.append(f"region {k}: unknown parent {p}")
                continue
            par = graph.regions[p]
            if not set(reg.scope) < set(par.scope):
                out.append(f"region {k}: non-strict containment in parent {p}")
            if k not in par.children:
                out.append(f"region {k}: parent {p} does not list it as child")
        for c in reg.children:
            if not 0 <= c < n:
                out.append(f"region {k}: unknown child {c}")
            elif k not in graph.regions[c].parents:
                out.append(f"region {k}: child {c} does not list it as parent")
        kind = reg.binding[0]
        if kind == "unary" and (len(reg.scope) != 1 or reg.binding[1] != reg.scope[0]):
            out.append(f"region {k}: unary binding on scope {reg.scope}")
        elif kind == "pairwise" and len(reg.scope) != 2:
            out.append(f"region {k}: pairwise binding on scope {reg.scope}")
        elif kind not in ("unary", "pairwise", "zero"):
            out.append(f"region {k}: unknown binding {kind!r}")
    return out


# --------------------------------------------------------------------------
# potentials


@dataclass
class PairwiseModel:
    """Shared pairwise table of one edge class: a raw matrix or a small MLP."""

    name: str
    shape: tuple[int, int]
    kind: str = "linear"
    hidden: int = 0
    net: ComputationGraph | None = None

    @property
    def param_names(self) -> list[str]:
        if self.kind == "linear":
            return [f"pair_{self.name}_W"]
        return self.net.parameter_names()

    def table(self, params: ParameterStore):
        if self.kind == "linear":
            return params[f"pair_{self.name}_W"], None
        acts = forward(self.net, params, {"one": np.ones((1, 1))})
        return acts[self.net.outputs[0]].reshape(self.shape), acts

    def backprop(self, params: ParameterStore, cache, grad_table: np.ndarray, grads: GradientStore) -> None:
        if self.kind == "linear":
            grads.add(f"pair_{self.name}_W", grad_table)
        else:
            backward(self.net, params, cache, {self.net.outputs[0]: grad_table.reshape(1, -1)}, grads)


def linear_pairwise(name: str, shape: tuple[int, int], params: ParameterStore | None = None,
                    rng: np.random.Generator | None = None) -> PairwiseModel:
    model = PairwiseModel(name, tuple(shape), "linear")
    if params is not None and f"pair_{name}_W" not in params:
        if rng is None:
            params[f"pair_{name}_W"] = np.zeros(shape)
        else:
            params.init_uniform(f"pair_{name}_W", tuple(shape), shape[0], shape[1], rng)
    return model


def mlp_pairwise(name: str, shape: tuple[int, int], hidden: int, params: ParameterStore | None = None,
                 rng: np.random.Generator | None = None) -> PairwiseModel:
    """Table = W2 relu(W1 * 1 + b1) + b2, reshaped to ``shape``."""
    net = ComputationGraph()
    net.input("one", 1)
    out = mlp(net, params, "one", [hidden, shape[0] * shape[1]], f"pair_{name}_", rng)
    net.mark_output(out)
    return PairwiseModel(name, tuple(shape), "mlp", hidden, net)


@dataclass
class PotentialModel:
    """Shared unary network (one application per variable slot) plus pairwise models per edge class."""

    unary: ComputationGraph
    pairwise: dict[str, PairwiseModel] = field(default_factory=dict)

    @property
    def unary_output(self) -> str:
        return self.unary.outputs[0]

    @property
    def unary_params(self) -> list[str]:
        return self.unary.parameter_names()

    @property
    def pairwise_params(self) -> list[str]:
        return [n for m in self.pairwise.values() for n in m.param_names]


def mlp_unary(in_dim: int, hidden: list[int], K: int, params: ParameterStore | None = None,
              rng: np.random.Generator | None = None) -> ComputationGraph:
    net = ComputationGraph()
    net.input("x", in_dim)
    out = mlp(net, params, "x", list(hidden) + [K], "unary_", rng)
    net.mark_output(out)
    return net


@dataclass
class PotentialTables:
    """Region tables for a batch: ``values[r]`` has shape ``(B, *region_shape)``."""

    scopes: list[tuple[int, ...]]
    values: list[np.ndarray]
    cache: dict | None = None

    @classmethod
    def single(cls, scopes, tables) -> PotentialTables:
        return cls([tuple(s) for s in scopes], [np.asarray(t, dtype=np.float64)[None] for t in tables])

    @classmethod
    def for_graph(cls, graph: RegionGraph, tables, batched: bool = False) -> PotentialTables:
        vals = [np.asarray(t, dtype=np.float64) for t in tables]
        if not batched:
            vals = [v[None] for v in vals]
        for r, v in enumerate(vals):
            if v.shape[1:] != graph.shape(r):
                raise RegionGraphError(f"region {r}: table shape {v.shape[1:]} != {graph.shape(r)}")
        return cls(graph.scopes, vals)

    @property
    def batch_size(self) -> int:
        return self.values[0].shape[0] if self.values else 0

    def copy(self) -> PotentialTables:
        return PotentialTables(list(self.scopes), [v.copy() for v in self.values], self.cache)

    def scaled_sum(self, alpha: float, other: PotentialTables, beta: float) -> PotentialTables:
        return PotentialTables(list(self.scopes), [alpha * a + beta * b for a, b in zip(self.values, other.values)])


def evaluate_potentials(graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                        x: np.ndarray) -> PotentialTables:
    """Tables for a batch of inputs ``x`` of shape ``(B, N, D)`` (or ``(N, D)`` for one sample)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, N, D = x.shape
    if N != graph.space.N:
        raise RegionGraphError(f"input has {N} slots, graph has {graph.space.N} variables")
    acts = forward(model.unary, params, {"x": x.reshape(B * N, D)})
    u = acts[model.unary_output]
    u = u.reshape(B, N, u.shape[-1])
    pair_tables, pair_cache = {}, {}
    values = []
    for reg in graph.regions:
        kind = reg.binding[0]
        shape = graph.shape(reg.id)
        if kind == "unary":
            i = reg.binding[1]
            if u.shape[-1] != shape[0]:
                raise RegionGraphError(f"unary head width {u.shape[-1]} != |Y_{i}| = {shape[0]}")
            values.append(u[:, i, :])
        elif kind == "pairwise":
            cls = reg.binding[1]
            if cls not in pair_tables:
                if cls not in model.pairwise:
                    raise RegionGraphError(f"no pairwise model for edge class {cls!r}")
                pair_tables[cls], pair_cache[cls] = model.pairwise[cls].table(params)
            t = pair_tables[cls]
            if t.shape != shape:
                raise RegionGraphError(f"pairwise table {t.shape} != region shape {shape}")
            values.append(np.broadcast_to(t, (B,) + shape))
        else:
            values.append(np.zeros((B,) + shape))
    return PotentialTables(graph.scopes, values, {"unary": acts, "pairwise": pair_cache, "B": B, "N": N})


def backprop_potentials(graph: RegionGraph, model: PotentialModel, params: ParameterStore,
                        tables: PotentialTables, table_grads: list[np.ndarray],
                        grads: GradientStore | None = None, skip: set[str] | None = None) -> GradientStore:
    """Chain d(objective)/d(table entries) back to the parameters.

    ``skip`` lists parameter groups ("unary", "pairwise") whose backward pass
    is not needed (frozen parameters); their gradients stay zero.
    """
    skip = skip or set()
    if grads is None:
        grads = params.zeros_like()
    B, N = tables.cache["B"], tables.cache["N"]
    if "unary" not in skip:
        acts = tables.cache["unary"]
        K = acts[model.unary_output].shape[-1]
        gu = np.zeros((B, N, K))
        for reg in graph.regions:
            if reg.binding[0] == "unary":
                gu[:, reg.binding[1], :] += table_grads[reg.id]
        backward(model.unary, params, acts, {model.unary_output: gu.reshape(B * N, K)}, grads)
    if "pairwise" not in skip:
        per_class: dict[str, np.ndarray] = {}
        for reg in graph.regions:
            if reg.binding[0] == "pairwise":
                g = table_grads[reg.id].sum(axis=0)
                cls = reg.binding[1]
                per_class[cls] = per_class[cls] + g if cls in per_class else g
        for cls, g in per_class.items():
            model.pairwise[cls].backprop(params, tables.cache["pairwise"][cls], g, grads)
    return grads


def score_configuration(tables: PotentialTables, y) -> np.ndarray | float:
    """Sum of region table entries at assignment ``y`` (0-based labels); one value per batch row."""
    y = np.asarray(y, dtype=np.intp)
    single = y.ndim == 1
    if single:
        y = np.broadcast_to(y, (tables.batch_size, y.shape[0]))
    B = tables.batch_size
    total = np.zeros(B)
    rows = np.arange(B)
    for scope, v in zip(tables.scopes, tables.values):
        idx = tuple(y[:, i] for i in scope)
        for i, dim in zip(scope, v.shape[1:]):
            if np.any(y[:, i] < 0) or np.any(y[:, i] >= dim):
                raise IndexError(f"label of variable {i} out of range [0, {dim})")
        total += v[(rows,) + idx]
    return float(total[0]) if single and B == 1 else total


def loss_augment(tables: PotentialTables, y_truth, weight: float) -> PotentialTables:
    """Add ``weight * [label != truth]`` to every unary table (Hamming loss)."""
    if weight < 0:
        raise ValueError("loss weight must be >= 0")
    y = np.asarray(y_truth, dtype=np.intp)
    if y.ndim == 1:
        y = np.broadcast_to(y, (tables.batch_size, y.shape[0]))
    out = []
    for scope, v in zip(tables.scopes, tables.values):
        if len(scope) == 1 and weight != 0:
            K = v.shape[1]
            miss = np.arange(K)[None, :] != y[:, scope[0]][:, None]
            v = v + weight * miss
        out.append(v)
    return PotentialTables(list(tables.scopes), out, tables.cache)


def point_mass_targets(graph: RegionGraph, y) -> list[np.ndarray]:
    """Per-region indicator tables of the ground-truth restriction, shape (B, *region_shape)."""
    y = np.asarray(y, dtype=np.intp)
    if y.ndim == 1:
        y = y[None]
    B = y.shape[0]
    rows = np.arange(B)
    out = []
    for reg in graph.regions:
        t = np.zeros((B,) + graph.shape(reg.id))
        t[(rows,) + tuple(y[:, i] for i in reg.scope)] = 1.0
        out.append(t)
    return out


def state_space_size(graph: RegionGraph) -> int:
    return math.prod(graph.space.cardinalities)


def build_potential_model(graph: RegionGraph, in_dim: int, hidden: list[int], pairwise: str = "linear",
                          pair_hidden: int = 32, seed: int = 0) -> tuple[PotentialModel, ParameterStore]:
    """Shared unary MLP plus one shared pairwise model per edge class, randomly initialised."""
    K = graph.space.cardinalities[0]
    if any(k != K for k in graph.space.cardinalities):
        raise RegionGraphError("a shared unary network needs equal cardinalities")
    rng = np.random.default_rng([seed, 3])
    params = ParameterStore()
    unary = mlp_unary(in_dim, hidden, K, params, rng)
    pw = {}
    for cls in graph.edge_classes():
        if pairwise == "linear":
            pw[cls] = linear_pairwise(cls, (K, K), params, rng)
        elif pairwise == "mlp":
            pw[cls] = mlp_pairwise(cls, (K, K), pair_hidden, params, rng)
        else:
            raise RegionGraphError(f"unknown pairwise kind {pairwise!r}")
    return PotentialModel(unary, pw), params
