"""Small reverse-mode computation graph used to build potential networks.

Tensors are plain float64 numpy arrays.  Nodes fed by an ``Input`` carry a
leading row axis (one row per sample or per character slot); ``Parameter``
nodes do not.  Nodes must be added after their inputs, so insertion order is
a valid topological order and the graph is a DAG by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

NODE_KINDS = ("Input", "Parameter", "Affine", "ReLU", "Sigmoid", "Softmax", "Concat", "Lookup")


class GraphError(ValueError):
    """Raised for malformed graphs, unbound inputs and shape mismatches."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"node {node!r}: {message}" if node is not None else message)


@dataclass
class GraphNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    output_shape: tuple[int, ...] = ()
    param: str | None = None


class ParameterStore:
    """Named parameter tensors.

    Several Parameter nodes (possibly in different graphs) may name the same
    tensor; that is how weight sharing is expressed.
    """

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self.tensors[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> ParameterStore:
        return ParameterStore({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> GradientStore:
        return GradientStore({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.tensors]) if self.tensors else np.zeros(0)

    def init_uniform(self, name: str, shape: tuple[int, ...], fan_in: int, fan_out: int,
                     rng: np.random.Generator) -> None:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        self.tensors[name] = rng.uniform(-s, s, size=shape)


class GradientStore(ParameterStore):
    """Gradient tensors, shape-congruent with a ParameterStore."""

    def reset(self) -> None:
        for v in self.tensors.values():
            v[...] = 0.0

    def add(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] += value

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass
class ComputationGraph:
    nodes: dict[str, GraphNode] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def _add(self, node: GraphNode) -> str:
        if node.id in self.nodes:
            raise GraphError("duplicate node id", node.id)
        for src in node.inputs:
            if src not in self.nodes:
                raise GraphError(f"unknown input {src!r}", node.id)
        self.nodes[node.id] = node
        return node.id

    def _node(self, nid: str, user: str) -> GraphNode:
        if nid not in self.nodes:
            raise GraphError(f"unknown input {nid!r}", user)
        return self.nodes[nid]

    def _width(self, nid: str) -> int:
        shape = self.nodes[nid].output_shape
        return shape[-1] if shape else 1

    # builders -------------------------------------------------------------
    def input(self, name: str, dim: int) -> str:
        return self._add(GraphNode(name, "Input", (), (dim,)))

    def parameter(self, name: str, shape: tuple[int, ...], param: str | None = None) -> str:
        """Declare a parameter node; ``param`` names the stored tensor (defaults to ``name``)."""
        return self._add(GraphNode(name, "Parameter", (), tuple(shape), param or name))

    def affine(self, name: str, x: str, weight: str, bias: str) -> str:
        for nid in (x, weight, bias):
            self._node(nid, name)
        if len(self.nodes[weight].output_shape) != 2:
            raise GraphError("affine weight must be a matrix", name)
        out_dim, in_dim = self.nodes[weight].output_shape
        if self._width(x) != in_dim:
            raise GraphError(f"input width {self._width(x)} != weight columns {in_dim}", name)
        if self.nodes[bias].output_shape != (out_dim,):
            raise GraphError(f"bias shape {self.nodes[bias].output_shape} != ({out_dim},)", name)
        return self._add(GraphNode(name, "Affine", (x, weight, bias), (out_dim,)))

    def relu(self, name: str, x: str) -> str:
        return self._add(GraphNode(name, "ReLU", (x,), self._node(x, name).output_shape))

    def sigmoid(self, name: str, x: str) -> str:
        return self._add(GraphNode(name, "Sigmoid", (x,), self._node(x, name).output_shape))

    def softmax(self, name: str, x: str) -> str:
        return self._add(GraphNode(name, "Softmax", (x,), self._node(x, name).output_shape))

    def concat(self, name: str, *xs: str) -> str:
        for x in xs:
            self._node(x, name)
        return self._add(GraphNode(name, "Concat", tuple(xs), (sum(self._width(x) for x in xs),)))

    def lookup(self, name: str, table: str, index: str) -> str:
        """Select rows of a parameter matrix by the integer values of ``index``."""
        shape = self._node(table, name).output_shape
        self._node(index, name)
        if len(shape) != 2:
            raise GraphError("lookup table must be a matrix", name)
        return self._add(GraphNode(name, "Lookup", (table, index), (shape[1],)))

    def mark_output(self, *names: str) -> None:
        for n in names:
            if n not in self.nodes:
                raise GraphError("unknown output", n)
            if n not in self.outputs:
                self.outputs.append(n)

    def parameter_names(self) -> list[str]:
        return sorted({n.param for n in self.nodes.values() if n.kind == "Parameter"})


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(graph: ComputationGraph, params: ParameterStore,
            inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    values: dict[str, np.ndarray] = {}
    for nid, node in graph.nodes.items():
        a = [values[i] for i in node.inputs]
        if node.kind == "Input":
            if nid not in inputs:
                raise GraphError("unbound input", nid)
            v = np.asarray(inputs[nid])
            if v.dtype != np.longdouble:  # extended precision passes through for difference checks
                v = v.astype(np.float64, copy=False)
            if v.ndim == 1:
                v = v[None, :]
            if v.shape[-1] != node.output_shape[0]:
                raise GraphError(f"input width {v.shape[-1]} != declared {node.output_shape[0]}", nid)
        elif node.kind == "Parameter":
            if node.param not in params:
                raise GraphError(f"parameter {node.param!r} missing from store", nid)
            v = params[node.param]
            if v.shape != node.output_shape:
                raise GraphError(f"stored shape {v.shape} != declared {node.output_shape}", nid)
        elif node.kind == "Affine":
            v = a[0] @ a[1].T + a[2]
        elif node.kind == "ReLU":
            v = np.maximum(a[0], 0.0)
        elif node.kind == "Sigmoid":
            v = expit(a[0])
        elif node.kind == "Softmax":
            v = _softmax(a[0])
        elif node.kind == "Concat":
            rows = max(x.shape[0] if x.ndim > 1 else 1 for x in a)
            v = np.concatenate([np.broadcast_to(x, (rows, x.shape[-1])) for x in a], axis=-1)
        elif node.kind == "Lookup":
            idx = np.asarray(a[1]).reshape(-1).astype(np.intp)
            if idx.size and (idx.min() < 0 or idx.max() >= a[0].shape[0]):
                raise GraphError("lookup index out of range", nid)
            v = a[0][idx]
        else:
            raise GraphError(f"unknown kind {node.kind}", nid)
        values[nid] = v
    return values


def backward(graph: ComputationGraph, params: ParameterStore, activations: dict[str, np.ndarray],
             output_grads: dict[str, np.ndarray], grads: GradientStore | None = None) -> GradientStore:
    """Accumulate d(sum_o <g_o, out_o>)/dw into ``grads`` (a fresh store if None)."""
    if grads is None:
        grads = params.zeros_like()
    missing = [o for o in graph.outputs if o not in output_grads]
    if missing or not output_grads:
        raise GraphError("no gradient given for output", missing[0] if missing else None)
    adj: dict[str, np.ndarray] = {}
    for nid, g in output_grads.items():
        if nid not in activations:
            raise GraphError("missing activation", nid)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != activations[nid].shape:
            raise GraphError(f"output grad shape {g.shape} != activation {activations[nid].shape}", nid)
        adj[nid] = g

    def acc(nid: str, g: np.ndarray) -> None:
        if nid in adj:
            adj[nid] = adj[nid] + g
        else:
            adj[nid] = g

    for nid in reversed(list(graph.nodes)):
        if nid not in adj:
            continue
        node = graph.nodes[nid]
        g = adj.pop(nid)
        if nid not in activations:
            raise GraphError("missing activation", nid)
        if node.kind == "Input":
            continue
        if node.kind == "Parameter":
            grads.add(node.param, g)
            continue
        ins = [activations[i] for i in node.inputs]
        if node.kind == "Affine":
            x, w, _ = ins
            x2 = x if x.ndim > 1 else x[None, :]
            g2 = g if g.ndim > 1 else g[None, :]
            acc(node.inputs[1], g2.T @ x2)
            acc(node.inputs[2], g2.sum(axis=0))
            if graph.nodes[node.inputs[0]].kind != "Input":
                acc(node.inputs[0], (g2 @ w).reshape(x.shape))
        elif node.kind == "ReLU":
            acc(node.inputs[0], g * (ins[0] > 0.0))
        elif node.kind == "Sigmoid":
            s = activations[nid]
            acc(node.inputs[0], g * s * (1.0 - s))
        elif node.kind == "Softmax":
            s = activations[nid]
            acc(node.inputs[0], s * (g - (g * s).sum(axis=-1, keepdims=True)))
        elif node.kind == "Concat":
            start = 0
            for src, x in zip(node.inputs, ins):
                w = x.shape[-1]
                part = g[..., start:start + w]
                if x.ndim == 1 or x.shape[0] != part.shape[0]:
                    part = part.sum(axis=0).reshape(x.shape)
                acc(src, part)
                start += w
        elif node.kind == "Lookup":
            table = ins[0]
            idx = np.asarray(ins[1]).reshape(-1).astype(np.intp)
            gt = np.zeros_like(table)
            np.add.at(gt, idx, g)
            acc(node.inputs[0], gt)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_gradient(fn: Callable[[ParameterStore], float], params: ParameterStore,
                   grads: ParameterStore, h: float = 1e-5,
                   names: list[str] | None = None, dtype=np.float64) -> tuple[float, str | None]:
    """Central differences of ``fn`` against ``grads``.

    Returns ``(max_error, worst_parameter)`` where the error of one entry is
    ``|analytic - numeric| / max(1, |numeric|)``.  With ``dtype=np.longdouble``
    the perturbed tensors, and whatever ``fn`` computes from them, carry
    extended precision, which keeps rounding out of the quotient at tiny ``h``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    worst, worst_name = 0.0, None
    work = ParameterStore()
    work.tensors = {k: v.astype(dtype) for k, v in params.tensors.items()}
    for name in names or params.names():
        t = work[name]
        flat = t.reshape(-1)
        numeric = np.empty(flat.size, dtype=dtype)
        for k in range(flat.size):
            old = flat[k]
            # divide by the steps actually representable, not the nominal 2h
            flat[k] = old + h
            up = flat[k] - old
            fp = fn(work)
            flat[k] = old - h
            down = old - flat[k]
            fm = fn(work)
            flat[k] = old
            numeric[k] = (fp - fm) / (up + down)
        err = max_relative_error(grads[name].reshape(-1), numeric)
        if err > worst or worst_name is None:
            worst, worst_name = err, name
    return worst, worst_name


def finite_difference_check(graph: ComputationGraph, params: ParameterStore,
                            inputs: dict[str, np.ndarray], output: str, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for a scalar node."""
    acts = forward(graph, params, inputs)
    if acts[output].size != 1:
        raise GraphError("finite-difference check needs a scalar output", output)
    seeds = {o: np.zeros_like(acts[o]) for o in graph.outputs}
    seeds[output] = np.ones_like(acts[output])
    grads = backward(graph, params, acts, seeds)

    ext = {k: np.asarray(v, dtype=np.longdouble) for k, v in inputs.items()}

    def fn(p: ParameterStore):
        return forward(graph, p, ext)[output].sum()

    return check_gradient(fn, params, grads, h, names=graph.parameter_names(), dtype=np.longdouble)[0]


def mlp(graph: ComputationGraph, params: ParameterStore | None, x: str, sizes: list[int],
        prefix: str, rng: np.random.Generator | None = None, final_relu: bool = False) -> str:
    """Append a ReLU perceptron ``x -> sizes[0] -> ... -> sizes[-1]``; returns the last node id.

    When ``params`` is given, tensors named ``{prefix}W{k}`` / ``{prefix}b{k}``
    are initialised (uniform Glorot weights, zero biases) unless already present.
    """
    cur = x
    width = graph._width(x)
    for k, out in enumerate(sizes, start=1):
        wn, bn = f"{prefix}W{k}", f"{prefix}b{k}"
        graph.parameter(wn, (out, width))
        graph.parameter(bn, (out,))
        if params is not None and wn not in params:
            params.init_uniform(wn, (out, width), width, out, rng if rng is not None else np.random.default_rng(0))
            params[bn] = np.zeros(out)
        cur = graph.affine(f"{prefix}a{k}", cur, wn, bn)
        if k < len(sizes) or final_relu:
            cur = graph.relu(f"{prefix}h{k}", cur)
        width = out
    return cur
