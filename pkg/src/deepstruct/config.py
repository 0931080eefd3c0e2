"""INI-style model specification: parse, serialize, and instantiate.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` comments (whole
line or trailing).  ``node`` and ``param`` may repeat inside ``[network]``;
every other key may appear once.  Errors carry the line and column of the
first offending token.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .compute_graph import ComputationGraph, GraphError, ParameterStore, mlp
from .data import DatasetSpec
from .learning import TrainConfig
from .region_graph import (
    PotentialModel,
    RegionGraph,
    RegionGraphError,
    build_chain_model,
    build_region_graph,
    linear_pairwise,
    mlp_pairwise,
    validate,
)

SECTIONS = ("network", "graph", "train", "data")
NODE_KINDS = {"affine": 3, "relu": 1, "sigmoid": 1, "softmax": 1, "concat": None, "lookup": 2}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, key: str | None = None):
        self.message, self.line, self.column, self.key = message, line, column, key
        where = f"line {line}, col {column}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class NetworkSpec:
    """Unary network shared by all variable slots.

    Either ``hidden`` (ReLU MLP shorthand) or explicit ``params``/``nodes``
    reading from the input node ``x``.
    """

    input_dim: int = 784
    hidden: list[int] = field(default_factory=lambda: [128])
    params: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    nodes: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)
    output: str = ""

    @property
    def explicit(self) -> bool:
        return bool(self.nodes)


@dataclass
class GraphSpec:
    variables: int = 5
    cardinality: int = 26
    order: int = 1
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unary_counting: float = 1.0
    pairwise_counting: float = 1.0
    pairwise: str = "linear"
    pair_hidden: int = 32


@dataclass
class ModelSpecDoc:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    graph: GraphSpec = field(default_factory=GraphSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    data_path: str = ""
    # key -> (line, column) of its value; not part of equality
    locations: dict[str, tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)


# --------------------------------------------------------------------------
# value converters


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError("not finite")
    return v


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("not a boolean")


def _int_list(s: str) -> list[int]:
    if s.lower() in ("", "none"):
        return []
    return [int(t) for t in s.replace(",", " ").split()]


def _pairs(s: str) -> list[tuple[int, int]]:
    out = []
    for tok in s.replace(",", " ").split():
        a, b = tok.split("-")
        out.append((int(a), int(b)))
    return out


def _optional_int(s: str) -> int | None:
    return None if s.lower() in ("auto", "none", "") else int(s)


def _words(s: str) -> list[str]:
    return s.replace(",", " ").split()


_GRAPH_KEYS: dict[str, Callable] = {
    "variables": _int, "cardinality": _int, "order": _int, "pairs": _pairs,
    "unary_counting": _float, "pairwise_counting": _float, "pairwise": str, "pair_hidden": _int,
}
_TRAIN_KEYS: dict[str, Callable] = {
    "epsilon": _float, "step_size": _float, "momentum": _float, "batch_size": _int, "iterations": _int,
    "message_sweeps_per_update": _optional_int, "step_decay": _float, "strategy": str,
    "loss_augment": _float, "seed": _int, "pretrain_iterations": _int, "pretrained_step_size": _float,
    "validate_every": _int, "eval_sweeps": _int,
}
_DATA_KEYS: dict[str, Callable] = {
    "path": str, "vocabulary": _words, "vocab_size": _int, "word_length": _int, "train": _int, "val": _int,
    "test": _int, "rotation": _float, "scale_min": _float, "scale_max": _float, "translation": _float,
    "noise": _float, "background": str, "image_size": _int, "seed": _int, "clutter": _int,
    "occlusion": _float,
}
_NETWORK_KEYS = ("input", "hidden", "param", "node", "output")
_REPEATABLE = {("network", "param"), ("network", "node")}


# --------------------------------------------------------------------------
# parsing


def _strip_comment(line: str) -> str:
    k = line.find("#")
    return line if k < 0 else line[:k]


def parse(text: str) -> ModelSpecDoc:
    """Parse spec text; raises :class:`ConfigError` at the first problem."""
    raw: dict[str, dict[str, list[tuple[str, int, int]]]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = _strip_comment(line).rstrip()
        if not body.strip():
            continue
        lead = len(body) - len(body.lstrip())
        stripped = body.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", lineno, lead + 1)
            name = stripped[1:-1].strip()
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]", lineno, lead + 2)
            if name in raw:
                raise ConfigError(f"duplicate section [{name}]", lineno, lead + 2)
            raw[name] = {}
            section = name
            continue
        eq = body.find("=")
        if eq < 0:
            raise ConfigError("expected 'key = value'", lineno, lead + 1)
        if section is None:
            raise ConfigError("key outside of any section", lineno, lead + 1)
        key = body[:eq].strip()
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"bad key {key!r}", lineno, lead + 1)
        value = body[eq + 1:]
        vcol = eq + 2 + (len(value) - len(value.lstrip()))
        entries = raw[section].setdefault(key, [])
        if entries and (section, key) not in _REPEATABLE:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, lead + 1)
        entries.append((value.strip(), lineno, vcol))
    if "graph" not in raw:
        raise ConfigError("missing required section [graph]", len(text.splitlines()) + 1, 1)
    doc = ModelSpecDoc()
    _read_network(raw.get("network", {}), doc)
    _read_simple(raw["graph"], "graph", _GRAPH_KEYS, doc.graph, doc)
    _check_graph(doc)
    train_vals = _read_dict(raw.get("train", {}), "train", _TRAIN_KEYS, doc)
    data_vals = _read_dict(raw.get("data", {}), "data", _DATA_KEYS, doc)
    doc.data_path = data_vals.pop("path", "")
    doc.train = _build(TrainConfig, train_vals, "train", doc)
    doc.data = _build(DatasetSpec, data_vals, "data", doc)
    return doc


def _convert(conv: Callable, value: str, section: str, key: str, line: int, col: int):
    try:
        return conv(value)
    except (ValueError, TypeError):
        kind = getattr(conv, "__name__", "value").lstrip("_")
        raise ConfigError(f"[{section}] {key}: cannot read {value!r} as {kind}", line, col, key) from None


def _read_dict(entries, section: str, keys: dict[str, Callable], doc: ModelSpecDoc) -> dict:
    out = {}
    for key, vals in entries.items():
        value, line, col = vals[0]
        if key not in keys:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line, max(col - len(key) - 3, 1), key)
        out[key] = _convert(keys[key], value, section, key, line, col)
        doc.locations[f"{section}.{key}"] = (line, col)
    return out


def _read_simple(entries, section: str, keys, target, doc: ModelSpecDoc) -> None:
    for key, value in _read_dict(entries, section, keys, doc).items():
        setattr(target, key, value)


def _build(cls, values: dict, section: str, doc: ModelSpecDoc):
    try:
        return cls(**values)
    except ValueError as exc:
        loc = _blame(str(exc), section, values, doc)
        raise ConfigError(f"[{section}] {exc}", *loc) from None


def _blame(message: str, section: str, values: dict, doc: ModelSpecDoc):
    """Location of the key most likely responsible for a downstream error."""
    for key in sorted(values, key=len, reverse=True):
        if key in message:
            line, col = doc.locations[f"{section}.{key}"]
            return line, col, key
    if values:
        key = next(iter(values))
        line, col = doc.locations[f"{section}.{key}"]
        return line, col, key
    return None, None, None


def _check_graph(doc: ModelSpecDoc) -> None:
    g = doc.graph

    def fail(msg, key):
        line, col = doc.locations.get(f"graph.{key}", (None, None))
        raise ConfigError(msg, line, col, key)

    if "graph.order" in doc.locations and g.pairs:
        fail("give either order or pairs, not both", "pairs")
    if g.order not in (1, 2):
        fail("order must be 1 or 2", "order")
    if g.variables < 1:
        fail("variables must be >= 1", "variables")
    if g.cardinality < 2:
        fail("cardinality must be >= 2", "cardinality")
    if g.pairwise not in ("linear", "mlp"):
        fail(f"pairwise must be linear or mlp, got {g.pairwise!r}", "pairwise")
    if g.pair_hidden < 1:
        fail("pair_hidden must be >= 1", "pair_hidden")
    for a, b in g.pairs:
        if a == b or not (0 <= a < g.variables and 0 <= b < g.variables):
            fail(f"bad pair {a}-{b}", "pairs")


def _read_network(entries, doc: ModelSpecDoc) -> None:
    net = doc.network
    declared_params: dict[str, int] = {}
    declared_nodes = {"x"}
    for key, vals in entries.items():
        if key not in _NETWORK_KEYS:
            value, line, col = vals[0]
            raise ConfigError(f"unknown key {key!r} in [network]", line, max(col - len(key) - 3, 1), key)
    # process in file order so nodes may only reference earlier declarations
    ordered = sorted(((line, col, key, value) for key, vals in entries.items() for value, line, col in vals))
    for line, col, key, value in ordered:
        doc.locations.setdefault(f"network.{key}", (line, col))
        if key == "input":
            net.input_dim = _convert(_int, value, "network", key, line, col)
            if net.input_dim < 1:
                raise ConfigError("input must be >= 1", line, col, key)
        elif key == "hidden":
            net.hidden = _convert(_int_list, value, "network", key, line, col)
            if any(h < 1 for h in net.hidden):
                raise ConfigError("hidden sizes must be >= 1", line, col, key)
        elif key == "output":
            net.output = value
        elif key == "param":
            toks = value.split()
            if len(toks) < 2:
                raise ConfigError("param needs a name and at least one dimension", line, col, key)
            name = toks[0]
            if name in declared_params:
                raise ConfigError(f"parameter {name!r} declared twice (first on line {declared_params[name]})",
                                  line, col, key)
            dims = tuple(_convert(_int, t, "network", key, line, col) for t in toks[1:])
            if any(d < 1 for d in dims) or len(dims) > 2:
                raise ConfigError(f"parameter {name!r}: need 1 or 2 positive dimensions", line, col, key)
            declared_params[name] = line
            net.params.append((name, dims))
        else:  # node
            toks = value.split()
            if len(toks) < 3:
                raise ConfigError("node needs an id, a kind and inputs", line, col, key)
            nid, kind, inputs = toks[0], toks[1].lower(), tuple(toks[2:])
            if kind not in NODE_KINDS:
                raise ConfigError(f"unknown node kind {toks[1]!r}", line, col, key)
            arity = NODE_KINDS[kind]
            if arity is not None and len(inputs) != arity:
                raise ConfigError(f"{kind} takes {arity} input(s), got {len(inputs)}", line, col, key)
            if nid in declared_nodes or nid in declared_params:
                raise ConfigError(f"node id {nid!r} already used", line, col, key)
            for src in inputs:
                if src not in declared_nodes and src not in declared_params:
                    raise ConfigError(f"node {nid!r} references undeclared {src!r}", line, col, key)
            declared_nodes.add(nid)
            net.nodes.append((nid, kind, inputs))
            last_node = (line, col)
    if net.params and not net.nodes:
        line, col = doc.locations["network.param"]
        raise ConfigError("param entries need node entries using them", line, col, "param")
    if net.nodes:
        used = {s for _, _, ins in net.nodes for s in ins}
        for name, line in declared_params.items():
            if name not in used:
                raise ConfigError(f"parameter {name!r} is never used", line, 1, "param")
        if not net.output:
            net.output = net.nodes[-1][0]
            doc.locations["network.output"] = last_node
        elif net.output not in declared_nodes:
            line, col = doc.locations["network.output"]
            raise ConfigError(f"output {net.output!r} is not a node", line, col, "output")
        net.hidden = []


# --------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "auto"
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v) if v else "none"
    return str(v)


def serialize(doc: ModelSpecDoc) -> str:
    """Canonical text form; ``parse(serialize(doc)) == doc``."""
    net = doc.network
    lines = ["[network]", f"input = {net.input_dim}"]
    if net.explicit:
        lines += [f"param = {name} {' '.join(map(str, dims))}" for name, dims in net.params]
        lines += [f"node = {nid} {kind} {' '.join(ins)}" for nid, kind, ins in net.nodes]
        lines.append(f"output = {net.output}")
    else:
        lines.append(f"hidden = {_fmt(net.hidden)}")
    g = doc.graph
    lines += ["", "[graph]", f"variables = {g.variables}", f"cardinality = {g.cardinality}"]
    if g.pairs:
        lines.append("pairs = " + " ".join(f"{a}-{b}" for a, b in g.pairs))
    else:
        lines.append(f"order = {g.order}")
    lines += [f"unary_counting = {g.unary_counting!r}", f"pairwise_counting = {g.pairwise_counting!r}",
              f"pairwise = {g.pairwise}", f"pair_hidden = {g.pair_hidden}"]
    lines += ["", "[train]"]
    lines += [f"{f.name} = {_fmt(getattr(doc.train, f.name))}" for f in fields(TrainConfig)]
    lines += ["", "[data]"]
    if doc.data_path:
        lines.append(f"path = {doc.data_path}")
    lines += [f"{f.name} = {_fmt(getattr(doc.data, f.name))}" for f in fields(DatasetSpec)]
    return "\n".join(lines) + "\n"


def structure_text(doc: ModelSpecDoc) -> str:
    """The [network] and [graph] part of the canonical form (what a model file depends on)."""
    text = serialize(doc)
    return text[:text.index("[train]")]


def config_hash(doc: ModelSpecDoc) -> bytes:
    return hashlib.sha256(structure_text(doc).encode()).digest()


# --------------------------------------------------------------------------
# instantiation


@dataclass
class Instance:
    model: PotentialModel
    params: ParameterStore
    graph: RegionGraph
    train: TrainConfig
    data: DatasetSpec

    @property
    def network(self) -> ComputationGraph:
        return self.model.unary


def _located(doc: ModelSpecDoc, key: str, message: str) -> ConfigError:
    line, col = doc.locations.get(key, (None, None))
    return ConfigError(f"{key}: {message}", line, col, key)


def build_region_graph_from(doc: ModelSpecDoc) -> RegionGraph:
    g = doc.graph
    try:
        if g.pairs:
            graph = build_region_graph([g.cardinality] * g.variables, g.pairs, g.unary_counting, g.pairwise_counting)
        else:
            graph = build_chain_model(g.variables, g.cardinality, g.order, g.unary_counting, g.pairwise_counting)
    except RegionGraphError as exc:
        key = "graph.order" if "order" in str(exc) else "graph.variables"
        raise _located(doc, key, str(exc)) from None
    problems = validate(graph, doc.train.epsilon)
    if problems:
        key = "graph.unary_counting" if "negative weighted entropy" in problems[0] else "graph.pairs"
        if "negative weighted entropy" in problems[0] and g.pairwise_counting * doc.train.epsilon < 0:
            key = "graph.pairwise_counting"
        raise _located(doc, key, problems[0])
    return graph


def _explicit_network(doc: ModelSpecDoc, params: ParameterStore, rng: np.random.Generator) -> ComputationGraph:
    spec = doc.network
    net = ComputationGraph()
    net.input("x", spec.input_dim)
    for name, dims in spec.params:
        net.parameter(name, dims)
        if len(dims) == 2:
            params.init_uniform(name, dims, dims[1], dims[0], rng)
        else:
            params[name] = np.zeros(dims)
    for nid, kind, ins in spec.nodes:
        try:
            if kind == "affine":
                net.affine(nid, *ins)
            elif kind == "concat":
                net.concat(nid, *ins)
            else:
                getattr(net, kind)(nid, *ins)
        except GraphError as exc:
            raise _located(doc, "network.node", f"node {nid!r}: {exc}") from None
    net.mark_output(spec.output)
    return net


def instantiate(doc: ModelSpecDoc, seed: int | None = None) -> Instance:
    """Build and validate every object the doc describes; parameters are freshly initialised."""
    graph = build_region_graph_from(doc)
    seed = doc.train.seed if seed is None else seed
    rng = np.random.default_rng([seed, 3])
    params = ParameterStore()
    K = doc.graph.cardinality
    if doc.network.explicit:
        net = _explicit_network(doc, params, rng)
    else:
        net = ComputationGraph()
        net.input("x", doc.network.input_dim)
        net.mark_output(mlp(net, params, "x", list(doc.network.hidden) + [K], "unary_", rng))
    width = net.nodes[net.outputs[0]].output_shape[-1]
    if width != K:
        raise _located(doc, "network.output" if doc.network.explicit else "network.hidden",
                       f"unary output width {width} != cardinality {K}")
    if doc.data.image_size ** 2 != doc.network.input_dim and not doc.data_path:
        raise _located(doc, "network.input",
                       f"input {doc.network.input_dim} != image_size^2 = {doc.data.image_size ** 2}")
    pairwise = {}
    for cls in graph.edge_classes():
        if doc.graph.pairwise == "linear":
            pairwise[cls] = linear_pairwise(cls, (K, K), params, rng)
        else:
            pairwise[cls] = mlp_pairwise(cls, (K, K), doc.graph.pair_hidden, params, rng)
    return Instance(PotentialModel(net, pairwise), params, graph, doc.train, doc.data)


def load(path) -> ModelSpecDoc:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())
