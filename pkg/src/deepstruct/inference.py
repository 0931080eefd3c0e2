"""Convex message passing on region graphs.

All quantities are batched: tables and messages carry a leading sample axis,
and every sample's problem is independent.  Updates are block-coordinate
descent steps on the dual

    sum_r eps*c_r * log sum_{y_r} exp(fhat_r(y_r) / (eps*c_r))

where ``fhat_r = f_r + sum_{c in C(r)} lam_{c->r} - sum_{p in P(r)} lam_{r->p}``.
A term with ``eps*c_r == 0`` is the max of ``fhat_r``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .region_graph import PotentialTables, RegionGraph

TIE_TOL = 1e-12
ORACLE_LIMIT = 10**7
# exp-space matmul route for parentless pair regions whose table is shared by the whole batch
FAST_PAIRS = True
_UNDERFLOW = 1e-250


@dataclass
class MessageSet:
    epsilon: float
    lam: dict[tuple[int, int], np.ndarray]
    mu: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, graph: RegionGraph, batch_size: int = 1, epsilon: float = 1.0) -> MessageSet:
        if epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        lam = {}
        for reg in graph.regions:
            for p in reg.parents:
                lam[(reg.id, p)] = np.zeros((batch_size,) + graph.shape(reg.id))
        return cls(float(epsilon), lam)

    def copy(self) -> MessageSet:
        return MessageSet(self.epsilon, {k: v.copy() for k, v in self.lam.items()})


@dataclass
class _EdgeLayout:
    expand: tuple[int, ...]      # reshape of a child vector for broadcasting into the parent table
    reduce: tuple[int, ...]      # parent-table axes (batch axis included as 0) summed out for the child


def _layout(graph: RegionGraph) -> dict[tuple[int, int], _EdgeLayout]:
    cached = graph.__dict__.get("_edge_layout")
    if cached is not None:
        return cached
    out = {}
    for reg in graph.regions:
        for p in reg.parents:
            pscope = graph.regions[p].scope
            expand = tuple(graph.space.cardinalities[v] if v in reg.scope else 1 for v in pscope)
            reduce = tuple(1 + k for k, v in enumerate(pscope) if v not in reg.scope)
            out[(reg.id, p)] = _EdgeLayout(expand, reduce)
    graph.__dict__["_edge_layout"] = out
    return out


def soft_max(a: np.ndarray, axes: tuple[int, ...], temp: float) -> np.ndarray:
    """``temp * logsumexp(a / temp)`` over ``axes``; the plain max when ``temp == 0``."""
    if not axes:
        return a
    m = a.max(axis=axes, keepdims=True)
    if temp == 0.0:
        return np.squeeze(m, axis=axes)
    s = np.exp((a - m) / temp).sum(axis=axes)
    return temp * np.log(s) + np.squeeze(m, axis=axes)


def _child_in_parent(graph: RegionGraph, messages: MessageSet, c: int, p: int) -> np.ndarray:
    v = messages.lam[(c, p)]
    return v.reshape((v.shape[0],) + _layout(graph)[(c, p)].expand)


def reparameterized(graph: RegionGraph, tables: PotentialTables, messages: MessageSet, r: int,
                    exclude_child: int | None = None) -> np.ndarray:
    """fhat_r, optionally leaving out the multiplier coming from one child."""
    reg = graph.regions[r]
    out = tables.values[r]
    for c in reg.children:
        if c != exclude_child:
            out = out + _child_in_parent(graph, messages, c, r)
    for p in reg.parents:
        out = out - messages.lam[(r, p)]
    return np.broadcast_to(out, (tables.batch_size,) + graph.shape(r))


def _shared_pair(graph: RegionGraph, tables: PotentialTables, p: int, temp: float) -> np.ndarray | None:
    """The (K_i, K_j) table of pair region ``p`` when the matmul route applies, else None."""
    if not FAST_PAIRS or temp <= 0.0:
        return None
    reg = graph.regions[p]
    if len(reg.scope) != 2 or reg.parents:
        return None
    v = tables.values[p]
    if v.shape[0] > 1 and v.strides[0] != 0:
        return None
    if any(len(graph.regions[c].scope) != 1 for c in reg.children):
        return None
    f = v[0]
    if (f.max() - f.min()) / temp > 500.0:
        return None
    return f


def _side_sums(graph: RegionGraph, messages: MessageSet, p: int, batch: int, exclude: int | None = None):
    """Summed child multipliers along each axis of pair region ``p``: shapes (B, K_i), (B, K_j)."""
    i, j = graph.regions[p].scope
    a = np.zeros((batch, graph.space.cardinalities[i]))
    b = np.zeros((batch, graph.space.cardinalities[j]))
    for c in graph.regions[p].children:
        if c == exclude:
            continue
        if graph.regions[c].scope == (i,):
            a = a + messages.lam[(c, p)]
        else:
            b = b + messages.lam[(c, p)]
    return a, b


def _row_reduce(f: np.ndarray, side: np.ndarray, temp: float):
    """temp * log sum_b exp((f[a, b] + side[n, b]) / temp) for all (n, a), or None on underflow.

    Also returns the pieces needed to rebuild the pair beliefs.
    """
    m = f.max(axis=1)
    e = np.exp((f - m[:, None]) / temp)
    mb = side.max(axis=1, keepdims=True)
    w = np.exp((side - mb) / temp)
    s = w @ e.T
    if not np.all(s > _UNDERFLOW):
        return None
    return temp * np.log(s) + m[None, :] + mb, (e, w, m, mb)


def _fast_mu(graph, tables, messages, r, p, temp):
    f = _shared_pair(graph, tables, p, temp)
    if f is None:
        return None
    a, b = _side_sums(graph, messages, p, tables.batch_size, exclude=r)
    if graph.regions[r].scope == (graph.regions[p].scope[1],):
        f, a, b = f.T, b, a
    red = _row_reduce(f, b, temp)
    return None if red is None else a + red[0]


def _fast_pair_term(graph, tables, messages, p, temp, with_beliefs=False):
    f = _shared_pair(graph, tables, p, temp)
    if f is None:
        return None
    a, b = _side_sums(graph, messages, p, tables.batch_size)
    red = _row_reduce(f, b, temp)
    if red is None:
        return None
    g = a + red[0]
    term = soft_max(g, (1,), temp)
    if not with_beliefs:
        return term, None
    e, w, m, mb = red[1]
    u = np.exp((a + m[None, :] + mb - term[:, None]) / temp)
    return term, (e * (u.T @ w))[None]


def compute_mu(graph: RegionGraph, tables: PotentialTables, messages: MessageSet, r: int, p: int) -> np.ndarray:
    """Soft-max marginal of parent ``p`` onto child ``r``, ignoring r's own multiplier."""
    if p not in graph.regions[r].parents:
        raise ValueError(f"region {p} is not a parent of {r}")
    temp = messages.epsilon * graph.regions[p].counting_number
    mu = _fast_mu(graph, tables, messages, r, p, temp)
    if mu is None:
        term = reparameterized(graph, tables, messages, p, exclude_child=r)
        mu = soft_max(term, _layout(graph)[(r, p)].reduce, temp)
    messages.mu[(r, p)] = mu
    return mu


def update_lambda(graph: RegionGraph, tables: PotentialTables, messages: MessageSet, r: int) -> None:
    """Closed-form block minimisation of the dual over {lam_{r->p} : p in P(r)}."""
    reg = graph.regions[r]
    if not reg.parents:
        return
    mus = {p: compute_mu(graph, tables, messages, r, p) for p in reg.parents}
    s = tables.values[r]
    for c in reg.children:
        s = s + _child_in_parent(graph, messages, c, r)
    for mu in mus.values():
        s = s + mu
    cp = [graph.regions[p].counting_number for p in reg.parents]
    denom = reg.counting_number + sum(cp)
    axes = tuple(range(1, s.ndim))
    for p, c in zip(reg.parents, cp):
        share = c / denom if denom > 0 else 1.0 / (len(reg.parents) + 1)
        lam = share * s - mus[p]
        # constant shifts cancel in the dual; centring keeps messages bounded
        messages.lam[(r, p)] = lam - lam.mean(axis=axes, keepdims=True)


def sweep(graph: RegionGraph, tables: PotentialTables, messages: MessageSet) -> None:
    for r in graph.sweep_order():
        update_lambda(graph, tables, messages, r)


def message_pass(graph: RegionGraph, tables: PotentialTables, messages: MessageSet,
                 iterations: int) -> MessageSet:
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    for _ in range(iterations):
        sweep(graph, tables, messages)
    return messages


def run_to_convergence(graph: RegionGraph, tables: PotentialTables, messages: MessageSet,
                       tol: float = 1e-10, max_sweeps: int = 1000) -> int:
    """Sweep until the dual changes by less than ``tol`` for every sample; returns sweeps done."""
    if not graph.sweep_order():
        return 0
    prev = dual_objective(graph, tables, messages)
    for k in range(1, max_sweeps + 1):
        sweep(graph, tables, messages)
        cur = dual_objective(graph, tables, messages)
        if np.max(np.abs(prev - cur)) < tol:
            return k
        prev = cur
    return max_sweeps


def dual_objective(graph: RegionGraph, tables: PotentialTables, messages: MessageSet) -> np.ndarray:
    """Per-sample dual value, shape (B,)."""
    total = np.zeros(tables.batch_size)
    for reg in graph.regions:
        temp = messages.epsilon * reg.counting_number
        fast = _fast_pair_term(graph, tables, messages, reg.id, temp)
        if fast is not None:
            total += fast[0]
            continue
        fh = reparameterized(graph, tables, messages, reg.id)
        total += soft_max(fh, tuple(range(1, fh.ndim)), temp)
    return total


def dual_and_belief_sums(graph: RegionGraph, tables: PotentialTables, messages: MessageSet):
    """Per-sample dual plus, per region, beliefs of shape (B, ...) or their batch sum (1, ...).

    Batch sums are returned for shared pair tables, where only the sum is
    needed to form the gradient.
    """
    total = np.zeros(tables.batch_size)
    beliefs = []
    for reg in graph.regions:
        temp = messages.epsilon * reg.counting_number
        fast = _fast_pair_term(graph, tables, messages, reg.id, temp, with_beliefs=True)
        if fast is not None:
            total += fast[0]
            beliefs.append(fast[1])
            continue
        fh = reparameterized(graph, tables, messages, reg.id)
        total += soft_max(fh, tuple(range(1, fh.ndim)), temp)
        beliefs.append(_normalise(fh, temp))
    return total, beliefs


def _normalise(fh: np.ndarray, temp: float) -> np.ndarray:
    axes = tuple(range(1, fh.ndim))
    m = fh.max(axis=axes, keepdims=True)
    if temp == 0.0:
        b = (fh >= m - TIE_TOL).astype(np.float64)
    else:
        b = np.exp((fh - m) / temp)
    return b / b.sum(axis=axes, keepdims=True)


def beliefs_from_messages(graph: RegionGraph, tables: PotentialTables, messages: MessageSet) -> list[np.ndarray]:
    return [_normalise(reparameterized(graph, tables, messages, reg.id),
                       messages.epsilon * reg.counting_number) for reg in graph.regions]


def variable_marginals(graph: RegionGraph, beliefs: list[np.ndarray]) -> list[np.ndarray]:
    """One (B, |Y_i|) belief per variable: its singleton region, else the first region covering it."""
    out = []
    for i in range(graph.space.N):
        single = [reg for reg in graph.regions if reg.scope == (i,)]
        reg = single[0] if single else next(reg for reg in graph.regions if i in reg.scope)
        b = beliefs[reg.id]
        k = reg.scope.index(i)
        axes = tuple(1 + a for a in range(len(reg.scope)) if a != k)
        out.append(b.sum(axis=axes) if axes else b)
    return out


def map_decode(graph: RegionGraph, tables: PotentialTables, messages: MessageSet) -> np.ndarray:
    """Per-variable argmax of the beliefs (lowest label wins ties); shape (B, N)."""
    out = []
    for i in range(graph.space.N):
        single = [reg for reg in graph.regions if reg.scope == (i,)]
        reg = single[0] if single else next(reg for reg in graph.regions if i in reg.scope)
        b = _normalise(reparameterized(graph, tables, messages, reg.id), messages.epsilon * reg.counting_number)
        k = reg.scope.index(i)
        axes = tuple(1 + a for a in range(len(reg.scope)) if a != k)
        out.append(np.argmax(b.sum(axis=axes) if axes else b, axis=1))
    return np.stack(out, axis=1)


# --------------------------------------------------------------------------
# enumeration oracles


def _blocks(graph: RegionGraph, tables: PotentialTables, block: int = 1 << 18):
    """Yield (prefix labels, scores of all completions) with scores shaped (B, *suffix cards)."""
    cards = graph.space.cardinalities
    N = len(cards)
    graph.space.configuration_count(ORACLE_LIMIT)
    m = 0
    while m < N and math.prod(cards[m:]) > block:
        m += 1
    suffix = list(range(m, N))
    B = tables.batch_size
    for prefix in itertools.product(*[range(k) for k in cards[:m]]):
        scores = np.zeros((B,) + tuple(cards[m:]))
        for scope, v in zip(tables.scopes, tables.values):
            idx = (slice(None),) + tuple(prefix[i] if i < m else slice(None) for i in scope)
            sub = v[idx]
            shape = (B,) + tuple(cards[j] if j in scope else 1 for j in suffix)
            scores = scores + sub.reshape(shape)
        yield prefix, scores


def brute_force_log_partition(graph: RegionGraph, tables: PotentialTables, epsilon: float) -> np.ndarray:
    """``eps * log sum_y exp(F(y) / eps)`` by enumeration (max_y F at eps = 0), shape (B,)."""
    acc = np.full(tables.batch_size, -np.inf)
    for _, s in _blocks(graph, tables):
        flat = s.reshape(s.shape[0], -1)
        part = soft_max(flat, (1,), epsilon)
        acc = np.maximum(acc, part) if epsilon == 0 else epsilon * np.logaddexp(acc / epsilon, part / epsilon)
    return acc


def brute_force_marginals(graph: RegionGraph, tables: PotentialTables, epsilon: float) -> list[np.ndarray]:
    logz = brute_force_log_partition(graph, tables, epsilon)
    B = tables.batch_size
    out = [np.zeros((B,) + graph.shape(reg.id)) for reg in graph.regions]
    count = np.zeros(B)
    for prefix, s in _blocks(graph, tables):
        m = len(prefix)
        shift = logz.reshape((B,) + (1,) * (s.ndim - 1))
        if epsilon == 0:
            w = (s >= shift - TIE_TOL).astype(np.float64)
            count += w.reshape(B, -1).sum(axis=1)
        else:
            w = np.exp((s - shift) / epsilon)
        for reg in graph.regions:
            keep = [j for j in reg.scope if j >= m]
            axes = tuple(1 + (j - m) for j in range(m, graph.space.N) if j not in reg.scope)
            part = w.sum(axis=axes) if axes else w
            idx = (slice(None),) + tuple(prefix[j] if j < m else slice(None) for j in reg.scope)
            out[reg.id][idx] += part.reshape((B,) + tuple(graph.space.cardinalities[j] for j in keep))
    if epsilon == 0:
        out = [o / count.reshape((B,) + (1,) * (o.ndim - 1)) for o in out]
    return out


def brute_force_map(graph: RegionGraph, tables: PotentialTables) -> np.ndarray:
    """Exact argmax configuration per sample (first in lexicographic order on ties), shape (B, N)."""
    B = tables.batch_size
    best = np.full(B, -np.inf)
    arg = np.zeros((B, graph.space.N), dtype=np.intp)
    for prefix, s in _blocks(graph, tables):
        flat = s.reshape(B, -1)
        k = flat.argmax(axis=1)
        val = flat[np.arange(B), k]
        better = val > best
        if np.any(better):
            rest = np.stack(np.unravel_index(k, s.shape[1:]), axis=1) if s.ndim > 1 else np.zeros((B, 0), np.intp)
            full = np.concatenate([np.broadcast_to(np.array(prefix, dtype=np.intp), (B, len(prefix))), rest], axis=1)
            arg[better] = full[better]
            best = np.where(better, val, best)
    return arg
