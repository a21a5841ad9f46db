"""Static computation graph with reverse-mode gradients and tangent propagation.

A :class:`Graph` is an append-only list of nodes, so insertion order is
always a valid topological order. Values live outside the graph: the same
graph is evaluated many times with different parameter values, which is how
the training loop uses it.

:meth:`Graph.tangent` differentiates outputs with respect to an *input*
node along a fixed direction by appending new primitive nodes. The result is
an ordinary graph again, so :func:`backward` differentiates through it and
``tangent`` can be applied to its own output for second derivatives.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ValueTable",
    "GraphError",
    "ShapeError",
    "CycleError",
    "DivergenceError",
    "GradCheckReport",
    "build",
    "forward",
    "backward",
    "finite_diff_check",
]


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError):
    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class CycleError(GraphError):
    pass


class DivergenceError(GraphError):
    """Raised when a node evaluates to a non-finite value."""

    def __init__(self, node: int, op: str):
        super().__init__(f"non-finite value at node {node} ({op})")
        self.node = node
        self.op = op


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: tuple = ()
    name: str | None = None


_LEAF_OPS = ("const", "param", "input")
_BINARY_OPS = ("add", "sub", "mul", "matmul")
_UNARY_OPS = ("tanh", "poly", "sin", "cos", "exp", "square", "scale", "mean", "sum", "col")


def _broadcast_shape(sa, sb, node=None):
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) == 1 and len(sb) == 2 and sb[1] == sa[0]:
        return sb
    if len(sb) == 1 and len(sa) == 2 and sa[1] == sb[0]:
        return sa
    raise ShapeError(f"node {node}: incompatible shapes {sa} and {sb}", node)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # row vector broadcast over the batch axis
    return g.sum(axis=0)


def _poly_eval(coeffs, x):
    out = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        out = out * x + c
    return out


def _poly_deriv(coeffs):
    d = tuple(float(i * c) for i, c in enumerate(coeffs) if i > 0)
    return d if d else (0.0,)


class Graph:
    """Append-only computation graph.

    Builder methods return integer node ids. Structurally identical
    non-leaf nodes are shared (hash-consing), so repeated tangent passes
    do not duplicate work.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consts: dict[int, np.ndarray] = {}
        self.names: dict[str, int] = {}
        self._memo: dict[tuple, int] = {}
        self._tangents: dict[tuple, int | None] = {}
        self._varies: list[bool] = []
        self._ancestors_cache: dict[tuple, list[int]] = {}

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i: int) -> Node:
        return self.nodes[i]

    # -- leaves -----------------------------------------------------------

    def _append(self, node: Node, varies: bool) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise CycleError(
                    f"node {len(self.nodes)} ({node.op}) references node {i} "
                    "which does not precede it"
                )
        self.nodes.append(node)
        self._varies.append(varies)
        self._ancestors_cache.clear()
        return len(self.nodes) - 1

    def _leaf(self, op: str, name: str, shape) -> int:
        if name in self.names:
            raise GraphError(f"duplicate node name {name!r}")
        nid = self._append(Node(op, (), tuple(int(s) for s in shape), (), name), True)
        self.names[name] = nid
        return nid

    def input(self, name: str, shape) -> int:
        return self._leaf("input", name, shape)

    def parameter(self, name: str, shape) -> int:
        return self._leaf("param", name, shape)

    def constant(self, value) -> int:
        value = np.array(value, dtype=np.float64)
        nid = self._append(Node("const", (), value.shape), False)
        self.consts[nid] = value
        return nid

    # -- operations -------------------------------------------------------

    def _op(self, op: str, inputs: tuple[int, ...], attrs: tuple = ()) -> int:
        key = (op, inputs, attrs)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise CycleError(f"node {nid} ({op}) references node {i} which does not precede it")
        shapes = [self.nodes[i].shape for i in inputs]
        if op in ("add", "sub", "mul"):
            shape = _broadcast_shape(shapes[0], shapes[1], nid)
        elif op == "matmul":
            a, b = shapes
            if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
                raise ShapeError(f"node {nid}: matmul of {a} and {b}", nid)
            shape = (a[0], b[1])
        elif op in ("mean", "sum"):
            shape = ()
        elif op == "col":
            a = shapes[0]
            if len(a) != 2 or not 0 <= attrs[0] < a[1]:
                raise ShapeError(f"node {nid}: column {attrs[0]} of shape {a}", nid)
            shape = (a[0], 1)
        else:
            shape = shapes[0]
        varies = any(self._varies[i] for i in inputs)
        nid = self._append(Node(op, inputs, shape, attrs), varies)
        self._memo[key] = nid
        return nid

    def add(self, a: int, b: int) -> int:
        return self._op("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._op("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._op("mul", (a, b))

    def matmul(self, a: int, b: int) -> int:
        return self._op("matmul", (a, b))

    def tanh(self, a: int) -> int:
        return self._op("tanh", (a,))

    def poly(self, a: int, coeffs: Sequence[float]) -> int:
        """Elementwise polynomial ``sum(coeffs[i] * a**i)``."""
        return self._op("poly", (a,), tuple(float(c) for c in coeffs))

    def sin(self, a: int) -> int:
        return self._op("sin", (a,))

    def cos(self, a: int) -> int:
        return self._op("cos", (a,))

    def exp(self, a: int) -> int:
        return self._op("exp", (a,))

    def square(self, a: int) -> int:
        return self._op("square", (a,))

    def scale(self, a: int, c: float) -> int:
        c = float(c)
        if c == 1.0:
            return a
        return self._op("scale", (a,), (c,))

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    def mean(self, a: int) -> int:
        return self._op("mean", (a,))

    def sum(self, a: int) -> int:
        return self._op("sum", (a,))

    def col(self, a: int, j: int) -> int:
        return self._op("col", (a,), (int(j),))

    def tanhshrink(self, a: int) -> int:
        return self.sub(a, self.tanh(a))

    def activation(self, a: int, kind: str) -> int:
        if kind == "tanhshrink":
            return self.tanhshrink(a)
        if kind == "tanh":
            return self.tanh(a)
        if kind == "sin":
            return self.sin(a)
        raise GraphError(f"unknown activation {kind!r}")

    # -- tangent propagation ---------------------------------------------

    def ancestors(self, outputs: Iterable[int]) -> list[int]:
        """Ids of all nodes the outputs depend on, in topological order."""
        outputs = tuple(outputs)
        cached = self._ancestors_cache.get(outputs)
        if cached is not None:
            return cached
        seen = np.zeros(len(self.nodes), dtype=bool)
        stack = list(outputs)
        while stack:
            n = stack.pop()
            if seen[n]:
                continue
            seen[n] = True
            stack.extend(self.nodes[n].inputs)
        order = [int(i) for i in np.flatnonzero(seen)]
        self._ancestors_cache[outputs] = order
        return order

    def tangent(self, wrt: int, direction, outputs: Sequence[int] | int):
        """Append nodes computing directional derivatives of ``outputs``.

        ``wrt`` must be an input node; ``direction`` has one entry per
        column of that input (one entry for a scalar input). Returns a node
        id (or list of ids) carrying the derivative of each output.
        """
        single = isinstance(outputs, (int, np.integer))
        outs = [int(outputs)] if single else [int(o) for o in outputs]
        node = self.nodes[wrt]
        if node.op != "input":
            raise GraphError(f"tangent target {wrt} is not an input node")
        direction = np.asarray(direction, dtype=np.float64).ravel()
        width = node.shape[-1] if node.shape else 1
        if direction.size != width:
            raise ShapeError(
                f"direction has {direction.size} entries, input {node.name!r} has {width}", wrt
            )
        dkey = (wrt, tuple(direction.tolist()))
        for n in self.ancestors(outs):
            if (n, dkey) not in self._tangents:
                self._tangents[(n, dkey)] = self._tangent_rule(n, wrt, direction, dkey)
        result = []
        for o in outs:
            t = self._tangents[(o, dkey)]
            if t is None:
                t = self.constant(np.zeros(self.nodes[o].shape))
            result.append(t)
        return result[0] if single else result

    def _expand(self, t: int | None, shape) -> int | None:
        if t is None or self.nodes[t].shape == shape:
            return t
        return self.add(self.constant(np.zeros(shape)), t)

    def _tangent_rule(self, n, wrt, direction, dkey):
        node = self.nodes[n]
        op = node.op
        if op == "input":
            if n != wrt:
                return None
            return self.constant(np.broadcast_to(direction, node.shape) if node.shape else direction[0])
        if op in ("const", "param") or not self._varies[n]:
            return None
        ts = [self._tangents[(i, dkey)] for i in node.inputs]
        if all(t is None for t in ts):
            return None
        a = node.inputs[0]
        ta = ts[0]
        if op in ("add", "sub"):
            tb = ts[1]
            if tb is None:
                return self._expand(ta, node.shape)
            if ta is None:
                tb = self._expand(tb, node.shape)
                return tb if op == "add" else self.neg(tb)
            return self._op(op, (ta, tb))
        if op == "mul":
            b = node.inputs[1]
            tb = ts[1]
            terms = []
            if ta is not None:
                terms.append(self.mul(ta, b))
            if tb is not None:
                terms.append(self.mul(a, tb))
            out = terms[0] if len(terms) == 1 else self.add(terms[0], terms[1])
            return self._expand(out, node.shape)
        if op == "matmul":
            b = node.inputs[1]
            tb = ts[1]
            terms = []
            if ta is not None:
                terms.append(self.matmul(ta, b))
            if tb is not None:
                terms.append(self.matmul(a, tb))
            return terms[0] if len(terms) == 1 else self.add(terms[0], terms[1])
        if op == "tanh":
            return self.mul(self.poly(n, (1.0, 0.0, -1.0)), ta)
        if op == "poly":
            return self.mul(self.poly(a, _poly_deriv(node.attrs)), ta)
        if op == "sin":
            return self.mul(self.cos(a), ta)
        if op == "cos":
            return self.neg(self.mul(self.sin(a), ta))
        if op == "exp":
            return self.mul(n, ta)
        if op == "square":
            return self.scale(self.mul(a, ta), 2.0)
        if op == "scale":
            return self.scale(ta, node.attrs[0])
        if op == "mean":
            return self.mean(ta)
        if op == "sum":
            return self.sum(ta)
        if op == "col":
            return self.col(ta, node.attrs[0])
        raise GraphError(f"no tangent rule for {op}")


def build(specs: Sequence[tuple]) -> Graph:
    """Build a graph from a list of op specs.

    Each spec is ``(op, *args)`` where node references are integer
    positions in the list, e.g.::

        build([("input", "x", (2, 3)), ("param", "w", (3, 1)), ("matmul", 0, 1)])
    """
    g = Graph()
    for k, spec in enumerate(specs):
        op, *args = spec
        if op in ("input", "param"):
            nid = (g.input if op == "input" else g.parameter)(args[0], args[1])
        elif op == "const":
            nid = g.constant(args[0])
        else:
            refs = [a for a in args if isinstance(a, (int, np.integer)) and not isinstance(a, bool)]
            for r in refs:
                if r >= k:
                    raise CycleError(f"spec {k} ({op}) references spec {r} which does not precede it")
            method = getattr(g, op, None)
            if method is None or op.startswith("_"):
                raise GraphError(f"unknown op {op!r} in spec {k}")
            nid = method(*args)
        if nid != k:
            # hash-consing merged this spec with an earlier node
            raise GraphError(f"spec {k} duplicates node {nid}")
    return g


class ValueTable:
    """Node values from one forward evaluation."""

    def __init__(self, graph: Graph, values: list):
        self.graph = graph
        self.values = values

    def __getitem__(self, nid: int) -> np.ndarray:
        v = self.values[nid]
        if v is None:
            raise GraphError(f"node {nid} was not evaluated")
        return v

    def __contains__(self, nid: int) -> bool:
        return nid < len(self.values) and self.values[nid] is not None

    def __len__(self):
        return sum(v is not None for v in self.values)


def _resolve_feed(g: Graph, feed: Mapping) -> dict[int, np.ndarray]:
    out = {}
    for key, val in feed.items():
        nid = g.names[key] if isinstance(key, str) else int(key)
        node = g.nodes[nid]
        if node.op not in ("input", "param"):
            raise GraphError(f"node {nid} ({node.op}) cannot be fed")
        arr = np.asarray(val, dtype=np.float64)
        if arr.shape != node.shape:
            raise ShapeError(f"feed for {node.name!r}: shape {arr.shape}, expected {node.shape}", nid)
        out[nid] = arr
    return out


def forward(g: Graph, feed: Mapping, outputs: Sequence[int] | None = None,
            check_finite: bool = True) -> ValueTable:
    """Evaluate the graph.

    ``feed`` maps input/parameter names or ids to arrays. Only ancestors of
    ``outputs`` are evaluated (all nodes when omitted). The first non-finite
    node value raises :class:`DivergenceError`.
    """
    fed = _resolve_feed(g, feed)
    order = range(len(g.nodes)) if outputs is None else g.ancestors(outputs)
    vals: list = [None] * len(g.nodes)
    nodes = g.nodes
    # overflow is reported as DivergenceError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for n in order:
            node = nodes[n]
            op = node.op
            if op == "const":
                vals[n] = g.consts[n]
                continue
            if op in ("input", "param"):
                if n not in fed:
                    raise GraphError(f"no value supplied for {op} {node.name!r}")
                vals[n] = fed[n]
                continue
            a = vals[node.inputs[0]]
            if op == "add":
                v = a + vals[node.inputs[1]]
            elif op == "sub":
                v = a - vals[node.inputs[1]]
            elif op == "mul":
                v = a * vals[node.inputs[1]]
            elif op == "matmul":
                v = a @ vals[node.inputs[1]]
            elif op == "tanh":
                v = np.tanh(a)
            elif op == "poly":
                v = _poly_eval(node.attrs, a)
            elif op == "sin":
                v = np.sin(a)
            elif op == "cos":
                v = np.cos(a)
            elif op == "exp":
                v = np.exp(a)
            elif op == "square":
                v = a * a
            elif op == "scale":
                v = a * node.attrs[0]
            elif op == "mean":
                v = np.asarray(a.mean())
            elif op == "sum":
                v = np.asarray(a.sum())
            elif op == "col":
                j = node.attrs[0]
                v = a[:, j:j + 1]
            else:
                raise GraphError(f"unknown op {op}")
            if check_finite and not np.isfinite(v).all():
                raise DivergenceError(n, op)
            vals[n] = v
    return ValueTable(g, vals)


def backward(g: Graph, values: ValueTable, seed: int) -> dict[int, np.ndarray]:
    """Reverse-mode gradient of scalar node ``seed``.

    Returns a table keyed by node id for every parameter and input node.
    Entries are zero arrays when ``seed`` does not depend on the node.
    """
    if g.nodes[seed].shape != ():
        raise GraphError(f"seed node {seed} is not scalar (shape {g.nodes[seed].shape})")
    if seed not in values:
        raise GraphError("forward() has not evaluated the seed node")
    vals = values.values
    varies = g._varies
    adj: list = [None] * len(g.nodes)
    adj[seed] = np.asarray(1.0)
    order = g.ancestors((seed,))

    def acc(i, v):
        if not varies[i]:
            return
        cur = adj[i]
        adj[i] = v if cur is None else cur + v

    for n in reversed(order):
        gbar = adj[n]
        if gbar is None:
            continue
        node = g.nodes[n]
        op = node.op
        if op in _LEAF_OPS:
            continue
        ins = node.inputs
        a = ins[0]
        if op == "add":
            acc(a, _unbroadcast(gbar, g.nodes[a].shape))
            acc(ins[1], _unbroadcast(gbar, g.nodes[ins[1]].shape))
        elif op == "sub":
            acc(a, _unbroadcast(gbar, g.nodes[a].shape))
            if varies[ins[1]]:
                acc(ins[1], _unbroadcast(-gbar, g.nodes[ins[1]].shape))
        elif op == "mul":
            b = ins[1]
            if varies[a]:
                acc(a, _unbroadcast(gbar * vals[b], g.nodes[a].shape))
            if varies[b]:
                acc(b, _unbroadcast(gbar * vals[a], g.nodes[b].shape))
        elif op == "matmul":
            b = ins[1]
            if varies[a]:
                acc(a, gbar @ vals[b].T)
            if varies[b]:
                acc(b, vals[a].T @ gbar)
        elif op == "tanh":
            y = vals[n]
            acc(a, gbar * (1.0 - y * y))
        elif op == "poly":
            acc(a, gbar * _poly_eval(_poly_deriv(node.attrs), vals[a]))
        elif op == "sin":
            acc(a, gbar * np.cos(vals[a]))
        elif op == "cos":
            acc(a, -gbar * np.sin(vals[a]))
        elif op == "exp":
            acc(a, gbar * vals[n])
        elif op == "square":
            acc(a, 2.0 * gbar * vals[a])
        elif op == "scale":
            acc(a, gbar * node.attrs[0])
        elif op == "sum":
            acc(a, np.full(g.nodes[a].shape, float(gbar)))
        elif op == "mean":
            shape = g.nodes[a].shape
            acc(a, np.full(shape, float(gbar) / max(int(np.prod(shape)), 1)))
        elif op == "col":
            full = np.zeros(g.nodes[a].shape)
            j = node.attrs[0]
            full[:, j:j + 1] = gbar
            acc(a, full)
        else:
            raise GraphError(f"no adjoint rule for {op}")

    grads = {}
    for n, node in enumerate(g.nodes):
        if node.op in ("param", "input"):
            grads[n] = adj[n] if adj[n] is not None else np.zeros(node.shape)
    return grads


@dataclass
class GradCheckReport:
    max_deviation: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol


def finite_diff_check(g: Graph, feed: Mapping, loss: int, tol: float = 1e-5,
                      step: float = 1e-4, max_entries: int | None = None,
                      rng: np.random.Generator | None = None,
                      grads: Mapping[int, np.ndarray] | None = None) -> GradCheckReport:
    """Compare :func:`backward` against extrapolated central differences for every parameter.

    Deviation per parameter is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over the checked entries (infinity norms, floored at 1e-8).
    ``grads`` substitutes a precomputed gradient table (used for fault injection).
    """
    fed = _resolve_feed(g, feed)
    if grads is None:
        grads = backward(g, forward(g, fed, [loss]), loss)
    report = GradCheckReport(0.0, tol)
    rng = rng or np.random.default_rng(0)
    for n, node in enumerate(g.nodes):
        if node.op != "param":
            continue
        base = fed[n]
        size = base.size
        idx = np.arange(size)
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        analytic = np.asarray(grads[n]).ravel()[idx]
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            def central(h):
                vals = []
                for sgn in (1.0, -1.0):
                    pert = base.copy().ravel()
                    pert[i] += sgn * h
                    trial = dict(fed)
                    trial[n] = pert.reshape(base.shape)
                    vals.append(float(forward(g, trial, [loss])[loss]))
                return (vals[0] - vals[1]) / (2.0 * h)
            # Richardson extrapolation cancels the O(h^2) term
            numeric[k] = (4.0 * central(0.5 * step) - central(step)) / 3.0
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        dev = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
        report.per_param[node.name] = dev
        report.max_deviation = max(report.max_deviation, dev)
    return report
