"""Finite-difference audit of every graph primitive and of random full PINN losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as nw
from . import physics as ph
from .diffgraph import Graph, finite_diff_check
from .training import CollocationSet, LossWeights, ObservationSet, PinnProblem

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    deviation: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tol


def _loss(g: Graph, y: int) -> int:
    # sum of squares keeps every entry of y in play
    return g.sum(g.square(y))


def _op_cases():
    """``(name, builder)`` pairs; a builder returns ``(graph, loss, param shapes)``."""

    def unary(op, shape=(4, 3), **kw):
        def build():
            g = Graph()
            a = g.parameter("a", shape)
            fn = getattr(g, op)
            y = fn(a, **kw) if kw else fn(a)
            return g, _loss(g, y), {"a": shape}
        return build

    def binary(op, sa, sb):
        def build():
            g = Graph()
            a, b = g.parameter("a", sa), g.parameter("b", sb)
            return g, _loss(g, getattr(g, op)(a, b)), {"a": sa, "b": sb}
        return build

    def reduce(op):
        def build():
            g = Graph()
            a = g.parameter("a", (5, 2))
            return g, g.square(getattr(g, op)(g.sin(a))), {"a": (5, 2)}
        return build

    def tangent(order):
        def build():
            g = Graph()
            x = g.input("x", (5, 3))
            w1, b1 = g.parameter("w1", (3, 6)), g.parameter("b1", (6,))
            w2 = g.parameter("w2", (6, 1))
            out = g.matmul(g.tanhshrink(g.add(g.matmul(x, w1), b1)), w2)
            (t,) = g.tangent(x, (1.0, 0.0, 0.0), [out])
            if order == 2:
                (t,) = g.tangent(x, (1.0, 0.0, 0.0), [t])
            return g, _loss(g, t), {"w1": (3, 6), "b1": (6,), "w2": (6, 1)}
        return build

    cases = [
        ("add", binary("add", (4, 3), (4, 3))),
        ("add row-broadcast", binary("add", (4, 3), (3,))),
        ("sub", binary("sub", (4, 3), (4, 3))),
        ("sub scalar", binary("sub", (4, 3), ())),
        ("mul", binary("mul", (4, 3), (4, 3))),
        ("mul scalar", binary("mul", (), (4, 3))),
        ("matmul", binary("matmul", (4, 3), (3, 2))),
        ("tanh", unary("tanh")),
        ("poly", unary("poly", coeffs=(0.5, -1.0, 0.25, 2.0))),
        ("sin", unary("sin")),
        ("cos", unary("cos")),
        ("exp", unary("exp")),
        ("square", unary("square")),
        ("scale", unary("scale", c=-2.5)),
        ("tanhshrink", unary("tanhshrink")),
        ("col", unary("col", j=1)),
        ("mean", reduce("mean")),
        ("sum", reduce("sum")),
        ("tangent", tangent(1)),
        ("nested tangent", tangent(2)),
    ]
    return cases


def check_ops(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build in _op_cases():
        g, loss, shapes = build()
        feed = {k: rng.uniform(-1.0, 1.0, s) for k, s in shapes.items()}
        for nid, node in enumerate(g.nodes):
            if node.op == "input":
                feed[nid] = rng.uniform(-1.0, 1.0, node.shape)
        rep = finite_diff_check(g, feed, loss, tol=tol)
        results.append(CheckResult(f"op {name}", rep.max_deviation, tol))
    return results


def random_problem(rng: np.random.Generator) -> tuple[PinnProblem, np.ndarray]:
    """A small full PINN loss (PDE, data, boundary and, for FO heads, compatibility terms)."""
    spec = nw.ArchitectureSpec(
        hidden_width=int(rng.integers(3, 9)), depth=int(rng.integers(1, 4)),
        block_kind=str(rng.choice(["plain", "resnet"])), activation=str(rng.choice(["tanhshrink", "tanh"])),
        sin_input_layer=bool(rng.integers(2)), output_heads=str(rng.choice(["c_only", "fo_pinn"])))
    wind = ph.ConstantWind(*rng.uniform(-1, 1, 2)) if rng.integers(2) else ph.RotatingWind()
    n_src = int(rng.integers(1, 3))
    src = ph.SourceModel(rng.uniform(0.2, 0.8, (n_src, 2)), rng.uniform(0.5, 2.0, n_src), 0.25,
                         trainable=("x", "y", "amplitude"))
    sc = ph.Scenario("check", (0.0, 1.0, 0.0, 1.0), (0.0, 1.0), float(rng.uniform(0.01, 0.5)), wind, src,
                     nondimensional=True)
    pts = lambda n: rng.uniform(0.0, 1.0, (n, 3))
    colloc = CollocationSet(pts(6), pts(4), rng.uniform(-0.1, 0.1, 4), 0, 4, 0)
    obs = ObservationSet(pts(5), rng.uniform(0.0, 1.0, 5))
    fo = 1.0 if spec.output_heads == "fo_pinn" else 0.0
    prob = PinnProblem(spec, sc, colloc, LossWeights(1.0, 3.0, 2.0, fo), src, obs)
    net = nw.init(spec, int(rng.integers(1 << 31)))
    # unit-scale sin weights keep the finite differences well conditioned
    if spec.sin_input_layer:
        net.params["sin.W"] = net.params["sin.W"] * 0.2
    return prob, prob.pack(net, src)


def check_networks(n: int = 20, seed: int = 0, tol: float = TOLERANCE,
                   max_entries: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n):
        prob, theta = random_problem(rng)
        rep = finite_diff_check(prob.graph, prob.feed(theta), prob.total_node, tol=tol,
                                max_entries=max_entries, rng=rng)
        s = prob.spec
        label = f"net {i:02d} {s.block_kind}/{s.activation}/{'sin' if s.sin_input_layer else 'lin'}/{s.output_heads}"
        results.append(CheckResult(label, rep.max_deviation, tol))
    return results


def run(seed: int = 0, n_networks: int = 20, tol: float = TOLERANCE) -> list[CheckResult]:
    return check_ops(seed, tol) + check_networks(n_networks, seed, tol)


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{r.name:<48} {r.deviation:.2e}  {'ok' if r.passed else 'FAIL'}" for r in results]
    worst = max((r.deviation for r in results), default=0.0)
    n_bad = sum(not r.passed for r in results)
    lines.append(f"max deviation {worst:.2e} (tolerance {results[0].tol if results else TOLERANCE:g}); "
                 f"{n_bad} failure(s)")
    return "\n".join(lines)
