"""PINN architectures on top of :mod:`plumepinn.diffgraph`.

Layout of every network::

    input (N, 3)  ->  first layer (3 -> width)  ->  depth x block  ->  head (width -> 1 | 4)

The first layer is either ``sin(2*pi*(X W + b))`` or ``act(X W + b)``.
A plain block is ``act(h W + b)``; a resnet block is ``h + act(h W + b)``.
The ``fo_pinn`` head emits ``(c, g_x, g_y, g_t)`` from one shared trunk.

Checkpoint files are ``.npz`` archives holding, in this order:

``format``        string, currently ``"plumepinn-net-1"``
``spec``          JSON of :class:`ArchitectureSpec`
``seed``          int64 scalar
``names``         parameter names in canonical order
``flat``          float64 vector, parameters concatenated in ``names`` order
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffgraph import Graph, GraphError, ShapeError, forward

CHECKPOINT_FORMAT = "plumepinn-net-1"
TWO_PI = 2.0 * math.pi


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int = 3
    hidden_width: int = 64
    depth: int = 4
    block_kind: str = "resnet"
    activation: str = "tanhshrink"
    sin_input_layer: bool = False
    output_heads: str = "c_only"
    sin_features: int | None = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise ArchitectureError("input_dim must be >= 1")
        if self.hidden_width < 1:
            raise ArchitectureError("hidden_width must be >= 1")
        if self.depth < 1:
            raise ArchitectureError("depth must be >= 1")
        if self.block_kind not in ("plain", "resnet"):
            raise ArchitectureError(f"unknown block_kind {self.block_kind!r}")
        if self.activation not in ("tanhshrink", "tanh"):
            raise ArchitectureError(f"unknown activation {self.activation!r}")
        if self.output_heads not in ("c_only", "fo_pinn"):
            raise ArchitectureError(f"unknown output_heads {self.output_heads!r}")
        if self.sin_features is not None and self.sin_features < 1:
            raise ArchitectureError("sin_features must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 4 if self.output_heads == "fo_pinn" else 1

    @property
    def first_width(self) -> int:
        if self.sin_input_layer and self.sin_features is not None:
            return self.sin_features
        return self.hidden_width

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical (name, shape) list."""
        w, f = self.hidden_width, self.first_width
        first = "sin" if self.sin_input_layer else "in"
        shapes = [(f"{first}.W", (self.input_dim, f)), (f"{first}.b", (f,))]
        prev = f
        for k in range(self.depth):
            shapes += [(f"block{k}.W", (prev, w)), (f"block{k}.b", (w,))]
            prev = w
        shapes += [("head.W", (w, self.n_outputs)), ("head.b", (self.n_outputs,))]
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.parameter_shapes())


@dataclass
class NetworkState:
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    seed: int

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.spec.parameter_shapes()])

    def with_flat(self, flat: np.ndarray) -> "NetworkState":
        flat = np.asarray(flat)
        expected = self.spec.parameter_count()
        if flat.shape != (expected,):
            raise ArchitectureError(f"flat vector has shape {flat.shape}, expected ({expected},)")
        params, off = {}, 0
        for name, shape in self.spec.parameter_shapes():
            size = int(np.prod(shape))
            params[name] = np.array(flat[off:off + size], dtype=np.float64).reshape(shape)
            off += size
        return NetworkState(self.spec, params, self.seed)

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)


def init(spec: ArchitectureSpec, seed: int) -> NetworkState:
    """Glorot-uniform weights, zero biases; sin-layer weights standard normal."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.parameter_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "sin.W":
            params[name] = rng.standard_normal(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape)
    return NetworkState(spec, params, int(seed))


def declare_parameters(g: Graph, spec: ArchitectureSpec, prefix: str = "net.") -> dict[str, int]:
    return {name: g.parameter(prefix + name, shape) for name, shape in spec.parameter_shapes()}


def apply(g: Graph, spec: ArchitectureSpec, p: dict[str, int], x: int) -> int:
    """Append the network applied to input node ``x``; returns the (N, outputs) node."""
    shape = g[x].shape
    if len(shape) != 2 or shape[1] != spec.input_dim:
        raise ShapeError(f"network input has shape {shape}, expected (N, {spec.input_dim})", x)
    if spec.sin_input_layer:
        h = sin_input_map_node(g, x, p["sin.W"], p["sin.b"])
    else:
        h = g.activation(g.add(g.matmul(x, p["in.W"]), p["in.b"]), spec.activation)
    for k in range(spec.depth):
        h = resnet_block_node(g, h, p[f"block{k}.W"], p[f"block{k}.b"], spec.activation,
                              skip=spec.block_kind == "resnet" and g[h].shape[1] == spec.hidden_width)
    return g.add(g.matmul(h, p["head.W"]), p["head.b"])


def sin_input_map_node(g: Graph, x: int, w: int, b: int) -> int:
    return g.sin(g.scale(g.add(g.matmul(x, w), b), TWO_PI))


def resnet_block_node(g: Graph, h: int, w: int, b: int, activation: str = "tanhshrink",
                      skip: bool = True) -> int:
    z = g.activation(g.add(g.matmul(h, w), b), activation)
    if not skip:
        return z
    if g[h].shape != g[z].shape:
        raise ShapeError(f"resnet block width mismatch: {g[h].shape} vs {g[z].shape}", h)
    return g.add(h, z)


def _feed(net: NetworkState, prefix: str = "net.") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in net.params.items()}


def _check_points(net: NetworkState, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != net.spec.input_dim:
        raise ShapeError(f"points have {pts.shape[1]} columns, expected {net.spec.input_dim}")
    return pts


def evaluate(net: NetworkState, points) -> np.ndarray:
    """Network outputs, shape (N, 1) or (N, 4)."""
    pts = _check_points(net, points)
    g = Graph()
    p = declare_parameters(g, net.spec)
    x = g.input("x", pts.shape)
    out = apply(g, net.spec, p, x)
    return forward(g, {**_feed(net), "x": pts}, [out])[out]


def sin_input_map(points, W, b) -> np.ndarray:
    """``sin(2*pi*(points @ W + b))``; ``W`` has shape (input_dim, features)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or points.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"sin_input_map: points {points.shape}, W {W.shape}, b {b.shape}")
    return np.sin(TWO_PI * (points @ W + b))


def resnet_block(h, W, b, activation: str = "tanhshrink") -> np.ndarray:
    """``h + act(h @ W + b)`` evaluated directly."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (h.shape[1], h.shape[1]):
        raise ShapeError(f"resnet block expects square weights of width {h.shape[1]}, got {W.shape}")
    g = Graph()
    hn = g.input("h", h.shape)
    wn = g.parameter("W", W.shape)
    bn = g.parameter("b", np.shape(b))
    out = resnet_block_node(g, hn, wn, bn, activation)
    return forward(g, {"h": h, "W": W, "b": b}, [out])[out]


def derivative_nodes(g: Graph, x: int, out: int, order: int, first=None) -> dict[str, int]:
    """Tangent nodes for derivatives of output column 0 (``c``).

    Returns node ids keyed ``c_x, c_y, c_t`` (order 1) or ``c_xx, c_yy``
    (order 2). Order-1 entries are computed on the whole output matrix, so
    the derivative of every head is available through ``first``.
    """
    first = first if first is not None else first_derivative_nodes(g, x, out)
    if order == 1:
        return {k: g.col(first[k[-1]], 0) for k in ("c_x", "c_y", "c_t")}
    if order == 2:
        cx = g.col(first["x"], 0)
        cy = g.col(first["y"], 0)
        return {"c_xx": g.tangent(x, (1.0, 0.0, 0.0), cx), "c_yy": g.tangent(x, (0.0, 1.0, 0.0), cy)}
    raise GraphError(f"order must be 1 or 2, got {order}")


def first_derivative_nodes(g: Graph, x: int, out: int) -> dict[str, int]:
    axes = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "t": (0.0, 0.0, 1.0)}
    return {k: g.tangent(x, d, out) for k, d in axes.items()}


def input_derivatives(net: NetworkState, points, order: int) -> dict[str, np.ndarray]:
    """Input derivatives of ``c`` at ``points``: order 1 -> c_x, c_y, c_t; order 2 -> c_xx, c_yy."""
    pts = _check_points(net, points)
    g = Graph()
    p = declare_parameters(g, net.spec)
    x = g.input("x", pts.shape)
    out = apply(g, net.spec, p, x)
    nodes = derivative_nodes(g, x, out, order)
    vals = forward(g, {**_feed(net), "x": pts}, list(nodes.values()))
    return {k: vals[v][:, 0].copy() for k, v in nodes.items()}


def save(net: NetworkState, path) -> Path:
    path = Path(path)
    names = [n for n, _ in net.spec.parameter_shapes()]
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, format=np.array(CHECKPOINT_FORMAT), spec=np.array(json.dumps(asdict(net.spec))),
             seed=np.array(net.seed, dtype=np.int64), names=np.array(names), flat=net.flat())
    tmp.replace(path)
    return path


def load(path) -> NetworkState:
    with np.load(Path(path), allow_pickle=False) as z:
        fmt = str(z["format"])
        if fmt != CHECKPOINT_FORMAT:
            raise ArchitectureError(f"unsupported checkpoint format {fmt!r}")
        spec = ArchitectureSpec(**json.loads(str(z["spec"])))
        names = [str(n) for n in z["names"]]
        expected = [n for n, _ in spec.parameter_shapes()]
        if names != expected:
            raise ArchitectureError("checkpoint parameter names do not match the architecture")
        state = NetworkState(spec, {}, int(z["seed"]))
        return state.with_flat(z["flat"])
