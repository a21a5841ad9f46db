"""Loss assembly and the Adam -> L-BFGS training loop.

Everything here works in whatever units the scenario is expressed in; the
callers pass nondimensional scenarios, for which ``scenario.k`` is ``1/Pe``.

One :class:`PinnProblem` holds a single computation graph with the network
applied to the collocation, observation and boundary/initial point sets.
All loss terms share the parameter nodes, so one backward pass gives the
gradient of the weighted total with respect to network weights and the
trainable source parameters.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as nw
from .diffgraph import DivergenceError, Graph, backward, forward
from .optim import (AdamHyper, AdamState, Diverged, LBFGSHyper, LBFGSState, LineSearchLog,
                    adam_step, lbfgs_step)
from .physics import Scenario, SourceModel, wind_at

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    pde: float = 1.0
    data: float = 0.0
    bc: float = 0.0
    fo: float = 0.0

    def __post_init__(self):
        vals = (self.pde, self.data, self.bc, self.fo)
        if any(not (np.isfinite(w) and w >= 0) for w in vals):
            raise ConfigurationError(f"loss weights must be finite and nonnegative: {vals}")
        if not any(w > 0 for w in vals):
            raise ConfigurationError("at least one loss weight must be positive")


FORWARD_WEIGHTS = LossWeights(pde=1.0, data=0.0, bc=1000.0, fo=1.0)
INVERSE_WEIGHTS = LossWeights(pde=1.0, data=10000.0, bc=0.0, fo=0.0)


@dataclass(frozen=True)
class Schedule:
    adam_epochs: int
    lbfgs_epochs: int

    def __post_init__(self):
        if self.adam_epochs < 0 or self.lbfgs_epochs < 0:
            raise ConfigurationError("epoch counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.adam_epochs + self.lbfgs_epochs


SCHEDULES = {
    "full-forward": Schedule(5000, 5000),
    "real-data": Schedule(10000, 3000),
    "desk-forward": Schedule(1500, 500),
    "desk-inverse": Schedule(3000, 1000),
}


@dataclass(eq=False)
class ObservationSet:
    points: np.ndarray  # (N, 3) columns x, y, t
    values: np.ndarray  # (N,)
    provenance: str = "synthetic"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.points.shape[1] != 3 or len(self.values) != len(self.points):
            raise ConfigurationError("observations need (N, 3) points and N values")
        if not np.isfinite(self.values).all():
            raise ConfigurationError("observed concentrations must be finite")
        if self.provenance not in ("synthetic", "ingested"):
            raise ConfigurationError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.values)


@dataclass(eq=False)
class CollocationSet:
    interior: np.ndarray
    boundary: np.ndarray
    boundary_values: np.ndarray
    seed: int
    n_boundary: int = 0
    n_initial: int = 0

    @property
    def n_collocation(self) -> int:
        return len(self.interior)


def sample_collocation(scenario: Scenario, n_interior: int, n_boundary: int, seed: int,
                       n_initial: int | None = None) -> CollocationSet:
    """Uniform i.i.d. interior points plus boundary and initial-time points.

    ``n_boundary`` points are spread over the four edges (uniform in
    perimeter length and time); ``n_initial`` points (default
    ``n_boundary``) lie at ``t = time_window[0]``. Target values are the
    homogeneous Dirichlet value and the zero initial condition.
    """
    n_initial = n_boundary if n_initial is None else n_initial
    if min(n_interior, n_boundary, n_initial) < 0:
        raise ConfigurationError("point counts must be nonnegative")
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = scenario.domain
    t0, t1 = scenario.time_window
    interior = np.column_stack([rng.uniform(x0, x1, n_interior), rng.uniform(y0, y1, n_interior),
                                rng.uniform(t0, t1, n_interior)])
    wx, wy = x1 - x0, y1 - y0
    s = rng.uniform(0.0, 2 * (wx + wy), n_boundary)
    bx = np.where(s < wx, x0 + s, np.where(s < wx + wy, x1, np.where(s < 2 * wx + wy,
                  x1 - (s - wx - wy), x0)))
    by = np.where(s < wx, y0, np.where(s < wx + wy, y0 + (s - wx), np.where(s < 2 * wx + wy,
                  y1, y1 - (s - 2 * wx - wy))))
    bt = rng.uniform(t0, t1, n_boundary)
    init = np.column_stack([rng.uniform(x0, x1, n_initial), rng.uniform(y0, y1, n_initial),
                            np.full(n_initial, t0)])
    boundary = np.vstack([np.column_stack([bx, by, bt]), init])
    return CollocationSet(interior, boundary, np.zeros(len(boundary)), seed, n_boundary, n_initial)


@dataclass
class LossBreakdown:
    pde: float
    data: float
    bc: float
    fo_compat: float
    total: float
    epoch: int = 0
    phase: str = "init"

    def as_row(self) -> list[float]:
        return [self.pde, self.data, self.bc, self.fo_compat, self.total]


def total_loss(parts: dict[str, float], weights: LossWeights, epoch: int = 0,
               phase: str = "init") -> LossBreakdown:
    """Weighted sum of loss terms (missing terms count as 0)."""
    p = {k: float(parts.get(k, 0.0)) for k in ("pde", "data", "bc", "fo_compat")}
    total = weights.pde * p["pde"] + weights.data * p["data"] + weights.bc * p["bc"] + weights.fo * p["fo_compat"]
    return LossBreakdown(p["pde"], p["data"], p["bc"], p["fo_compat"], total, epoch, phase)


def propose_weights(breakdown: LossBreakdown, weights: LossWeights) -> LossWeights:
    """Suggest weights that bring every active weighted term within a decade of the PDE term."""
    ref = weights.pde * breakdown.pde
    if not ref > 0:
        return weights
    out = {}
    for key, part in (("data", breakdown.data), ("bc", breakdown.bc), ("fo", breakdown.fo_compat)):
        w = getattr(weights, key)
        if w > 0 and part > 0:
            out[key] = 10.0 ** round(math.log10(ref / part))
        else:
            out[key] = w
    return replace(weights, **out)


class PinnProblem:
    """Loss graph for one training run.

    ``source`` gives initial centers/amplitudes plus which fields are
    trainable; non-trainable fields are baked in as constants. ``forcing``
    is an optional known extra source term at the collocation points.
    """

    def __init__(self, spec: nw.ArchitectureSpec, scenario: Scenario, collocation: CollocationSet | None,
                 weights: LossWeights, source: SourceModel,
                 observations: ObservationSet | None = None, forcing: np.ndarray | None = None):
        self.spec = spec
        self.scenario = scenario
        self.weights = weights
        self.source = source
        self.fo = spec.output_heads == "fo_pinn"
        n_int = 0 if collocation is None else collocation.n_collocation
        n_bnd = 0 if collocation is None else len(collocation.boundary)
        n_obs = 0 if observations is None else len(observations)
        if weights.pde > 0 and n_int == 0:
            raise ConfigurationError("PDE weight is positive but there are no collocation points")
        if weights.fo > 0 and (n_int == 0 or not self.fo):
            raise ConfigurationError("FO compatibility weight needs an fo_pinn head and collocation points")
        if weights.bc > 0 and n_bnd == 0:
            raise ConfigurationError("BC weight is positive but there are no boundary/initial points")
        if weights.data > 0 and n_obs == 0:
            raise ConfigurationError("data weight is positive but the observation set is empty")

        g = self.graph = Graph()
        self.net_nodes = nw.declare_parameters(g, spec)
        self.nodes: dict[str, int] = {}
        self._feed_const: dict[str, np.ndarray] = {}
        self._build_source(g, source)
        zero = g.constant(0.0)
        parts = {"pde": zero, "data": zero, "bc": zero, "fo_compat": zero}

        if n_int:
            pts = collocation.interior
            x = g.input("colloc", pts.shape)
            self._feed_const["colloc"] = pts
            out = nw.apply(g, spec, self.net_nodes, x)
            first = nw.first_derivative_nodes(g, x, out)
            d = {k: g.col(first[k[-1]], 0) for k in ("c_x", "c_y", "c_t")}
            if self.fo:
                d["c_xx"] = g.col(first["x"], 1)
                d["c_yy"] = g.col(first["y"], 2)
            else:
                d.update(nw.derivative_nodes(g, x, out, 2, first=first))
            u, v = wind_at(scenario.wind, pts[:, 0], pts[:, 1], pts[:, 2])
            s = self._source_node(g, g.col(x, 0), g.col(x, 1))
            if forcing is not None:
                s = g.add(s, g.constant(np.asarray(forcing, dtype=np.float64).reshape(-1, 1)))
            adv = g.add(g.mul(g.constant(u.reshape(-1, 1)), d["c_x"]),
                        g.mul(g.constant(v.reshape(-1, 1)), d["c_y"]))
            lap = g.add(d["c_xx"], d["c_yy"])
            r = g.sub(g.sub(g.add(d["c_t"], adv), g.scale(lap, scenario.k)), s)
            parts["pde"] = g.mean(g.square(r))
            self.nodes.update(d)
            self.nodes.update(residual=r, source=s, c_colloc=g.col(out, 0))
            if self.fo:
                diffs = [g.mean(g.square(g.sub(g.col(out, j), d[k])))
                         for j, k in ((1, "c_x"), (2, "c_y"), (3, "c_t"))]
                parts["fo_compat"] = g.scale(g.add(g.add(diffs[0], diffs[1]), diffs[2]), 1.0 / 3.0)
        if n_obs:
            x = g.input("obs", observations.points.shape)
            self._feed_const["obs"] = observations.points
            pred = g.col(nw.apply(g, spec, self.net_nodes, x), 0)
            obs = g.constant(observations.values.reshape(-1, 1))
            parts["data"] = g.mean(g.square(g.sub(pred, obs)))
            self.nodes["c_obs"] = pred
        if n_bnd:
            x = g.input("bnd", collocation.boundary.shape)
            self._feed_const["bnd"] = collocation.boundary
            pred = g.col(nw.apply(g, spec, self.net_nodes, x), 0)
            target = g.constant(collocation.boundary_values.reshape(-1, 1))
            parts["bc"] = g.mean(g.square(g.sub(pred, target)))

        terms = [g.scale(parts[k], w) for k, w in (("pde", weights.pde), ("data", weights.data),
                                                   ("bc", weights.bc), ("fo_compat", weights.fo)) if w > 0]
        total = terms[0]
        for t in terms[1:]:
            total = g.add(total, t)
        self.part_nodes = parts
        self.total_node = total
        self._outputs = [total] + [n for n in parts.values() if n != zero]
        self._layout()

    # -- source parameters ------------------------------------------------

    def _build_source(self, g: Graph, source: SourceModel):
        self.source_nodes = []
        self.source_params: list[tuple[int, int, str]] = []  # (source index, node, field)
        for i in range(source.n_sources):
            entry = {}
            for fld, val in (("x", source.centers[i, 0]), ("y", source.centers[i, 1]),
                             ("amplitude", source.amplitudes[i])):
                if fld in source.trainable:
                    nid = g.parameter(f"source{i}.{fld}", ())
                    self.source_params.append((i, nid, fld))
                else:
                    nid = g.constant(val)
                entry[fld] = nid
            self.source_nodes.append(entry)

    def _source_node(self, g: Graph, xcol: int, ycol: int) -> int:
        coef = -1.0 / (2.0 * self.source.sigma ** 2)
        total = None
        for entry in self.source_nodes:
            r2 = g.add(g.square(g.sub(xcol, entry["x"])), g.square(g.sub(ycol, entry["y"])))
            bump = g.mul(entry["amplitude"], g.exp(g.scale(r2, coef)))
            total = bump if total is None else g.add(total, bump)
        return total

    # -- flat parameter vector ------------------------------------------

    def _layout(self):
        self._slots = []
        off = 0
        for name, shape in self.spec.parameter_shapes():
            size = int(np.prod(shape))
            self._slots.append((self.net_nodes[name], off, size, shape))
            off += size
        self.n_net = off
        for _, nid, _ in self.source_params:
            self._slots.append((nid, off, 1, ()))
            off += 1
        self.size = off

    def pack(self, net: nw.NetworkState, source: SourceModel | None = None) -> np.ndarray:
        source = source or self.source
        vals = [net.flat()]
        for i, _, fld in self.source_params:
            vals.append(np.array([source.centers[i, 0] if fld == "x" else
                                  source.centers[i, 1] if fld == "y" else source.amplitudes[i]]))
        return np.concatenate(vals)

    def unpack(self, theta: np.ndarray, seed: int = 0) -> tuple[nw.NetworkState, SourceModel]:
        net = nw.NetworkState(self.spec, {}, seed).with_flat(theta[:self.n_net])
        centers = self.source.centers.copy()
        amps = self.source.amplitudes.copy()
        for k, (i, _, fld) in enumerate(self.source_params):
            val = float(theta[self.n_net + k])
            if fld == "x":
                centers[i, 0] = val
            elif fld == "y":
                centers[i, 1] = val
            else:
                amps[i] = val
        return net, replace(self.source, centers=centers, amplitudes=amps)

    def source_coordinates(self, theta: np.ndarray) -> np.ndarray:
        return self.unpack(theta)[1].centers

    def feed(self, theta: np.ndarray) -> dict:
        f = {nid: theta[off:off + size].reshape(shape) for nid, off, size, shape in self._slots}
        for name, arr in self._feed_const.items():
            f[self.graph.names[name]] = arr
        return f

    # -- evaluation -------------------------------------------------------

    def evaluate(self, theta: np.ndarray, grad: bool = True, extra: Sequence[int] = ()):
        """Loss breakdown (and flat gradient) at ``theta``."""
        outputs = self._outputs + list(extra)
        vals = forward(self.graph, self.feed(theta), outputs)
        parts = {k: float(vals[n]) if n in vals and self.graph[n].op != "const" else 0.0
                 for k, n in self.part_nodes.items()}
        breakdown = total_loss(parts, self.weights)
        breakdown.total = float(vals[self.total_node])
        if not grad:
            return breakdown, None, vals
        grads = backward(self.graph, vals, self.total_node)
        flat = np.empty(self.size)
        for nid, off, size, _ in self._slots:
            flat[off:off + size] = grads[nid].ravel()
        return breakdown, flat, vals

    def objective(self):
        """``fun(theta) -> (f, g)`` with a small cache of breakdowns by evaluated point."""
        cache: dict[bytes, LossBreakdown] = {}

        def fun(theta):
            breakdown, g, _ = self.evaluate(theta)
            if len(cache) > 64:
                cache.clear()
            cache[theta.tobytes()] = breakdown
            return breakdown.total, g

        fun.cache = cache
        return fun


# -- standalone loss terms ------------------------------------------------


def _problem_for(net, scenario, source, collocation=None, observations=None, weights=None, forcing=None):
    return PinnProblem(net.spec, scenario, collocation, weights, source, observations, forcing)


def pde_loss(net: nw.NetworkState, collocation: CollocationSet, scenario: Scenario,
             source: SourceModel, forcing=None) -> float:
    prob = _problem_for(net, scenario, source, collocation, weights=LossWeights(1, 0, 0, 0), forcing=forcing)
    return prob.evaluate(prob.pack(net, source), grad=False)[0].pde


def data_loss(net: nw.NetworkState, observations: ObservationSet) -> float:
    if len(observations) == 0:
        raise ConfigurationError("empty observation set")
    pts = observations.points
    pred = nw.evaluate(net, pts)[:, 0]
    return float(np.mean((pred - observations.values) ** 2))


def bc_ic_loss(net: nw.NetworkState, points, values) -> float:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        raise ConfigurationError("no boundary/initial points")
    pred = nw.evaluate(net, pts)[:, 0]
    return float(np.mean((pred - np.asarray(values, dtype=np.float64)) ** 2))


def fo_compat_loss(net: nw.NetworkState, points) -> float:
    if net.spec.output_heads != "fo_pinn":
        raise ConfigurationError("fo_compat_loss needs an fo_pinn head")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = nw.evaluate(net, pts)
    d = nw.input_derivatives(net, pts, 1)
    diffs = [out[:, 1] - d["c_x"], out[:, 2] - d["c_y"], out[:, 3] - d["c_t"]]
    return float(sum(np.mean(x * x) for x in diffs) / 3.0)


# -- training loop --------------------------------------------------------


@dataclass
class DivergenceEvent:
    epoch: int
    phase: str
    message: str


@dataclass
class TrainReport:
    initial: LossBreakdown
    history: list[LossBreakdown]
    trajectory: np.ndarray | None  # (epochs + 1, n_sources, 2) including the start
    wall_clock: dict[str, float]
    theta: np.ndarray
    net: nw.NetworkState
    source: SourceModel
    divergence: list[DivergenceEvent] = field(default_factory=list)
    line_search: list[LineSearchLog] = field(default_factory=list)
    schedule: Schedule | None = None

    @property
    def diverged(self) -> bool:
        return bool(self.divergence)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def phase_lengths(self) -> dict[str, int]:
        out = {"adam": 0, "lbfgs": 0}
        for b in self.history:
            out[b.phase] += 1
        return out

    def write_csv(self, path, to_physical=None) -> Path:
        """Loss history CSV; ``to_physical`` maps scaled source coordinates for the x/y columns."""
        path = Path(path)
        n_src = 0 if self.trajectory is None else self.trajectory.shape[1]
        header = ["epoch", "phase", "pde", "data", "bc", "fo", "total"]
        for i in range(n_src):
            header += [f"x_est{i}", f"y_est{i}"]
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, b in enumerate([self.initial] + self.history):
                row = [b.epoch, b.phase] + [repr(v) for v in b.as_row()]
                if n_src:
                    coords = self.trajectory[k]
                    if to_physical is not None:
                        coords = to_physical(coords)
                    row += [repr(float(v)) for v in np.asarray(coords).ravel()]
                w.writerow(row)
        tmp.replace(path)
        return path


def initial_source(source: SourceModel, scenario: Scenario, mode: str, seed: int) -> SourceModel:
    """Starting guess: ``"midpoint"``, ``"random"`` (seeded interior point) or ``"truth"``."""
    if mode == "truth" or not {"x", "y"} & set(source.trainable):
        return source
    n = source.n_sources
    if mode == "midpoint":
        centers = np.tile(scenario.midpoint, (n, 1))
        if n > 1:
            # identical starts would receive identical gradients
            x0, x1, y0, y1 = scenario.domain
            offs = np.linspace(-0.1, 0.1, n)
            centers = centers + np.column_stack([offs * (x1 - x0), -offs * (y1 - y0)])
    elif mode == "random":
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = scenario.domain
        centers = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    else:
        raise ConfigurationError(f"unknown source initialisation {mode!r}")
    new = source.centers.copy()
    if "x" in source.trainable:
        new[:, 0] = centers[:, 0]
    if "y" in source.trainable:
        new[:, 1] = centers[:, 1]
    return source.with_centers(new)


def optimize(problem: PinnProblem, theta0: np.ndarray, schedule: Schedule, seed: int = 0,
             adam: AdamHyper = AdamHyper(), lbfgs: LBFGSHyper = LBFGSHyper(),
             callback=None) -> TrainReport:
    """Run the Adam phase then the L-BFGS phase on ``problem``.

    One epoch is one full-batch optimizer step and one recorded
    :class:`LossBreakdown` (the loss after the step). A divergence stops
    the run with the last finite parameters.
    """
    fun = problem.objective()
    track = bool(problem.source_params)
    theta = np.array(theta0, dtype=np.float64)
    history: list[LossBreakdown] = []
    traj = [problem.source_coordinates(theta).copy()] if track else None
    events: list[DivergenceEvent] = []
    clock = {"adam": 0.0, "lbfgs": 0.0}

    try:
        f, g = fun(theta)
    except DivergenceError as exc:
        raise ConfigurationError(f"loss is non-finite at the initial parameters: {exc}") from exc
    initial = replace(fun.cache[theta.tobytes()], epoch=0, phase="init")
    epoch = 0

    def record(phase, key):
        nonlocal epoch
        epoch += 1
        b = replace(fun.cache[key], epoch=epoch, phase=phase)
        history.append(b)
        if track:
            traj.append(problem.source_coordinates(theta).copy())
        if callback is not None:
            callback(b, theta)

    state = AdamState.fresh(problem.size)
    start = time.perf_counter()
    for _ in range(schedule.adam_epochs):
        try:
            new, state = adam_step(theta, g, state, adam)
            f_new, g_new = fun(new)
        except (Diverged, DivergenceError) as exc:
            events.append(DivergenceEvent(epoch + 1, "adam", str(exc)))
            break
        theta, f, g = new, f_new, g_new
        record("adam", theta.tobytes())
    clock["adam"] = time.perf_counter() - start

    ls_logs: list[LineSearchLog] = []
    if not events and schedule.lbfgs_epochs:
        start = time.perf_counter()
        lstate = LBFGSState()
        stalled = False
        failures = 0
        for _ in range(schedule.lbfgs_epochs):
            if not stalled:
                try:
                    theta, f, g, status = lbfgs_step(theta, f, g, fun, lstate, lbfgs)
                except Diverged as exc:
                    events.append(DivergenceEvent(epoch + 1, "lbfgs", str(exc)))
                    break
                failures = failures + 1 if status == "ls_failed" else 0
                stalled = status == "converged" or failures >= 2
            key = theta.tobytes()
            if key not in fun.cache:
                fun(theta)
            record("lbfgs", key)
        ls_logs = lstate.logs
        clock["lbfgs"] = time.perf_counter() - start

    for ev in events:
        log.warning("divergence at epoch %d (%s): %s", ev.epoch, ev.phase, ev.message)
    net, src = problem.unpack(theta, seed)
    return TrainReport(initial, history, None if traj is None else np.array(traj), clock, theta,
                       net, src, events, ls_logs, schedule)


def train(net: nw.NetworkState, scenario: Scenario, collocation: CollocationSet | None,
          observations: ObservationSet | None, weights: LossWeights, schedule: Schedule,
          seed: int = 0, source: SourceModel | None = None, source_init: str = "midpoint",
          forcing=None, adam: AdamHyper = AdamHyper(), lbfgs: LBFGSHyper = LBFGSHyper(),
          auto_weights: bool = False, callback=None) -> TrainReport:
    """Build the loss for ``scenario`` and train ``net`` (plus trainable source fields)."""
    source = scenario.sources if source is None else source
    source = initial_source(source, scenario, source_init, seed)
    problem = PinnProblem(net.spec, scenario, collocation, weights, source, observations, forcing)
    theta0 = problem.pack(net, source)
    if auto_weights:
        first, _, _ = problem.evaluate(theta0, grad=False)
        proposal = propose_weights(first, weights)
        log.info("proposed loss weights %s (current %s)", proposal, weights)
        if proposal != weights:
            problem = PinnProblem(net.spec, scenario, collocation, proposal, source, observations, forcing)
    report = optimize(problem, theta0, schedule, seed, adam, lbfgs, callback)
    report.net.seed = net.seed
    return report
