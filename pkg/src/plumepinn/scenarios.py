"""Built-in scenarios, the inverse driver, the verification suite and the epoch study."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as nw
from . import physics as ph
from . import refsolver as rs
from .optim import AdamHyper, LBFGSHyper
from .training import (FORWARD_WEIGHTS, INVERSE_WEIGHTS, SCHEDULES, CollocationSet, LossWeights,
                       ObservationSet, PinnProblem, Schedule, TrainReport, sample_collocation, train)

log = logging.getLogger(__name__)

FULL_THRESHOLD = 0.1
DESK_THRESHOLD = 0.3

VERIFY_COORDINATES = ((3.0, 3.0), (4.0, 4.0), (5.0, 5.0), (6.0, 6.0), (7.0, 7.0),
                      (4.0, 5.0), (5.0, 2.0), (6.0, 3.0), (4.0, 6.0), (2.0, 4.0))

STUDY_CASES = ((10000, 2500), (15000, 2500), (15000, 200))

RD_STEP = 200.0
RD_CELLS = 100
RD_TRUTH_CELL = (37, 44)


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class SensorLayout:
    n_side: int = 15
    noise_sd: float = 0.0
    margin: float = 0.0


@dataclass(frozen=True)
class ScenarioEntry:
    scenario: ph.Scenario
    sensors: SensorLayout = SensorLayout()
    grid: rs.GridSpec = rs.GridSpec()
    description: str = ""


def _synthetic(name, k, wind, centers, window, obs_times, description, sigma_fraction=0.25,
               domain=(0.0, 10.0, 0.0, 10.0)) -> ScenarioEntry:
    side = max(domain[1] - domain[0], domain[3] - domain[2])
    src = ph.SourceModel(centers, [1.0] * len(centers), sigma_fraction * side)
    sc = ph.Scenario(name, domain, window, k, wind, src, observation_times=obs_times)
    return ScenarioEntry(sc, description=description)


def rd_wind(t_end: float = 3600.0) -> ph.GriddedWind:
    """Slowly veering south-westerly wind sampled on the domain corners every 10 minutes."""
    times = np.linspace(0.0, t_end, 7)
    edges = np.array([0.0, RD_CELLS * RD_STEP])
    speed = 2.0 + 0.5 * np.sin(2 * np.pi * times / t_end)
    direction = np.deg2rad(225.0 + 30.0 * times / t_end)
    u = speed * np.sin(direction + np.pi)
    v = speed * np.cos(direction + np.pi)
    U = np.broadcast_to(u[:, None, None], (len(times), 2, 2)).copy()
    V = np.broadcast_to(v[:, None, None], (len(times), 2, 2)).copy()
    return ph.GriddedWind(times, edges, edges, U, V)


def builtin_scenarios() -> dict[str, ScenarioEntry]:
    """S1-S4 synthetic scenarios and the RD real-data-style scenario."""
    variable = ph.RotatingWind()
    four = (0.0, 1.0, 2.0, 3.0, 4.0)
    reg = {
        "S1": _synthetic("S1", 0.5, ph.ConstantWind(0.7, 0.7), [(4.0, 4.0)], (0.0, 3.0), (3.0,),
                         "constant wind (0.7, 0.7), k=0.5, sensors at t=3 only"),
        "S2": _synthetic("S2", 0.5, variable, [(4.0, 4.0)], (0.0, 4.0), four,
                         "variable wind, t in [0, 4], k=0.5"),
        "S3": _synthetic("S3", 1e-5, variable, [(4.0, 4.0)], (0.0, 4.0), four,
                         "variable wind, t in [0, 4], k=1e-5"),
        "S4": _synthetic("S4", 1e-5, variable, [(4.0, 4.0), (3.0, 6.0)], (0.0, 4.0), four,
                         "two sources, variable wind, k=1e-5"),
    }
    side = RD_CELLS * RD_STEP
    truth = (RD_TRUTH_CELL[0] * RD_STEP, RD_TRUTH_CELL[1] * RD_STEP)
    rd = ph.Scenario("RD", (0.0, side, 0.0, side), (0.0, 3600.0), 50.0, rd_wind(),
                     ph.SourceModel([truth], [1.0], 0.25 * side),
                     observation_times=tuple(np.linspace(0.0, 3600.0, 5)))
    reg["RD"] = ScenarioEntry(rd, SensorLayout(n_side=15), rs.GridSpec(RD_CELLS, RD_CELLS),
                              "20 x 20 km, 100 x 100 grid with 200 m step, source at cell (37, 44)")
    return reg


def scenario_with_source(entry: ScenarioEntry, centers) -> ScenarioEntry:
    src = entry.scenario.sources.with_centers(np.atleast_2d(np.asarray(centers, dtype=np.float64)))
    src = replace(src, amplitudes=np.resize(src.amplitudes, len(src.centers)))
    return replace(entry, scenario=replace(entry.scenario, sources=src))


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class PinnConfig:
    arch: nw.ArchitectureSpec = nw.ArchitectureSpec(hidden_width=64, depth=4, block_kind="resnet",
                                                    sin_input_layer=True)
    weights: LossWeights = INVERSE_WEIGHTS
    schedule: Schedule = Schedule(3000, 1000)
    n_collocation: int = 2000
    n_boundary: int = 0
    n_initial: int = 0
    source_init: str = "midpoint"
    adam: AdamHyper = AdamHyper()
    lbfgs: LBFGSHyper = LBFGSHyper()
    threshold: float = FULL_THRESHOLD
    auto_weights: bool = False
    # used only when no observation is taken at the initial time
    initial_points: int = 1000
    initial_weight: float = 1000.0


def desk_inverse_config(**kw) -> PinnConfig:
    return replace(PinnConfig(threshold=DESK_THRESHOLD), **kw)


def needs_initial_term(scenario: ph.Scenario) -> bool:
    """True when no observation is taken at the initial time."""
    t0 = scenario.time_window[0]
    return not any(abs(t - t0) <= 1e-12 * max(1.0, abs(t0)) for t in scenario.observation_times)


# -- forward driver --------------------------------------------------------


@dataclass(frozen=True)
class ForwardConfig:
    """Desk-scale forward preset: sin-input ResNet with an FO head."""

    arch: nw.ArchitectureSpec = nw.ArchitectureSpec(hidden_width=64, depth=4, block_kind="resnet",
                                                    sin_input_layer=True, output_heads="fo_pinn")
    weights: LossWeights = FORWARD_WEIGHTS
    schedule: Schedule = SCHEDULES["desk-forward"]
    n_collocation: int = 2000
    n_boundary: int = 500
    n_initial: int | None = None
    n_snapshots: int = 4
    adam: AdamHyper = AdamHyper()
    lbfgs: LBFGSHyper = LBFGSHyper()
    mse_threshold: float = 1e-3


@dataclass
class ForwardResult:
    report: TrainReport
    reference: rs.FieldSeries
    prediction: rs.FieldSeries
    scales: ph.CharacteristicScales
    mse: np.ndarray  # per snapshot, scaled concentration
    mae: np.ndarray
    threshold: float

    @property
    def passed(self) -> bool:
        return not self.report.diverged and bool(np.all(self.mse < self.threshold))


def snapshot_times(scenario: ph.Scenario, n: int) -> np.ndarray:
    t0, t1 = scenario.time_window
    return np.linspace(t0, t1, max(2, int(n)))


def predict_fields(net: nw.NetworkState, like: rs.FieldSeries, scales: ph.CharacteristicScales) -> rs.FieldSeries:
    """Evaluate ``net`` (trained in scaled units) on the grid and times of ``like``."""
    S = ph.Scaling(scales)
    out = np.empty_like(like.fields)
    for k, t in enumerate(like.times):
        pred = nw.evaluate(net, S.points(like.points(t)))[:, 0]
        out[k] = S.c_back(pred).reshape(out.shape[1:])
    return rs.FieldSeries(like.times.copy(), like.xs.copy(), like.ys.copy(), out)


def run_forward(scenario: ph.Scenario | ScenarioEntry, config: ForwardConfig = ForwardConfig(),
                seed: int = 0, callback=None) -> ForwardResult:
    """Train a forward PINN with the source held fixed and compare it to the reference solver.

    Errors are measured on concentration divided by ``C`` so the threshold
    does not depend on the source amplitude.
    """
    entry = scenario if isinstance(scenario, ScenarioEntry) else ScenarioEntry(scenario)
    sc = entry.scenario
    ref = rs.solve_forward(sc, entry.grid, times=snapshot_times(sc, config.n_snapshots))
    if sc.nondimensional:
        scales = sc.scales or ph.CharacteristicScales()
        nd = sc
    else:
        scales = sc.scales or ph.default_scales(sc, float(np.max(np.abs(ref.fields))) or 1.0)
        nd = ph.nondimensionalize(sc.with_scales(scales))
    frozen = replace(nd.sources, trainable=())
    colloc = sample_collocation(nd, config.n_collocation, config.n_boundary, seed, n_initial=config.n_initial)
    report = train(nw.init(config.arch, seed), nd, colloc, None, config.weights, config.schedule, seed,
                   source=frozen, source_init="truth", adam=config.adam, lbfgs=config.lbfgs,
                   callback=callback)
    if sc.nondimensional:
        pred = predict_fields(report.net, ref, ph.CharacteristicScales())
        C = 1.0
    else:
        pred = predict_fields(report.net, ref, scales)
        C = scales.C
    mse = np.array([rs.field_mse(a / C, b / C) for a, b in zip(pred.fields, ref.fields)])
    mae = np.array([rs.field_mae(a / C, b / C) for a, b in zip(pred.fields, ref.fields)])
    return ForwardResult(report, ref, pred, scales, mse, mae, config.mse_threshold)


# -- inverse driver --------------------------------------------------------


@dataclass
class SourceEstimate:
    predicted: np.ndarray
    truth: np.ndarray | None
    squared_error: np.ndarray | None
    abs_error: np.ndarray | None
    threshold: float
    passed: bool
    complete: bool
    scales: ph.CharacteristicScales
    trajectory: np.ndarray | None = None
    report: TrainReport | None = field(default=None, repr=False)
    seed: int = 0

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "predicted": arr(self.predicted),
            "truth": arr(self.truth),
            "mse": arr(self.squared_error),
            "abs_error": arr(self.abs_error),
            "threshold": self.threshold,
            "passed": self.passed,
            "complete": self.complete,
            "scales": {"C": self.scales.C, "L": self.scales.L, "U": self.scales.U},
            "seed": self.seed,
            "epochs_run": None if self.report is None else self.report.epochs_run,
            "divergence": [] if self.report is None else [vars(e) for e in self.report.divergence],
        }


def score(predicted, truth, threshold: float):
    """Per-coordinate squared and absolute errors and the all-within-threshold verdict."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    err = np.abs(predicted - truth)
    return err ** 2, err, bool(np.all(err <= threshold))


def synthesize_observations(entry: ScenarioEntry, seed: int = 0) -> tuple[ObservationSet, rs.FieldSeries]:
    sc = entry.scenario
    times = sorted(set(sc.observation_times) | {sc.time_window[0]})
    fs = rs.solve_forward(sc, entry.grid, times=times)
    sensors = ph.sensor_grid(sc.domain, entry.sensors.n_side, entry.sensors.margin)
    obs = rs.sample_observations(fs, sensors, sc.observation_times, entry.sensors.noise_sd, seed)
    return obs, fs


def run_inverse(scenario: ph.Scenario | ScenarioEntry, config: PinnConfig = PinnConfig(), seed: int = 0,
                observations: ObservationSet | None = None, truth=None,
                forcing=None, net: nw.NetworkState | None = None, callback=None) -> SourceEstimate:
    """Recover source coordinates from observations.

    Observations default to a reference-solver run of the scenario. Training
    happens in scaled units; the estimate is reported in scenario units.
    ``truth`` defaults to the scenario's own source centers.
    """
    entry = scenario if isinstance(scenario, ScenarioEntry) else ScenarioEntry(scenario)
    sc = entry.scenario
    if observations is None:
        observations, _ = synthesize_observations(entry, seed)
    if len(observations) == 0:
        raise IngestError("observation set is empty")
    truth = sc.sources.centers if truth is None else np.atleast_2d(np.asarray(truth, dtype=np.float64))

    if sc.nondimensional:
        scales = sc.scales or ph.CharacteristicScales()
        nd, obs_nd = sc, observations
    else:
        scales = sc.scales or ph.default_scales(sc, float(np.max(np.abs(observations.values))) or 1.0)
        nd = ph.nondimensionalize(sc.with_scales(scales))
        S = ph.Scaling(scales)
        obs_nd = ObservationSet(S.points(observations.points), S.c(observations.values),
                                observations.provenance)

    n_initial = config.n_initial
    weights = config.weights
    if needs_initial_term(sc) and config.initial_points > 0:
        # data at late times alone cannot tell a source from an arbitrary initial field
        n_initial = n_initial or config.initial_points
        if weights.bc == 0:
            weights = replace(weights, bc=config.initial_weight)
    colloc = sample_collocation(nd, config.n_collocation, config.n_boundary, seed, n_initial=n_initial)
    net = net if net is not None else nw.init(config.arch, seed)
    report = train(net, nd, colloc, obs_nd, weights, config.schedule, seed, source=nd.sources,
                   source_init=config.source_init, forcing=forcing, adam=config.adam,
                   lbfgs=config.lbfgs, auto_weights=config.auto_weights, callback=callback)

    S = ph.Scaling(scales) if not sc.nondimensional else ph.Scaling(ph.CharacteristicScales())
    predicted = S.x_back(report.source.centers)
    traj = None if report.trajectory is None else S.x_back(report.trajectory)
    sq = ab = None
    passed = False
    if truth is not None:
        sq, ab, passed = score(predicted, truth, config.threshold)
    complete = not report.diverged
    return SourceEstimate(predicted, truth, sq, ab, config.threshold, passed and complete, complete,
                          scales, traj, report, seed)


# -- self-consistency oracle ----------------------------------------------


@dataclass
class SelfConsistencyResult:
    truth: np.ndarray
    predicted: np.ndarray
    error: float  # max over coordinates, scaled units
    report: TrainReport


def self_consistency_run(seed: int = 0, truth=(0.37, 0.58),
                         config: PinnConfig = PinnConfig(
                             arch=nw.ArchitectureSpec(hidden_width=16, depth=2, block_kind="resnet"),
                             schedule=Schedule(300, 300), n_collocation=500),
                         n_side: int = 8, times=(0.25, 0.5, 0.75, 1.0)) -> SelfConsistencyResult:
    """Inverse recovery when the data come from the model family itself.

    A random network ``c*`` is declared exact: the forcing term is chosen so
    that ``c*`` has zero residual for the true source, and the observations
    are ``c*`` at the sensors. Training starts from ``c*`` with the source at
    the domain midpoint, so the true source is a zero-loss point.
    """
    src = ph.SourceModel([truth], [1.0], 0.25)
    sc = ph.Scenario("self-consistency", (0.0, 1.0, 0.0, 1.0), (0.0, 1.0), 0.05, ph.ConstantWind(0.5, 0.3),
                     src, observation_times=times, nondimensional=True)
    star = nw.init(config.arch, seed)
    colloc = sample_collocation(sc, config.n_collocation, 0, seed, n_initial=0)
    exact = PinnProblem(config.arch, sc, colloc, LossWeights(1.0, 0.0, 0.0, 0.0), replace(src, trainable=()))
    _, _, vals = exact.evaluate(exact.pack(star), grad=False, extra=[exact.nodes["residual"]])
    forcing = np.asarray(vals[exact.nodes["residual"]]).ravel()
    sensors = ph.sensor_grid(sc.domain, n_side, margin=0.05)
    pts = np.vstack([np.column_stack([sensors, np.full(len(sensors), t)]) for t in times])
    obs = ObservationSet(pts, nw.evaluate(star, pts)[:, 0])
    report = train(star, sc, colloc, obs, config.weights, config.schedule, seed, source=src,
                   source_init="midpoint", forcing=forcing, adam=config.adam, lbfgs=config.lbfgs)
    pred = report.source.centers
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    return SelfConsistencyResult(truth, pred, float(np.abs(pred - truth).max()), report)


# -- verification suite --------------------------------------------------


@dataclass
class VerificationRow:
    index: int
    test: tuple[float, float]
    predicted: tuple[float, float] | None
    mse: tuple[float, float] | None
    passed: bool
    error: str | None = None


@dataclass
class VerificationReport:
    rows: list[VerificationRow]
    threshold: float

    @property
    def passes(self) -> int:
        return sum(r.passed for r in self.rows)

    @property
    def pass_rate(self) -> float:
        return self.passes / len(self.rows) if self.rows else 0.0

    def table(self) -> str:
        lines = [f"{'No':>3}  {'Test':>12}  {'Predicted':>18}  {'MSE':>22}  Result"]
        for r in self.rows:
            pred = "failed" if r.predicted is None else f"({r.predicted[0]:.3f}, {r.predicted[1]:.3f})"
            mse = "-" if r.mse is None else f"({r.mse[0]:.1e}, {r.mse[1]:.1e})"
            test = f"({r.test[0]:g}, {r.test[1]:g})"
            lines.append(f"{r.index:>3}  {test:>12}  {pred:>18}  {mse:>22}  {'pass' if r.passed else 'FAIL'}")
        lines.append(f"pass rate: {self.passes}/{len(self.rows)} = {100 * self.pass_rate:.0f}% "
                     f"(threshold {self.threshold:g} per coordinate)")
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "test_x", "test_y", "pred_x", "pred_y", "mse_x", "mse_y", "verdict"])
            for r in self.rows:
                pred = r.predicted or (float("nan"), float("nan"))
                mse = r.mse or (float("nan"), float("nan"))
                w.writerow([r.index, r.test[0], r.test[1], repr(pred[0]), repr(pred[1]),
                            repr(mse[0]), repr(mse[1]), "pass" if r.passed else "fail"])
        tmp.replace(path)
        return path


def verify_base_entry() -> ScenarioEntry:
    return builtin_scenarios()["S3"]


def _verify_row(args) -> VerificationRow:
    index, coord, config, seed, base = args
    entry = scenario_with_source(base, [coord])
    try:
        est = run_inverse(entry, config, seed)
    except Exception as exc:  # a failed row is a failed verdict, the suite continues
        log.exception("verification row %d failed", index)
        return VerificationRow(index, coord, None, None, False, repr(exc))
    p = est.predicted[0]
    return VerificationRow(index, coord, (float(p[0]), float(p[1])),
                           (float(est.squared_error[0, 0]), float(est.squared_error[0, 1])), est.passed,
                           None if est.complete else "diverged")


def verify_suite(config: PinnConfig = PinnConfig(), seed: int = 0, workers: int = 1,
                 coordinates: Sequence[tuple[float, float]] = VERIFY_COORDINATES,
                 base: ScenarioEntry | None = None) -> VerificationReport:
    """Localize each test coordinate under S3 conditions with a fresh network per row.

    Row ``i`` (1-based) uses seed ``seed + i``. Rows are independent and may
    run in ``workers`` processes; the report is ordered by row. ``base``
    overrides the S3 entry whose source is moved to each coordinate.
    """
    base = base or verify_base_entry()
    jobs = [(i + 1, tuple(map(float, c)), config, seed + i + 1, base) for i, c in enumerate(coordinates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_verify_row, jobs))
    else:
        rows = [_verify_row(j) for j in jobs]
    return VerificationReport(rows, config.threshold)


# -- epoch / collocation study -------------------------------------------


@dataclass
class StudyRow:
    epochs: int
    points: int
    x_pred: float
    y_pred: float
    mse_x: float
    mse_y: float


def epoch_collocation_study(config: PinnConfig = PinnConfig(), seed: int = 0,
                            cases: Sequence[tuple[int, int]] = STUDY_CASES,
                            epoch_scale: float = 1.0, lbfgs_fraction: float = 0.25,
                            entry: ScenarioEntry | None = None) -> list[StudyRow]:
    """Run the (epochs, collocation points) cases on S2 (or ``entry``).

    ``epoch_scale`` shrinks every epoch budget by the same factor; each
    budget is split ``1 - lbfgs_fraction`` Adam / ``lbfgs_fraction`` L-BFGS.
    """
    entry = entry or builtin_scenarios()["S2"]
    obs, _ = synthesize_observations(entry, seed)
    rows = []
    for epochs, points in cases:
        total = max(1, int(round(epochs * epoch_scale)))
        n_lbfgs = int(round(total * lbfgs_fraction))
        cfg = replace(config, n_collocation=int(points), schedule=Schedule(total - n_lbfgs, n_lbfgs))
        est = run_inverse(entry, cfg, seed, observations=obs)
        p = est.predicted[0]
        rows.append(StudyRow(int(epochs), int(points), float(p[0]), float(p[1]),
                             float(est.squared_error[0, 0]), float(est.squared_error[0, 1])))
    return rows


def write_study_csv(rows: Sequence[StudyRow], path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epochs", "points", "x_pred", "y_pred", "mse_x", "mse_y"])
        for r in rows:
            w.writerow([r.epochs, r.points, repr(r.x_pred), repr(r.y_pred), repr(r.mse_x), repr(r.mse_y)])
    tmp.replace(path)
    return path


# -- ingestion -------------------------------------------------------------


def wind_components(speed, direction_deg):
    """Meteorological convention: ``direction_deg`` is where the wind blows *from*."""
    theta = np.deg2rad(np.asarray(direction_deg, dtype=np.float64))
    speed = np.asarray(speed, dtype=np.float64)
    return speed * np.sin(theta + np.pi), speed * np.cos(theta + np.pi)


def _read_rows(path: Path, required: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestError(f"{path}: missing columns {missing} (header {header})")
        reader.fieldnames = header
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in required])
            except (TypeError, ValueError):
                raise IngestError(f"{path}: row {lineno} has a non-numeric value: {dict(row)}") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise IngestError(f"{path}: row {lineno} has a non-finite value")
    return np.array(rows, dtype=np.float64).reshape(-1, len(required))


def read_wind_csv(path, coordinate_convention: str = "xy") -> ph.GriddedWind:
    """Gridded wind from ``t,x,y,u,v`` or ``t,x,y,speed,direction_deg`` rows."""
    path = Path(path)
    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    if {"u", "v"} <= set(header):
        data = _read_rows(path, ["t", "x", "y", "u", "v"])
        u, v = data[:, 3], data[:, 4]
    elif {"speed", "direction_deg"} <= set(header):
        data = _read_rows(path, ["t", "x", "y", "speed", "direction_deg"])
        u, v = wind_components(data[:, 3], data[:, 4])
    else:
        raise IngestError(f"{path}: wind file needs u,v or speed,direction_deg columns")
    t, x, y = data[:, 0], data[:, 1], data[:, 2]
    if coordinate_convention == "yx":
        x, y = y, x
    elif coordinate_convention != "xy":
        raise IngestError(f"unknown coordinate convention {coordinate_convention!r}")
    ts, xs, ys = np.unique(t), np.unique(x), np.unique(y)
    U = np.full((len(ts), len(ys), len(xs)), np.nan)
    V = np.full_like(U, np.nan)
    it, iy, ix = np.searchsorted(ts, t), np.searchsorted(ys, y), np.searchsorted(xs, x)
    U[it, iy, ix] = u
    V[it, iy, ix] = v
    if np.isnan(U).any():
        raise IngestError(f"{path}: wind samples do not cover a full (t, y, x) grid")
    return ph.GriddedWind(ts, xs, ys, U, V)


def ingest_observations(path, fmt: str = "csv", coordinate_convention: str | None = None,
                        domain=None, wind_path=None) -> tuple[ObservationSet, dict]:
    """Read an ``x,y,t,c`` CSV into an :class:`ObservationSet`.

    ``coordinate_convention`` must be given: ``"xy"`` keeps the columns,
    ``"yx"`` means the file's ``x`` column holds the second coordinate.
    Returns the observations and a scenario fragment (domain, wind,
    observation times).
    """
    if fmt != "csv":
        raise IngestError(f"unsupported observation format {fmt!r}")
    if coordinate_convention not in ("xy", "yx"):
        raise IngestError("coordinate_convention must be given explicitly as 'xy' or 'yx'")
    path = Path(path)
    if not path.exists():
        raise IngestError(f"observation file not found: {path}")
    data = _read_rows(path, ["x", "y", "t", "c"])
    if len(data) == 0:
        raise IngestError(f"{path}: no observations")
    if coordinate_convention == "yx":
        data[:, [0, 1]] = data[:, [1, 0]]
    if domain is not None:
        x0, x1, y0, y1 = domain
        bad = np.flatnonzero((data[:, 0] < x0) | (data[:, 0] > x1) | (data[:, 1] < y0) | (data[:, 1] > y1))
        if len(bad):
            raise IngestError(f"{path}: row {int(bad[0]) + 2} lies outside the domain {domain}")
    obs = ObservationSet(data[:, :3], data[:, 3], provenance="ingested")
    fragment: dict = {"observation_times": tuple(np.unique(data[:, 2]).tolist())}
    if domain is not None:
        fragment["domain"] = tuple(domain)
    if wind_path is not None:
        fragment["wind"] = read_wind_csv(wind_path, coordinate_convention)
    return obs, fragment


def generate_rd_dataset(out_dir, seed: int = 0, coordinate_convention: str = "xy",
                        noise_sd: float = 0.0, entry: ScenarioEntry | None = None) -> dict[str, Path]:
    """Write an RD-like synthetic dataset: observations, wind (speed/direction) and metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entry = entry or builtin_scenarios()["RD"]
    entry = replace(entry, sensors=replace(entry.sensors, noise_sd=noise_sd))
    obs, _ = synthesize_observations(entry, seed)
    cols = (0, 1) if coordinate_convention == "xy" else (1, 0)
    obs_path = out / "observations.csv"
    with open(obs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "t", "c"])
        for p, c in zip(obs.points, obs.values):
            w.writerow([repr(float(p[cols[0]])), repr(float(p[cols[1]])), repr(float(p[2])), repr(float(c))])
    wind = entry.scenario.wind
    wind_path = out / "wind.csv"
    with open(wind_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "speed", "direction_deg"])
        for it, t in enumerate(wind.times):
            for iy, y in enumerate(wind.ys):
                for ix, x in enumerate(wind.xs):
                    u, v = wind.u[it, iy, ix], wind.v[it, iy, ix]
                    speed = math.hypot(u, v)
                    direction = math.degrees(math.atan2(-u, -v)) % 360.0
                    a, b = (x, y) if coordinate_convention == "xy" else (y, x)
                    w.writerow([repr(float(t)), repr(float(a)), repr(float(b)), repr(speed), repr(direction)])
    meta_path = out / "observations.meta.ini"
    sc = entry.scenario
    meta_path.write_text(
        "[units]\nlength = m\ntime = s\nconcentration = arbitrary\n\n"
        f"[layout]\ncoordinate_convention = {coordinate_convention}\n"
        f"domain = {', '.join(repr(v) for v in sc.domain)}\n"
        f"grid_step = {RD_STEP!r}\n\n"
        f"[truth]\nx = {sc.sources.centers[0, 0]!r}\ny = {sc.sources.centers[0, 1]!r}\n"
    )
    return {"observations": obs_path, "wind": wind_path, "meta": meta_path}
