"""Command-line entry point: ``plumepinn {forward,inverse,verify,reference,study,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import gradcheck
from . import network as nw
from . import physics as ph
from . import refsolver as rs
from . import scenarios as scn
from .optim import AdamHyper, LBFGSHyper
from .training import SCHEDULES, ConfigurationError, LossWeights, Schedule

SEED_ENV = "PLUMEPINN_SEED"
DEFAULT_SEED = 0
DEFAULT_SCENARIO = {"forward": "S1", "inverse": "S1", "reference": "S1", "verify": "S3", "study": "S2"}

EXIT_OK, EXIT_ERROR, EXIT_FAILED, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("plumepinn")


class Settings:
    """Resolved inputs of one command: config sections, seed, scenario and run directory."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.cfg = art.load_config(args.config) if args.config else {}
        self.inputs: dict[str, str] = {}
        if args.config:
            self.inputs[str(Path(args.config).resolve())] = art.file_digest(args.config)
        self.seed = self._seed(args.seed)
        self.cfg.setdefault("run", {})["seed"] = self.seed
        name = args.scenario or art.get(self.cfg, "run", "scenario") or DEFAULT_SCENARIO.get(command, "S1")
        self.cfg["run"]["scenario"] = name
        out = args.out or f"runs/{command}-{name}-seed{self.seed}"
        self.out = Path(out).resolve()
        self.outputs: list[Path] = []

    def _seed(self, flag):
        if flag is not None:
            return int(flag)
        env = os.environ.get(SEED_ENV)
        if env not in (None, ""):
            try:
                return int(env)
            except ValueError:
                raise art.ConfigError(f"environment variable {SEED_ENV}={env!r} is not an integer") from None
        return int(art.get(self.cfg, "run", "seed", DEFAULT_SEED))

    def get(self, section, key, default=None):
        return art.get(self.cfg, section, key, default)

    def record(self, section, key, value):
        self.cfg.setdefault(section, {})[key] = value

    def add_input(self, path):
        p = Path(path).resolve()
        self.inputs[str(p)] = art.file_digest(p)

    def path(self, rel) -> Path:
        p = self.out / rel
        self.outputs.append(p)
        return p

    # -- scenario ---------------------------------------------------------

    def entry(self) -> scn.ScenarioEntry:
        file = self.get("scenario", "file")
        if file:
            self.add_input(file)
            entry = scn.ScenarioEntry(art.read_scenario(file))
        else:
            registry = scn.builtin_scenarios()
            name = self.cfg["run"]["scenario"]
            if name not in registry:
                raise art.ConfigError(f"unknown scenario {name!r} (built-in: {', '.join(registry)})")
            entry = registry[name]
        source = self.get("scenario", "source")
        if source is not None:
            if len(source) % 2:
                raise art.ConfigError("[scenario] source needs x y pairs")
            entry = scn.scenario_with_source(entry, np.reshape(source, (-1, 2)))
        k = self.get("scenario", "k")
        if k is not None:
            entry = replace(entry, scenario=replace(entry.scenario, k=k))
        grid = {key: self.get("grid", key) for key in ("nx", "ny", "dt", "cfl")}
        entry = replace(entry, grid=replace(entry.grid, **{k: v for k, v in grid.items() if v is not None}))
        sensors = {key: self.get("observations", key) for key in ("n_side", "noise_sd", "margin")}
        entry = replace(entry, sensors=replace(entry.sensors, **{k: v for k, v in sensors.items() if v is not None}))
        for key in ("nx", "ny", "dt", "cfl"):
            self.record("grid", key, getattr(entry.grid, key))
        for key in ("n_side", "noise_sd", "margin"):
            self.record("observations", key, getattr(entry.sensors, key))
        return entry

    # -- training configuration -------------------------------------------

    def _arch(self, default: nw.ArchitectureSpec) -> nw.ArchitectureSpec:
        keys = ("hidden_width", "depth", "block_kind", "activation", "sin_input_layer", "output_heads", "sin_features")
        over = {k: self.get("architecture", k) for k in keys if self.get("architecture", k) is not None}
        spec = replace(default, **over)
        for k in keys:
            self.record("architecture", k, getattr(spec, k))
        return spec

    def _weights(self, default: LossWeights) -> LossWeights:
        over = {k: self.get("weights", k) for k in ("pde", "data", "bc", "fo") if self.get("weights", k) is not None}
        w = replace(default, **over)
        for k in ("pde", "data", "bc", "fo"):
            self.record("weights", k, getattr(w, k))
        return w

    def _schedule(self, default: Schedule) -> Schedule:
        preset = self.get("schedule", "preset")
        if preset is not None:
            if preset not in SCHEDULES:
                raise art.ConfigError(f"[schedule] unknown preset {preset!r} (known: {', '.join(SCHEDULES)})")
            default = SCHEDULES[preset]
        sched = Schedule(self.get("schedule", "adam_epochs", default.adam_epochs),
                         self.get("schedule", "lbfgs_epochs", default.lbfgs_epochs))
        self.cfg.get("schedule", {}).pop("preset", None)
        self.record("schedule", "adam_epochs", sched.adam_epochs)
        self.record("schedule", "lbfgs_epochs", sched.lbfgs_epochs)
        return sched

    def _optim(self) -> tuple[AdamHyper, LBFGSHyper]:
        a, l = AdamHyper(), LBFGSHyper()
        a = AdamHyper(self.get("optimizer", "lr", a.lr), self.get("optimizer", "beta1", a.beta1),
                      self.get("optimizer", "beta2", a.beta2), self.get("optimizer", "eps", a.eps))
        l = replace(l, history=self.get("optimizer", "history", l.history), c1=self.get("optimizer", "c1", l.c1),
                    c2=self.get("optimizer", "c2", l.c2), max_ls=self.get("optimizer", "max_line_search", l.max_ls))
        for k, v in (("lr", a.lr), ("beta1", a.beta1), ("beta2", a.beta2), ("eps", a.eps), ("history", l.history),
                     ("c1", l.c1), ("c2", l.c2), ("max_line_search", l.max_ls)):
            self.record("optimizer", k, v)
        return a, l

    def forward_config(self) -> scn.ForwardConfig:
        d = scn.ForwardConfig()
        adam, lbfgs = self._optim()
        fc = scn.ForwardConfig(
            arch=self._arch(d.arch), weights=self._weights(d.weights), schedule=self._schedule(d.schedule),
            n_collocation=self.get("collocation", "n_interior", d.n_collocation),
            n_boundary=self.get("collocation", "n_boundary", d.n_boundary),
            n_initial=self.get("collocation", "n_initial", d.n_initial),
            n_snapshots=self.get("forward", "n_snapshots", d.n_snapshots), adam=adam, lbfgs=lbfgs,
            mse_threshold=self.get("forward", "mse_threshold", d.mse_threshold))
        n_initial = fc.n_boundary if fc.n_initial is None else fc.n_initial
        for k, v in (("n_interior", fc.n_collocation), ("n_boundary", fc.n_boundary), ("n_initial", n_initial)):
            self.record("collocation", k, v)
        self.record("forward", "n_snapshots", fc.n_snapshots)
        self.record("forward", "mse_threshold", fc.mse_threshold)
        return fc

    def inverse_config(self) -> scn.PinnConfig:
        d = scn.desk_inverse_config()
        adam, lbfgs = self._optim()
        pc = scn.PinnConfig(
            arch=self._arch(d.arch), weights=self._weights(d.weights), schedule=self._schedule(d.schedule),
            n_collocation=self.get("collocation", "n_interior", d.n_collocation),
            n_boundary=self.get("collocation", "n_boundary", d.n_boundary),
            n_initial=self.get("collocation", "n_initial", d.n_initial),
            source_init=self.get("inverse", "source_init", d.source_init), adam=adam, lbfgs=lbfgs,
            threshold=self.get("inverse", "threshold", d.threshold),
            auto_weights=self.get("weights", "auto", d.auto_weights),
            initial_points=self.get("inverse", "initial_points", d.initial_points),
            initial_weight=self.get("inverse", "initial_weight", d.initial_weight))
        for k, v in (("n_interior", pc.n_collocation), ("n_boundary", pc.n_boundary), ("n_initial", pc.n_initial)):
            self.record("collocation", k, v)
        self.record("weights", "auto", pc.auto_weights)
        for k in ("source_init", "threshold", "initial_points", "initial_weight"):
            self.record("inverse", k, getattr(pc, k))
        return pc

    def manifest(self, status: str = "ok") -> art.RunManifest:
        outputs = sorted({str(p.relative_to(self.out)) for p in self.outputs})
        m = art.RunManifest(self.command, art.version_string(), art.stringify_config(self.cfg),
                            {"seed": self.seed}, dict(sorted(self.inputs.items())), outputs, status)
        m.write(self.out)
        return m


# -- commands ------------------------------------------------------------------


def _write_common(st: Settings, report, entry: scn.ScenarioEntry, to_physical=None):
    report.write_csv(st.path("losses.csv"), to_physical=to_physical)
    nw.save(report.net, st.path("network.npz"))
    art.write_scenario(entry.scenario, st.path("scenario.ini"))
    if isinstance(entry.scenario.wind, ph.GriddedWind):
        st.path("scenario.wind.csv")
    art.plot_losses(art.read_loss_csv(st.out / "losses.csv"), st.path("plots/losses.png"))


def cmd_forward(st: Settings) -> int:
    entry = st.entry()
    fc = st.forward_config()
    res = scn.run_forward(entry, fc, st.seed)
    _write_common(st, res.report, entry)
    art.write_fields(res.reference, st.path("fields/reference"))
    art.write_fields(res.prediction, st.path("fields/prediction"))
    for k, t in enumerate(res.reference.times):
        art.plot_field_triplet(res.prediction.fields[k], res.reference.fields[k], res.reference.xs,
                               res.reference.ys, t, st.path(f"plots/snapshot_{k:03d}.png"))
    lines = [f"forward run: scenario {entry.scenario.name}, seed {st.seed}",
             f"scales C={res.scales.C!r} L={res.scales.L!r} U={res.scales.U!r}",
             f"{'t':>10}  {'mse':>10}  {'mae':>10}"]
    lines += [f"{t:>10.4g}  {m:>10.3e}  {a:>10.3e}" for t, m, a in zip(res.reference.times, res.mse, res.mae)]
    if res.report.diverged:
        ev = res.report.divergence[0]
        lines.append(f"DIVERGED at epoch {ev.epoch} ({ev.phase}): {ev.message}; artifacts are partial")
    if res.passed:
        lines.append(f"SUCCESS: MSE below {fc.mse_threshold:g} at every snapshot (max {res.mse.max():.3e})")
    else:
        lines.append(f"MSE threshold {fc.mse_threshold:g} not met at every snapshot (max {res.mse.max():.3e})")
    text = "\n".join(lines)
    art.write_text(st.path("report.txt"), text + "\n")
    print(text)
    st.manifest("diverged" if res.report.diverged else "ok")
    if res.report.diverged:
        return EXIT_DIVERGED
    return EXIT_OK if res.passed else EXIT_FAILED


def _observations(st: Settings, entry: scn.ScenarioEntry):
    """Ingested observations (checked before any training) or ``None`` to synthesize."""
    file = st.get("observations", "file")
    if not file:
        return entry, None
    conv = st.get("observations", "coordinate_convention")
    obs, fragment = scn.ingest_observations(file, st.get("observations", "format", "csv"), conv,
                                            entry.scenario.domain, st.get("observations", "wind_file"))
    st.add_input(file)
    if st.get("observations", "wind_file"):
        st.add_input(st.get("observations", "wind_file"))
    if "wind" in fragment:
        entry = replace(entry, scenario=replace(entry.scenario, wind=fragment["wind"]))
    return entry, obs


def cmd_inverse(st: Settings) -> int:
    entry = st.entry()
    entry, obs = _observations(st, entry)
    pc = st.inverse_config()
    est = scn.run_inverse(entry, pc, st.seed, observations=obs)
    L = est.scales.L if not entry.scenario.nondimensional else 1.0
    _write_common(st, est.report, entry, to_physical=lambda c: np.asarray(c) * L)
    art.write_json(est.to_dict(), st.path("estimate.json"))
    if est.trajectory is not None:
        art.write_trajectory_csv(est.trajectory, st.path("trajectory.csv"))
        art.plot_trajectory(est.trajectory, est.truth, entry.scenario.domain, st.path("plots/trajectory.png"))
    lines = [f"inverse run: scenario {entry.scenario.name}, seed {st.seed}"]
    for i, p in enumerate(est.predicted):
        line = f"source {i}: predicted ({p[0]:.4f}, {p[1]:.4f})"
        if est.truth is not None:
            t, sq = est.truth[i], est.squared_error[i]
            line += f"  truth ({t[0]:g}, {t[1]:g})  mse ({sq[0]:.3e}, {sq[1]:.3e})"
        lines.append(line)
    if est.report.diverged:
        ev = est.report.divergence[0]
        lines.append(f"DIVERGED at epoch {ev.epoch} ({ev.phase}): {ev.message}; estimate is from the last finite step")
    lines.append(f"{'PASS' if est.passed else 'FAIL'}: every coordinate within {est.threshold:g}")
    text = "\n".join(lines)
    art.write_text(st.path("report.txt"), text + "\n")
    print(text)
    st.manifest("diverged" if est.report.diverged else "ok")
    if est.report.diverged:
        return EXIT_DIVERGED
    return EXIT_OK if est.passed else EXIT_FAILED


def cmd_verify(st: Settings) -> int:
    pc = st.inverse_config()
    workers = st.get("run", "workers", 1)
    st.record("run", "workers", workers)
    report = scn.verify_suite(pc, st.seed, workers=workers, base=st.entry())
    report.write_csv(st.path("verification.csv"))
    text = report.table()
    art.write_text(st.path("verification.txt"), text + "\n")
    print(text)
    st.manifest()
    return EXIT_OK


def cmd_reference(st: Settings) -> int:
    entry = st.entry()
    times = st.get("reference", "times")
    if times is None:
        times = scn.snapshot_times(entry.scenario, st.get("forward", "n_snapshots", scn.ForwardConfig().n_snapshots))
    st.record("reference", "times", tuple(float(t) for t in times))
    fs = rs.solve_forward(entry.scenario, entry.grid, times=times)
    art.write_fields(fs, st.path("fields/reference"))
    art.write_scenario(entry.scenario, st.path("scenario.ini"))
    if isinstance(entry.scenario.wind, ph.GriddedWind):
        st.path("scenario.wind.csv")
    mass = rs.total_mass(fs)
    lines = [f"reference run: scenario {entry.scenario.name}, grid {entry.grid.nx}x{entry.grid.ny}",
             f"{'t':>10}  {'max c':>12}  {'mass':>12}"]
    lines += [f"{t:>10.4g}  {f.max():>12.5e}  {m:>12.5e}" for t, f, m in zip(fs.times, fs.fields, mass)]
    text = "\n".join(lines)
    art.write_text(st.path("report.txt"), text + "\n")
    print(text)
    st.manifest()
    return EXIT_OK


def cmd_study(st: Settings) -> int:
    pc = st.inverse_config()
    scale = st.get("study", "epoch_scale", 1.0)
    frac = st.get("study", "lbfgs_fraction", 0.25)
    st.record("study", "epoch_scale", scale)
    st.record("study", "lbfgs_fraction", frac)
    rows = scn.epoch_collocation_study(pc, st.seed, epoch_scale=scale, lbfgs_fraction=frac, entry=st.entry())
    scn.write_study_csv(rows, st.path("study.csv"))
    lines = [f"{'epochs':>7}  {'points':>6}  {'x':>9}  {'y':>9}  {'mse_x':>10}  {'mse_y':>10}"]
    lines += [f"{r.epochs:>7}  {r.points:>6}  {r.x_pred:>9.4f}  {r.y_pred:>9.4f}  {r.mse_x:>10.3e}  {r.mse_y:>10.3e}"
              for r in rows]
    text = "\n".join(lines)
    art.write_text(st.path("study.txt"), text + "\n")
    print(text)
    st.manifest()
    return EXIT_OK


def cmd_gradcheck(st: Settings) -> int:
    results = gradcheck.run(st.seed)
    text = gradcheck.format_report(results)
    art.write_text(st.path("gradcheck.txt"), text + "\n")
    print(text)
    ok = all(r.passed for r in results)
    st.manifest("ok" if ok else "failed")
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {"forward": cmd_forward, "inverse": cmd_inverse, "verify": cmd_verify,
            "reference": cmd_reference, "study": cmd_study, "gradcheck": cmd_gradcheck}

HELP = {
    "forward": "train a forward PINN and compare it with the reference solver",
    "inverse": "recover source coordinates from observations",
    "verify": "run the ten-coordinate verification suite",
    "reference": "run the finite-difference reference solver only",
    "study": "run the epoch / collocation-count study",
    "gradcheck": "check every gradient against finite differences",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file, or a run manifest to repeat")
    common.add_argument("--seed", type=int, metavar="N", help=f"random seed (overrides ${SEED_ENV})")
    common.add_argument("--out", metavar="DIR", help="run directory (default runs/COMMAND-SCENARIO-seedN)")
    common.add_argument("--scenario", metavar="NAME", help="built-in scenario name")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="plumepinn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        st = Settings(args.command, args)
        st.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](st)
    except (art.ConfigError, ConfigurationError, scn.IngestError, ph.PhysicsError, nw.ArchitectureError,
            rs.SolverError) as exc:
        print(f"plumepinn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
