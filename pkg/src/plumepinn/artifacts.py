"""Run artifacts: configuration files, scenario files, field exports, manifests and plots.

Every writer goes through :func:`atomic_write` (temporary file, then
rename). Floats are written with ``repr`` so CSV round trips are exact.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import physics as ph
from . import refsolver as rs


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, section and key."""


# -- atomic writes ----------------------------------------------------------


def atomic_write(path, writer: Callable, mode: str = "w") -> Path:
    """Call ``writer(fh)`` on a temporary sibling of ``path``, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    kw = {"newline": ""} if "b" not in mode else {}
    try:
        with open(tmp, mode, **kw) as fh:
            writer(fh)
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def write_text(path, text: str) -> Path:
    return atomic_write(path, lambda fh: fh.write(text))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


# -- value parsers ---------------------------------------------------------


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(";", ",").replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


# -- run configuration -----------------------------------------------------

CONFIG_SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "run": {"seed": int, "scenario": str, "workers": int, "init_checkpoint": str},
    "scenario": {"file": str, "source": parse_floats, "k": float},
    "grid": {"nx": int, "ny": int, "dt": float, "cfl": float},
    "architecture": {"hidden_width": int, "depth": int, "block_kind": str, "activation": str,
                     "sin_input_layer": parse_bool, "output_heads": str, "sin_features": int},
    "weights": {"pde": float, "data": float, "bc": float, "fo": float, "auto": parse_bool},
    "schedule": {"preset": str, "adam_epochs": int, "lbfgs_epochs": int},
    "optimizer": {"lr": float, "beta1": float, "beta2": float, "eps": float, "history": int,
                  "c1": float, "c2": float, "max_line_search": int},
    "collocation": {"n_interior": int, "n_boundary": int, "n_initial": int},
    "forward": {"n_snapshots": int, "mse_threshold": float},
    "inverse": {"source_init": str, "threshold": float, "initial_points": int, "initial_weight": float},
    "observations": {"file": str, "format": str, "coordinate_convention": str, "wind_file": str,
                     "n_side": int, "noise_sd": float, "margin": float},
    "reference": {"times": parse_floats},
    "study": {"epoch_scale": float, "lbfgs_fraction": float},
}

# keys whose values are file paths, resolved relative to the config file
PATH_KEYS = {("run", "init_checkpoint"), ("scenario", "file"), ("observations", "file"),
             ("observations", "wind_file")}


def parse_config_text(text: str, origin: str = "<config>", base: Path | None = None) -> dict[str, dict]:
    """Parse and validate sectioned ``key = value`` text against :data:`CONFIG_SCHEMA`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    out: dict[str, dict] = {}
    for section in cp.sections():
        schema = CONFIG_SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"{origin}: unknown section [{section}] "
                              f"(known: {', '.join(sorted(CONFIG_SCHEMA))})")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{origin}: [{section}] unknown key {key!r} "
                                  f"(known: {', '.join(sorted(schema))})")
            try:
                value = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{origin}: [{section}] {key} = {raw!r}: {exc}") from None
            if (section, key) in PATH_KEYS and base is not None and not Path(value).is_absolute():
                value = str((base / value).resolve())
            out[section][key] = value
    return out


def load_config(path) -> dict[str, dict]:
    """Read a run configuration, or the configuration stored in a run manifest (``.json``)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        manifest = RunManifest.read(path)
        return parse_config_text(config_to_text(manifest.config), str(path), path.parent)
    return parse_config_text(path.read_text(), str(path), path.parent.resolve())


def config_to_text(cfg: dict[str, dict]) -> str:
    lines = []
    for section in CONFIG_SCHEMA:
        items = [f"{k} = {_fmt(v)}" for k, v in cfg.get(section, {}).items() if v is not None]
        if items:
            lines += [f"[{section}]", *items, ""]
    return "\n".join(lines)


def get(cfg: dict, section: str, key: str, default=None):
    return cfg.get(section, {}).get(key, default)


# -- scenario files --------------------------------------------------------


def write_wind_csv(wind: ph.GriddedWind, path) -> Path:
    def w(fh):
        out = csv.writer(fh)
        out.writerow(["t", "x", "y", "u", "v"])
        for it, t in enumerate(wind.times):
            for iy, y in enumerate(wind.ys):
                for ix, x in enumerate(wind.xs):
                    out.writerow([repr(float(t)), repr(float(x)), repr(float(y)),
                                  repr(float(wind.u[it, iy, ix])), repr(float(wind.v[it, iy, ix]))])
    return atomic_write(path, w)


def write_scenario(scenario: ph.Scenario, path, wind_name: str | None = None) -> Path:
    """Write ``scenario`` as a sectioned text file; gridded wind goes to a sibling CSV."""
    path = Path(path)
    sc = scenario
    lines = ["[scenario]", f"name = {sc.name}", f"domain = {_fmt(sc.domain)}",
             f"time_window = {_fmt(sc.time_window)}", f"k = {_fmt(float(sc.k))}", f"bc = {sc.bc}",
             f"ic = {sc.ic}", f"observation_times = {_fmt(sc.observation_times)}",
             f"nondimensional = {_fmt(bool(sc.nondimensional))}", "", "[wind]"]
    wind = sc.wind
    if isinstance(wind, ph.ConstantWind):
        lines += ["kind = constant", f"u = {_fmt(float(wind.u))}", f"v = {_fmt(float(wind.v))}"]
    elif isinstance(wind, ph.RotatingWind):
        lines += ["kind = rotating", f"a = {_fmt(float(wind.a))}", f"b = {_fmt(float(wind.b))}",
                  f"omega = {_fmt(float(wind.omega))}"]
    elif isinstance(wind, ph.GriddedWind):
        wind_name = wind_name or path.stem + ".wind.csv"
        write_wind_csv(wind, path.parent / wind_name)
        lines += ["kind = gridded", f"file = {wind_name}"]
    else:
        raise ConfigError(f"cannot serialize wind of type {type(wind).__name__}")
    src = sc.sources
    centers = "; ".join(f"{_fmt(float(x))} {_fmt(float(y))}" for x, y in src.centers)
    lines += ["", "[source]", f"centers = {centers}", f"amplitudes = {_fmt(src.amplitudes)}",
              f"sigma = {_fmt(float(src.sigma))}", f"trainable = {', '.join(src.trainable)}"]
    if sc.scales is not None:
        lines += ["", "[scales]", f"C = {_fmt(sc.scales.C)}", f"L = {_fmt(sc.scales.L)}",
                  f"U = {_fmt(sc.scales.U)}"]
    return write_text(path, "\n".join(lines) + "\n")


_SCENARIO_SCHEMA = {
    "scenario": {"name", "domain", "time_window", "k", "bc", "ic", "observation_times", "nondimensional"},
    "wind": {"kind", "u", "v", "a", "b", "omega", "file", "convention"},
    "source": {"centers", "amplitudes", "sigma", "trainable"},
    "scales": {"c", "l", "u"},
}


def read_scenario(path) -> ph.Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in cp.sections():
        if section not in _SCENARIO_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in cp[section]:
            if key not in _SCENARIO_SCHEMA[section]:
                raise ConfigError(f"{path}: [{section}] unknown key {key!r}")
    for section in ("scenario", "wind", "source"):
        if section not in cp:
            raise ConfigError(f"{path}: missing section [{section}]")

    def need(section, key, conv=str):
        if key not in cp[section]:
            raise ConfigError(f"{path}: [{section}] missing key {key!r}")
        try:
            return conv(cp[section][key])
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None

    s, w = "scenario", "wind"
    kind = need(w, "kind")
    if kind == "constant":
        wind = ph.ConstantWind(need(w, "u", float), need(w, "v", float))
    elif kind == "rotating":
        wind = ph.RotatingWind(need(w, "a", float), need(w, "b", float), need(w, "omega", float))
    elif kind == "gridded":
        from .scenarios import read_wind_csv
        wind = read_wind_csv(path.parent / need(w, "file"), cp[w].get("convention", "xy"))
    else:
        raise ConfigError(f"{path}: [wind] unknown kind {kind!r}")
    rows = [r for r in need("source", "centers").split(";") if r.strip()]
    centers = [parse_floats(r) for r in rows]
    if any(len(c) != 2 for c in centers):
        raise ConfigError(f"{path}: [source] centers must be 'x y; x y; ...'")
    trainable = tuple(t.strip() for t in cp["source"].get("trainable", "x, y").split(",") if t.strip())
    source = ph.SourceModel(centers, need("source", "amplitudes", parse_floats),
                            need("source", "sigma", float), trainable)
    scales = None
    if "scales" in cp:
        scales = ph.CharacteristicScales(float(cp["scales"]["c"]), float(cp["scales"]["l"]),
                                         float(cp["scales"]["u"]))
    try:
        return ph.Scenario(need(s, "name"), need(s, "domain", parse_floats), need(s, "time_window", parse_floats),
                           need(s, "k", float), wind, source, scales, cp[s].get("bc", "dirichlet0"),
                           cp[s].get("ic", "zero"), parse_floats(cp[s].get("observation_times", "")),
                           parse_bool(cp[s].get("nondimensional", "false")))
    except ph.PhysicsError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- field series export ---------------------------------------------------


def write_fields(fs: rs.FieldSeries, directory) -> Path:
    """One ``snapshot_KKK.csv`` (x, y, c; x varies fastest) per time plus ``index.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    X, Y = fs.mesh()
    xs, ys = X.ravel(), Y.ravel()
    names = []
    for k, t in enumerate(fs.times):
        name = f"snapshot_{k:03d}.csv"
        c = fs.fields[k].ravel()

        def w(fh, c=c):
            out = csv.writer(fh)
            out.writerow(["x", "y", "c"])
            out.writerows(zip(map(repr, xs.tolist()), map(repr, ys.tolist()), map(repr, c.tolist())))
        atomic_write(d / name, w)
        names.append(name)

    def idx(fh):
        out = csv.writer(fh)
        out.writerow(["snapshot", "t", "file", "nx", "ny"])
        for k, (t, name) in enumerate(zip(fs.times, names)):
            out.writerow([k, repr(float(t)), name, len(fs.xs), len(fs.ys)])
    return atomic_write(d / "index.csv", idx)


def read_fields(directory) -> rs.FieldSeries:
    d = Path(directory)
    with open(d / "index.csv", newline="") as fh:
        index = list(csv.DictReader(fh))
    if not index:
        raise ConfigError(f"{d}: empty field index")
    times, fields = [], []
    xs = ys = None
    for row in index:
        nx, ny = int(row["nx"]), int(row["ny"])
        data = np.loadtxt(d / row["file"], delimiter=",", skiprows=1, ndmin=2)
        if data.shape != (nx * ny, 3):
            raise ConfigError(f"{d / row['file']}: expected {nx * ny} rows of x,y,c")
        xs, ys = data[:nx, 0], data[::nx, 1]
        times.append(float(row["t"]))
        fields.append(data[:, 2].reshape(ny, nx))
    return rs.FieldSeries(np.array(times), xs, ys, np.array(fields))


# -- loss history, trajectories and estimates --------------------------------


def read_loss_csv(path) -> dict[str, np.ndarray]:
    """Columns of a loss-history CSV; ``phase`` stays a string array."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty loss history")
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows]
        out[key] = np.array(vals) if key == "phase" else np.array([float(v) for v in vals])
    return out


def write_trajectory_csv(trajectory: np.ndarray, path) -> Path:
    """Source-coordinate trajectory ``(epochs + 1, n_sources, 2)`` as ``epoch, x0, y0, ...``."""
    traj = np.asarray(trajectory, dtype=np.float64)
    n = traj.shape[1]

    def w(fh):
        out = csv.writer(fh)
        out.writerow(["epoch"] + [f"{a}{i}" for i in range(n) for a in ("x", "y")])
        for k, row in enumerate(traj):
            out.writerow([k] + [repr(float(v)) for v in row.ravel()])
    return atomic_write(path, w)


def read_trajectory_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:].reshape(len(data), -1, 2)


def write_json(obj, path) -> Path:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- manifest ----------------------------------------------------------------


def version_string() -> str:
    """``git describe``-style version of the package checkout, else the release version."""
    here = Path(__file__).resolve().parent
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    version: str
    config: dict[str, dict[str, str]]
    seeds: dict[str, int]
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    status: str = "ok"

    FILENAME = "manifest.json"

    def write(self, run_dir) -> Path:
        return write_json(asdict(self), Path(run_dir) / self.FILENAME)

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        data = json.loads(path.read_text())
        return cls(**data)


def stringify_config(cfg: dict[str, dict]) -> dict[str, dict[str, str]]:
    return {s: {k: _fmt(v) for k, v in keys.items() if v is not None} for s, keys in cfg.items() if keys}


# -- plots -------------------------------------------------------------------


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_losses(history: dict[str, np.ndarray], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("total", "pde", "data", "bc", "fo"):
        vals = history.get(key)
        if vals is not None and np.any(vals > 0):
            ax.semilogy(history["epoch"], np.where(vals > 0, vals, np.nan), label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    atomic_write(path, lambda fh: fig.savefig(fh, format="png", dpi=100), mode="wb")
    plt.close(fig)
    return Path(path)


def plot_trajectory(trajectory: np.ndarray, truth, domain, path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    traj = np.asarray(trajectory)
    epochs = np.arange(len(traj))
    for i in range(traj.shape[1]):
        for j, name in enumerate("xy"):
            axes[j].plot(epochs, traj[:, i, j], label=f"{name}{i}")
            if truth is not None:
                axes[j].axhline(np.atleast_2d(truth)[i, j], ls="--", color="k", lw=0.8)
    lims = (domain[0], domain[1]), (domain[2], domain[3])
    for j, name in enumerate("xy"):
        axes[j].set_xlabel("epoch")
        axes[j].set_ylabel(f"{name} estimate")
        axes[j].set_ylim(*lims[j])
    fig.tight_layout()
    atomic_write(path, lambda fh: fig.savefig(fh, format="png", dpi=100), mode="wb")
    plt.close(fig)
    return Path(path)


def plot_field_triplet(pred: np.ndarray, ref: np.ndarray, xs, ys, t: float, path) -> Path:
    """Prediction, reference and absolute error heat maps side by side."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    extent = (xs[0], xs[-1], ys[0], ys[-1])
    lo, hi = min(pred.min(), ref.min()), max(pred.max(), ref.max())
    for ax, data, title in zip(axes, (pred, ref, np.abs(pred - ref)), ("prediction", "reference", "|error|")):
        kw = {"vmin": lo, "vmax": hi} if title != "|error|" else {}
        im = ax.imshow(data, origin="lower", extent=extent, cmap="viridis", **kw)
        ax.set_title(f"{title}, t = {t:g}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    atomic_write(path, lambda fh: fig.savefig(fh, format="png", dpi=100), mode="wb")
    plt.close(fig)
    return Path(path)

