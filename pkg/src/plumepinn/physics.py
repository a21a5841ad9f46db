"""Advection-diffusion physics: scenarios, scaling, wind fields, sources, residual.

The governing equation is

    c_t + u c_x + v c_y - k (c_xx + c_yy) = s

With characteristic scales C, L, U the scaled variables are ``c/C``,
``x/L``, ``u/U`` and ``t U / L``, the diffusion coefficient becomes
``1/Pe`` with ``Pe = L U / k`` and the source becomes ``s L / (C U)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np


class PhysicsError(ValueError):
    pass


@dataclass(frozen=True)
class CharacteristicScales:
    C: float = 1.0
    L: float = 1.0
    U: float = 1.0

    def __post_init__(self):
        for name in ("C", "L", "U"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise PhysicsError(f"characteristic scale {name} must be positive, got {v}")


# -- wind fields ----------------------------------------------------------


@dataclass(frozen=True)
class ConstantWind:
    u: float
    v: float
    kind: str = field(default="constant", init=False)

    def at(self, x, y, t):
        shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(t)).shape
        return np.full(shape, float(self.u)), np.full(shape, float(self.v))

    def scaled(self, L: float, U: float) -> "ConstantWind":
        return ConstantWind(self.u / U, self.v / U)

    def unscaled(self, L: float, U: float) -> "ConstantWind":
        return ConstantWind(self.u * U, self.v * U)

    def params(self) -> dict:
        return {"u": self.u, "v": self.v}


@dataclass(frozen=True)
class RotatingWind:
    """Spatially uniform ``(a + b cos(w t), a + b sin(w t))``."""

    a: float = 0.2
    b: float = 0.5
    omega: float = math.pi / 4
    kind: str = field(default="analytic", init=False)

    def at(self, x, y, t):
        shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(t)).shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), shape)
        wt = self.omega * t
        return self.a + self.b * np.cos(wt), self.a + self.b * np.sin(wt)

    def scaled(self, L: float, U: float) -> "RotatingWind":
        return RotatingWind(self.a / U, self.b / U, self.omega * L / U)

    def unscaled(self, L: float, U: float) -> "RotatingWind":
        return RotatingWind(self.a * U, self.b * U, self.omega * U / L)

    def params(self) -> dict:
        return {"family": "rotating", "a": self.a, "b": self.b, "omega": self.omega}


@dataclass(frozen=True, eq=False)
class GriddedWind:
    """Wind samples on a regular grid: ``u[it, iy, ix]``.

    Interpolation is bilinear in space and linear in time; queries outside
    the sampled box raise :class:`PhysicsError`.
    """

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kind: str = field(default="gridded", init=False)

    def __post_init__(self):
        for name in ("times", "xs", "ys", "u", "v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shape = (len(self.times), len(self.ys), len(self.xs))
        if self.u.shape != shape or self.v.shape != shape:
            raise PhysicsError(f"gridded wind arrays must have shape {shape}")
        for axis in (self.times, self.xs, self.ys):
            if len(axis) > 1 and np.any(np.diff(axis) <= 0):
                raise PhysicsError("gridded wind axes must be strictly increasing")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise PhysicsError("gridded wind contains non-finite values")

    @staticmethod
    def _locate(axis, q, label):
        q = np.asarray(q, dtype=np.float64)
        tol = 1e-9 * max(1.0, float(np.abs(axis).max()))
        if np.any(q < axis[0] - tol) or np.any(q > axis[-1] + tol):
            raise PhysicsError(f"{label} query outside wind coverage [{axis[0]}, {axis[-1]}]")
        if len(axis) == 1:
            return np.zeros(q.shape, dtype=int), np.zeros(q.shape)
        i = np.clip(np.searchsorted(axis, q, side="right") - 1, 0, len(axis) - 2)
        w = np.clip((q - axis[i]) / (axis[i + 1] - axis[i]), 0.0, 1.0)
        return i, w

    def _interp(self, arr, x, y, t):
        x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
        it, wt = self._locate(self.times, t, "time")
        iy, wy = self._locate(self.ys, y, "y")
        ix, wx = self._locate(self.xs, x, "x")
        it1 = np.minimum(it + 1, len(self.times) - 1)
        iy1 = np.minimum(iy + 1, len(self.ys) - 1)
        ix1 = np.minimum(ix + 1, len(self.xs) - 1)

        def plane(k):
            return ((1 - wy) * ((1 - wx) * arr[k, iy, ix] + wx * arr[k, iy, ix1])
                    + wy * ((1 - wx) * arr[k, iy1, ix] + wx * arr[k, iy1, ix1]))

        return (1 - wt) * plane(it) + wt * plane(it1)

    def at(self, x, y, t):
        return self._interp(self.u, x, y, t), self._interp(self.v, x, y, t)

    def scaled(self, L: float, U: float) -> "GriddedWind":
        return GriddedWind(self.times * U / L, self.xs / L, self.ys / L, self.u / U, self.v / U)

    def unscaled(self, L: float, U: float) -> "GriddedWind":
        return GriddedWind(self.times * L / U, self.xs * L, self.ys * L, self.u * U, self.v * U)

    def params(self) -> dict:
        return {"nt": len(self.times), "nx": len(self.xs), "ny": len(self.ys)}


WindFieldSpec = Union[ConstantWind, RotatingWind, GriddedWind]


def wind_at(spec: WindFieldSpec, x, y, t):
    """Wind components ``(u, v)`` at the query points."""
    u, v = spec.at(x, y, t)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise PhysicsError("wind evaluated to non-finite values")
    return u, v


def mean_wind_speed(spec: WindFieldSpec, t0: float, t1: float, domain=None, n: int = 401) -> float:
    """Time-averaged mean wind magnitude over ``[t0, t1]`` (domain-averaged for gridded winds)."""
    ts = np.linspace(t0, t1, n) if t1 > t0 else np.array([t0])
    if isinstance(spec, GriddedWind):
        if domain is None:
            xs, ys = spec.xs, spec.ys
        else:
            xs = np.linspace(domain[0], domain[1], 9)
            ys = np.linspace(domain[2], domain[3], 9)
        X, Y, T = np.meshgrid(xs, ys, ts, indexing="ij")
        u, v = spec.at(X, Y, T)
    else:
        u, v = spec.at(0.0, 0.0, ts)
    speed = np.hypot(u, v)
    if len(ts) == 1:
        return float(np.mean(speed))
    # trapezoid in time, plain mean over the spatial samples
    speed_t = speed.reshape(-1, len(ts)).mean(axis=0)
    return float(np.trapezoid(speed_t, ts) / (ts[-1] - ts[0]))


# -- sources --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SourceModel:
    """Sum of isotropic Gaussian emitters with a shared width ``sigma``."""

    centers: np.ndarray
    amplitudes: np.ndarray
    sigma: float
    trainable: tuple[str, ...] = ("x", "y")

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        if a.size == 1 and c.shape[0] > 1:
            a = np.full(c.shape[0], float(a[0]))
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "trainable", tuple(self.trainable))
        if c.shape[1] != 2 or a.shape != (c.shape[0],):
            raise PhysicsError("centers must be (n, 2) with one amplitude per source")
        if not self.sigma > 0:
            raise PhysicsError(f"source width sigma must be positive, got {self.sigma}")
        if np.any(a < 0):
            raise PhysicsError("source amplitudes must be nonnegative")
        bad = set(self.trainable) - {"x", "y", "amplitude"}
        if bad:
            raise PhysicsError(f"unknown trainable source fields {sorted(bad)}")

    @property
    def n_sources(self) -> int:
        return self.centers.shape[0]

    def with_centers(self, centers) -> "SourceModel":
        return replace(self, centers=np.array(centers, dtype=np.float64))

    def __eq__(self, other):
        return (isinstance(other, SourceModel) and np.array_equal(self.centers, other.centers)
                and np.array_equal(self.amplitudes, other.amplitudes)
                and self.sigma == other.sigma and self.trainable == other.trainable)


def source_at(model: SourceModel, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    inv = 1.0 / (2.0 * model.sigma ** 2)
    for (cx, cy), amp in zip(model.centers, model.amplitudes):
        out = out + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) * inv)
    return out


def source_center_gradient(model: SourceModel, x, y) -> np.ndarray:
    """d s / d(center) at the query points; shape (..., n_sources, 2)."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    cx, cy = model.centers[:, 0], model.centers[:, 1]
    s2 = model.sigma ** 2
    bump = model.amplitudes * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s2))
    return np.stack([bump * (x - cx) / s2, bump * (y - cy) / s2], axis=-1)


# -- scenario ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    """A forward/inverse problem definition.

    ``time_window`` is the simulated interval, starting from the initial
    condition. ``observation_times`` lists when sensors report; a scenario
    with a single observation instant has one entry.
    """

    name: str
    domain: tuple[float, float, float, float]
    time_window: tuple[float, float]
    k: float
    wind: WindFieldSpec
    sources: SourceModel
    scales: CharacteristicScales | None = None
    bc: str = "dirichlet0"
    ic: str = "zero"
    observation_times: tuple[float, ...] = ()
    nondimensional: bool = False

    def __post_init__(self):
        x0, x1, y0, y1 = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (x0, x1, y0, y1))
        object.__setattr__(self, "time_window", tuple(float(v) for v in self.time_window))
        object.__setattr__(self, "observation_times", tuple(float(v) for v in self.observation_times))
        if not (x1 > x0 and y1 > y0):
            raise PhysicsError(f"degenerate domain {self.domain}")
        t0, t1 = self.time_window
        if t1 < t0:
            raise PhysicsError(f"time window end {t1} precedes start {t0}")
        if not self.k > 0:
            raise PhysicsError(f"diffusion coefficient must be positive, got {self.k}")
        if self.bc != "dirichlet0":
            raise PhysicsError(f"unsupported boundary condition {self.bc!r}")
        if self.ic != "zero":
            raise PhysicsError(f"unsupported initial condition {self.ic!r}")
        for t in self.observation_times:
            if not t0 - 1e-12 <= t <= t1 + 1e-12:
                raise PhysicsError(f"observation time {t} outside window {self.time_window}")
        cx, cy = self.sources.centers[:, 0], self.sources.centers[:, 1]
        if np.any(cx < x0) or np.any(cx > x1) or np.any(cy < y0) or np.any(cy > y1):
            raise PhysicsError("source centers must lie inside the domain")

    @property
    def side(self) -> float:
        x0, x1, y0, y1 = self.domain
        return max(x1 - x0, y1 - y0)

    @property
    def midpoint(self) -> tuple[float, float]:
        x0, x1, y0, y1 = self.domain
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    def with_scales(self, scales: CharacteristicScales) -> "Scenario":
        return replace(self, scales=scales)


def peclet(scales: CharacteristicScales, k: float) -> float:
    if not k > 0:
        raise PhysicsError(f"diffusion coefficient must be positive, got {k}")
    return scales.L * scales.U / k


def default_scales(scenario: Scenario, c_max: float) -> CharacteristicScales:
    """L = longest domain side, U = mean wind speed over the window, C = ``c_max``."""
    L = scenario.side
    U = mean_wind_speed(scenario.wind, *scenario.time_window, domain=scenario.domain)
    return CharacteristicScales(C=float(c_max), L=L, U=U if U > 0 else 1.0)


@dataclass(frozen=True)
class Scaling:
    """Array conversions between physical and scaled units."""

    scales: CharacteristicScales

    def x(self, v):
        return np.asarray(v, dtype=np.float64) / self.scales.L

    def x_back(self, v):
        return np.asarray(v, dtype=np.float64) * self.scales.L

    def t(self, v):
        return np.asarray(v, dtype=np.float64) * self.scales.U / self.scales.L

    def t_back(self, v):
        return np.asarray(v, dtype=np.float64) * self.scales.L / self.scales.U

    def c(self, v):
        return np.asarray(v, dtype=np.float64) / self.scales.C

    def c_back(self, v):
        return np.asarray(v, dtype=np.float64) * self.scales.C

    def u(self, v):
        return np.asarray(v, dtype=np.float64) / self.scales.U

    def u_back(self, v):
        return np.asarray(v, dtype=np.float64) * self.scales.U

    def s(self, v):
        sc = self.scales
        return np.asarray(v, dtype=np.float64) * sc.L / (sc.C * sc.U)

    def s_back(self, v):
        sc = self.scales
        return np.asarray(v, dtype=np.float64) * sc.C * sc.U / sc.L

    def points(self, xyt):
        xyt = np.asarray(xyt, dtype=np.float64)
        return np.column_stack([self.x(xyt[:, 0]), self.x(xyt[:, 1]), self.t(xyt[:, 2])])

    def points_back(self, xyt):
        xyt = np.asarray(xyt, dtype=np.float64)
        return np.column_stack([self.x_back(xyt[:, 0]), self.x_back(xyt[:, 1]), self.t_back(xyt[:, 2])])


def nondimensionalize(scenario: Scenario) -> Scenario:
    """Scaled copy of ``scenario``; its ``k`` is ``1/Pe`` and its scales are all 1."""
    if scenario.nondimensional:
        return scenario
    if scenario.scales is None:
        raise PhysicsError("scenario has no characteristic scales; call with_scales first")
    sc = Scaling(scenario.scales)
    L, U = scenario.scales.L, scenario.scales.U
    src = scenario.sources
    return replace(
        scenario,
        domain=tuple(float(v) for v in sc.x(scenario.domain)),
        time_window=tuple(float(v) for v in sc.t(scenario.time_window)),
        k=1.0 / peclet(scenario.scales, scenario.k),
        wind=scenario.wind.scaled(L, U),
        sources=replace(src, centers=sc.x(src.centers), amplitudes=sc.s(src.amplitudes),
                        sigma=float(sc.x(src.sigma))),
        observation_times=tuple(float(v) for v in sc.t(scenario.observation_times)),
        nondimensional=True,
    )


def redimensionalize(scaled: Scenario, scales: CharacteristicScales) -> Scenario:
    """Inverse of :func:`nondimensionalize`."""
    if not scaled.nondimensional:
        return scaled
    sc = Scaling(scales)
    src = scaled.sources
    return replace(
        scaled,
        domain=tuple(float(v) for v in sc.x_back(scaled.domain)),
        time_window=tuple(float(v) for v in sc.t_back(scaled.time_window)),
        k=scales.L * scales.U * scaled.k,
        wind=scaled.wind.unscaled(scales.L, scales.U),
        sources=replace(src, centers=sc.x_back(src.centers), amplitudes=sc.s_back(src.amplitudes),
                        sigma=float(sc.x_back(src.sigma))),
        observation_times=tuple(float(v) for v in sc.t_back(scaled.observation_times)),
        scales=scales,
        nondimensional=False,
    )


def residual(c_t, c_x, c_y, c_xx, c_yy, u, v, s, k_or_pe: float, form: str = "dimensional"):
    """Pointwise residual of the advection-diffusion equation.

    ``form="dimensional"`` takes the diffusion coefficient ``k``;
    ``form="nondimensional"`` takes the Peclet number and scales the
    Laplacian by ``1/Pe``.
    """
    if form == "dimensional":
        kappa = k_or_pe
    elif form == "nondimensional":
        kappa = 1.0 / k_or_pe
    else:
        raise PhysicsError(f"unknown residual form {form!r}")
    return (np.asarray(c_t) + np.asarray(u) * c_x + np.asarray(v) * c_y
            - kappa * (np.asarray(c_xx) + np.asarray(c_yy)) - s)


def heat_kernel_derivatives(mass: float, k: float, x0: float, y0: float, t, x, y) -> dict:
    """Closed-form derivatives of the 2-D heat kernel (zero wind)."""
    t = np.asarray(t, dtype=np.float64)
    dx = np.asarray(x, dtype=np.float64) - x0
    dy = np.asarray(y, dtype=np.float64) - y0
    r2 = dx * dx + dy * dy
    c = mass / (4 * np.pi * k * t) * np.exp(-r2 / (4 * k * t))
    c_t = c * (-1.0 / t + r2 / (4 * k * t * t))
    c_x = -c * dx / (2 * k * t)
    c_y = -c * dy / (2 * k * t)
    c_xx = c * (dx * dx / (4 * k * k * t * t) - 1.0 / (2 * k * t))
    c_yy = c * (dy * dy / (4 * k * k * t * t) - 1.0 / (2 * k * t))
    return {"c": c, "c_t": c_t, "c_x": c_x, "c_y": c_y, "c_xx": c_xx, "c_yy": c_yy}


def sensor_grid(domain, n_side: int, margin: float = 0.0) -> np.ndarray:
    """Uniform ``n_side x n_side`` sensor layout; ``margin`` is a fraction of each side."""
    x0, x1, y0, y1 = domain
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    xs = np.linspace(x0 + mx, x1 - mx, n_side)
    ys = np.linspace(y0 + my, y1 - my, n_side)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


__all__ = [
    "PhysicsError", "CharacteristicScales", "ConstantWind", "RotatingWind", "GriddedWind",
    "WindFieldSpec", "wind_at", "mean_wind_speed", "SourceModel", "source_at",
    "source_center_gradient", "Scenario", "peclet", "default_scales", "Scaling",
    "nondimensionalize", "redimensionalize", "residual", "heat_kernel_derivatives", "sensor_grid",
]
