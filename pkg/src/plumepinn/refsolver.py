"""Finite-difference reference solver and error metrics.

Node-centred grid with ``nx + 1`` by ``ny + 1`` nodes including the
Dirichlet boundary. One time step is split as

1. explicit first-order upwind advection,
2. Peaceman-Rachford ADI (Crank-Nicolson per direction) for diffusion,
3. explicit source injection ``c += dt * s``.

Fields are stored as ``c[j, i]`` with ``j`` along y and ``i`` along x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .physics import ConstantWind, Scenario, SourceModel, source_at, wind_at
from .training import ObservationSet


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int = 128
    ny: int = 128
    dt: float | None = None
    cfl: float = 0.5
    scheme: str = "upwind+adi-cn"

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise SolverError("grid needs at least 8 cells per direction")
        if self.dt is not None and not self.dt > 0:
            raise SolverError("dt must be positive")
        if not 0 < self.cfl <= 1:
            raise SolverError("target CFL must be in (0, 1]")
        if self.scheme != "upwind+adi-cn":
            raise SolverError(f"unknown scheme {self.scheme!r}")


@dataclass(eq=False)
class FieldSeries:
    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    fields: np.ndarray  # (nt, ny + 1, nx + 1)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.shape != (len(self.times), len(self.ys), len(self.xs)):
            raise SolverError("field array shape does not match the grid and times")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise SolverError("snapshot times must be increasing")

    def __len__(self):
        return len(self.times)

    def snapshot(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-9 * max(1.0, abs(t))):
            raise SolverError(f"no snapshot at t={t}")
        return self.fields[i]

    def mesh(self):
        return np.meshgrid(self.xs, self.ys, indexing="xy")

    def points(self, t: float) -> np.ndarray:
        X, Y = self.mesh()
        return np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, t)])


def _diffusion_matrix(n_interior: int, r: float) -> np.ndarray:
    """Banded form of ``I - r * delta^2`` on interior nodes."""
    ab = np.empty((3, n_interior))
    ab[0, :] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :] = -r
    ab[0, 0] = 0.0
    ab[2, -1] = 0.0
    return ab


def _explicit_xx(c: np.ndarray, r: float) -> np.ndarray:
    """``(I + r delta_x^2) c`` on interior rows/cols; c has zero boundary."""
    return c[1:-1, 1:-1] + r * (c[1:-1, 2:] - 2.0 * c[1:-1, 1:-1] + c[1:-1, :-2])


def _explicit_yy(c: np.ndarray, r: float) -> np.ndarray:
    return c[1:-1, 1:-1] + r * (c[2:, 1:-1] - 2.0 * c[1:-1, 1:-1] + c[:-2, 1:-1])


def _max_speed(scenario: Scenario, X, Y, times) -> float:
    best = 0.0
    for t in times:
        u, v = wind_at(scenario.wind, X, Y, t)
        best = max(best, float(np.max(np.abs(u) + np.abs(v))))
    return best


def solve_forward(scenario: Scenario, grid: GridSpec = GridSpec(),
                  times: Sequence[float] | None = None,
                  initial: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                  include_source: bool = True) -> FieldSeries:
    """Integrate the scenario from ``time_window[0]`` and return snapshots at ``times``.

    ``times`` defaults to the scenario window end points. ``initial`` overrides
    the zero initial condition with a callable ``f(X, Y)``.
    """
    x0, x1, y0, y1 = scenario.domain
    t0, t1 = scenario.time_window
    xs = np.linspace(x0, x1, grid.nx + 1)
    ys = np.linspace(y0, y1, grid.ny + 1)
    hx, hy = (x1 - x0) / grid.nx, (y1 - y0) / grid.ny
    h = min(hx, hy)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    if times is None:
        times = sorted({t0, t1})
    times = np.asarray(sorted(float(t) for t in times))
    if times[0] < t0 - 1e-12 or times[-1] > t1 + 1e-12:
        raise SolverError(f"snapshot times must lie in {scenario.time_window}")

    probe = np.linspace(t0, t1, 33) if t1 > t0 else np.array([t0])
    speed = _max_speed(scenario, X, Y, probe)
    if grid.dt is not None:
        dt_max = grid.dt
        cfl = speed * dt_max / h
        if cfl > 1.0 + 1e-12:
            raise CFLError(f"advective CFL {cfl:.3f} exceeds 1 (dt={dt_max}, h={h})")
    else:
        dt_max = grid.cfl * h / speed if speed > 0 else h

    k = scenario.k
    source = source_at(scenario.sources, X, Y) if include_source else np.zeros_like(X)
    c = np.zeros_like(X) if initial is None else np.array(initial(X, Y), dtype=np.float64)
    c[0, :] = c[-1, :] = 0.0
    c[:, 0] = c[:, -1] = 0.0

    snaps = []
    t = t0
    solver_cache: dict[float, tuple] = {}
    step_index = 0
    for target in times:
        span = target - t
        n_steps = int(math.ceil(span / dt_max - 1e-9)) if span > 0 else 0
        for _ in range(n_steps):
            dt = span / n_steps
            # a non-finite field is reported below with its step index
            with np.errstate(over="ignore", invalid="ignore"):
                c = _step(c, scenario, X, Y, t, dt, hx, hy, k, source, solver_cache)
            t += dt
            step_index += 1
            if not np.isfinite(c).all():
                raise SolverError(f"non-finite field at step {step_index} (t={t:.6g})")
        t = target
        snaps.append(c.copy())
    return FieldSeries(times, xs, ys, np.stack(snaps))


def _step(c, scenario, X, Y, t, dt, hx, hy, k, source, cache):
    u, v = wind_at(scenario.wind, X, Y, t)
    inner = c[1:-1, 1:-1]
    ui, vi = u[1:-1, 1:-1], v[1:-1, 1:-1]
    dxm = (inner - c[1:-1, :-2]) / hx
    dxp = (c[1:-1, 2:] - inner) / hx
    dym = (inner - c[:-2, 1:-1]) / hy
    dyp = (c[2:, 1:-1] - inner) / hy
    adv = (np.maximum(ui, 0) * dxm + np.minimum(ui, 0) * dxp
           + np.maximum(vi, 0) * dym + np.minimum(vi, 0) * dyp)
    a = np.zeros_like(c)
    a[1:-1, 1:-1] = inner - dt * adv

    rx = 0.5 * k * dt / hx ** 2
    ry = 0.5 * k * dt / hy ** 2
    key = round(dt, 15)
    if key not in cache:
        cache.clear()
        cache[key] = (_diffusion_matrix(c.shape[1] - 2, rx), _diffusion_matrix(c.shape[0] - 2, ry))
    ab_x, ab_y = cache[key]

    # x-implicit half step: rows are independent systems along x
    rhs = _explicit_yy(a, ry)
    half = np.zeros_like(c)
    half[1:-1, 1:-1] = solve_banded((1, 1), ab_x, rhs.T, check_finite=False).T
    rhs = _explicit_xx(half, rx)
    out = np.zeros_like(c)
    out[1:-1, 1:-1] = solve_banded((1, 1), ab_y, rhs, check_finite=False)
    out[1:-1, 1:-1] += dt * source[1:-1, 1:-1]
    return out


def _bracket(axis, q, label):
    tol = 1e-9 * max(1.0, float(np.abs(axis).max()))
    if np.any(q < axis[0] - tol) or np.any(q > axis[-1] + tol):
        raise SolverError(f"{label} outside the solved range [{axis[0]}, {axis[-1]}]")
    if len(axis) == 1:
        return np.zeros(np.shape(q), dtype=int), np.zeros(np.shape(q))
    i = np.clip(np.searchsorted(axis, q, side="right") - 1, 0, len(axis) - 2)
    w = np.clip((q - axis[i]) / (axis[i + 1] - axis[i]), 0.0, 1.0)
    return i, w


def interpolate(fs: FieldSeries, x, y, t) -> np.ndarray:
    """Bilinear in space, linear in time."""
    x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
    ix, wx = _bracket(fs.xs, x, "sensor x")
    iy, wy = _bracket(fs.ys, y, "sensor y")
    it, wt = _bracket(fs.times, t, "time")
    nx, ny, nt = len(fs.xs), len(fs.ys), len(fs.times)
    ix1, iy1, it1 = np.minimum(ix + 1, nx - 1), np.minimum(iy + 1, ny - 1), np.minimum(it + 1, nt - 1)
    F = fs.fields

    def plane(k):
        return ((1 - wy) * ((1 - wx) * F[k, iy, ix] + wx * F[k, iy, ix1])
                + wy * ((1 - wx) * F[k, iy1, ix] + wx * F[k, iy1, ix1]))

    return (1 - wt) * plane(it) + wt * plane(it1)


def sample_observations(fs: FieldSeries, sensors, times: Sequence[float], noise_sd: float = 0.0,
                        seed: int = 0) -> ObservationSet:
    """One observation per sensor and time, optionally with seeded Gaussian noise."""
    sensors = np.atleast_2d(np.asarray(sensors, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64)
    T = np.repeat(times, len(sensors))
    S = np.tile(sensors, (len(times), 1))
    c = interpolate(fs, S[:, 0], S[:, 1], T)
    if noise_sd > 0:
        c = c + np.random.default_rng(seed).normal(0.0, noise_sd, c.shape)
    return ObservationSet(np.column_stack([S, T]), c, provenance="synthetic")


def analytic_heat_kernel(mass: float, k: float, release, t: float, points) -> np.ndarray:
    """``M / (4 pi k t) * exp(-r^2 / (4 k t))`` at ``points`` (shape (..., 2))."""
    if not t > 0:
        raise SolverError("heat kernel needs t > 0")
    if not k > 0:
        raise SolverError("heat kernel needs k > 0")
    p = np.asarray(points, dtype=np.float64)
    r2 = (p[..., 0] - release[0]) ** 2 + (p[..., 1] - release[1]) ** 2
    return mass / (4.0 * np.pi * k * t) * np.exp(-r2 / (4.0 * k * t))


def gaussian_release_error(k: float, wind: tuple[float, float], release, t_start: float, t_end: float,
                           n: int, dt: float | None = None) -> float:
    """L2 relative error of the solver against a drifting heat kernel on the unit square.

    The initial field is the kernel of unit mass released at ``release`` and
    evaluated at ``t_start``; the exact answer at ``t_end`` is the same
    kernel moved by ``wind * (t_end - t_start)``. Keep the kernel narrow
    relative to the square so the zero boundary does not truncate it.
    """
    u, v = wind
    span = t_end - t_start
    src = SourceModel([[0.5, 0.5]], [0.0], 0.1)
    sc = Scenario("gaussian-release", (0.0, 1.0, 0.0, 1.0), (0.0, span), k, ConstantWind(u, v), src,
                  nondimensional=True)

    def initial(X, Y):
        return analytic_heat_kernel(1.0, k, release, t_start, np.stack([X, Y], axis=-1))

    fs = solve_forward(sc, GridSpec(n, n, dt=dt), times=[span], initial=initial)
    X, Y = fs.mesh()
    moved = (release[0] + u * span, release[1] + v * span)
    exact = analytic_heat_kernel(1.0, k, moved, t_end, np.stack([X, Y], axis=-1))
    return l2_relative_error(fs.fields[-1], exact)


def observed_orders(errors: Sequence[float]) -> np.ndarray:
    """log2 error ratios for successive grid halvings."""
    e = np.asarray(errors, dtype=np.float64)
    return np.log2(e[:-1] / e[1:])


def _as_arrays(a, b):
    if isinstance(a, FieldSeries) and isinstance(b, FieldSeries):
        if a.fields.shape != b.fields.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-12):
            raise SolverError("field series differ in shape or snapshot times")
        return a.fields, b.fields
    a = a.fields if isinstance(a, FieldSeries) else np.asarray(a, dtype=np.float64)
    b = b.fields if isinstance(b, FieldSeries) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SolverError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def field_mse(a, b) -> float:
    a, b = _as_arrays(a, b)
    return float(np.mean((a - b) ** 2))


def field_mae(a, b) -> float:
    a, b = _as_arrays(a, b)
    return float(np.mean(np.abs(a - b)))


def l2_relative_error(approx, exact) -> float:
    approx, exact = _as_arrays(approx, exact)
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def total_mass(fs: FieldSeries) -> np.ndarray:
    """Trapezoid-free node sum times cell area, per snapshot."""
    hx = fs.xs[1] - fs.xs[0]
    hy = fs.ys[1] - fs.ys[0]
    return fs.fields.sum(axis=(1, 2)) * hx * hy
