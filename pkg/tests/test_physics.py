import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumepinn import physics as ph


def make_scenario(wind=None, scales=None, **kw):
    src = ph.SourceModel([[2.0, 3.0]], [1.5], 0.5)
    args = dict(name="t", domain=(0.0, 10.0, 0.0, 10.0), time_window=(0.0, 3.0), k=0.5,
                wind=wind or ph.ConstantWind(0.7, 0.7), sources=src, scales=scales)
    args.update(kw)
    return ph.Scenario(**args)


class TestPeclet:
    @pytest.mark.parametrize("LU,k,expected", [(5.9, 0.5, 11.8), (5.9, 1e-5, 590000.0)])
    def test_reported_values(self, LU, k, expected):
        np.testing.assert_allclose(ph.peclet(ph.CharacteristicScales(1.0, LU, 1.0), k), expected, rtol=1e-12)

    def test_unit(self):
        assert ph.peclet(ph.CharacteristicScales(1.0, 2.0, 3.0), 6.0) == 1.0

    @pytest.mark.parametrize("k", [0.0, -1.0])
    def test_bad_k(self, k):
        with pytest.raises(ph.PhysicsError):
            ph.peclet(ph.CharacteristicScales(), k)

    @pytest.mark.parametrize("field", ["C", "L", "U"])
    def test_scales_positive(self, field):
        with pytest.raises(ph.PhysicsError):
            ph.CharacteristicScales(**{field: 0.0})


class TestScaling:
    def test_identity_scales(self):
        sc = make_scenario(scales=ph.CharacteristicScales())
        nd = ph.nondimensionalize(sc)
        assert nd.domain == sc.domain and nd.time_window == sc.time_window
        np.testing.assert_array_equal(nd.sources.centers, sc.sources.centers)
        assert nd.k == sc.k

    def test_concentration(self):
        assert ph.Scaling(ph.CharacteristicScales(C=10.0)).c(5.0) == 0.5

    def test_k_becomes_inverse_peclet(self):
        scales = ph.CharacteristicScales(C=2.0, L=10.0, U=0.7 * math.sqrt(2))
        nd = ph.nondimensionalize(make_scenario(scales=scales))
        np.testing.assert_allclose(nd.k, 0.5 / (10.0 * 0.7 * math.sqrt(2)), rtol=1e-14)
        np.testing.assert_allclose(1.0 / nd.k, 19.79898987322333, rtol=1e-12)

    def test_time_and_wind(self):
        scales = ph.CharacteristicScales(C=1.0, L=10.0, U=2.0)
        nd = ph.nondimensionalize(make_scenario(scales=scales))
        assert nd.time_window == (0.0, 0.6)
        u, v = ph.wind_at(nd.wind, 0.5, 0.5, 0.1)
        np.testing.assert_allclose((u, v), (0.35, 0.35), rtol=1e-14)

    def test_missing_scales(self):
        with pytest.raises(ph.PhysicsError):
            ph.nondimensionalize(make_scenario())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["constant", "rotating", "gridded"]))
    def test_round_trip(self, seed, kind):
        rng = np.random.default_rng(seed)
        x0, y0 = rng.uniform(-5, 5, 2)
        w, h = rng.uniform(0.5, 20, 2)
        dom = (x0, x0 + w, y0, y0 + h)
        t1 = rng.uniform(0.1, 10)
        if kind == "constant":
            wind = ph.ConstantWind(*rng.uniform(-2, 2, 2))
        elif kind == "rotating":
            wind = ph.RotatingWind(*rng.uniform(0.1, 1.0, 3))
        else:
            ts, xs, ys = np.linspace(0, t1, 3), np.linspace(x0, x0 + w, 4), np.linspace(y0, y0 + h, 5)
            wind = ph.GriddedWind(ts, xs, ys, rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4)))
        n = int(rng.integers(1, 4))
        centers = np.column_stack([rng.uniform(dom[0], dom[1], n), rng.uniform(dom[2], dom[3], n)])
        src = ph.SourceModel(centers, rng.uniform(0, 3, n), rng.uniform(0.1, 2))
        scales = ph.CharacteristicScales(*rng.uniform(0.1, 10, 3))
        sc = ph.Scenario("r", dom, (0.0, t1), rng.uniform(1e-4, 2), wind, src, scales,
                         observation_times=(t1,))
        back = ph.redimensionalize(ph.nondimensionalize(sc), scales)
        np.testing.assert_allclose(back.domain, sc.domain, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.time_window, sc.time_window, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.observation_times, sc.observation_times, rtol=1e-12)
        np.testing.assert_allclose(back.k, sc.k, rtol=1e-12)
        np.testing.assert_allclose(back.sources.centers, sc.sources.centers, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(back.sources.amplitudes, sc.sources.amplitudes, rtol=1e-12)
        np.testing.assert_allclose(back.sources.sigma, sc.sources.sigma, rtol=1e-12)
        X = rng.uniform(dom[0], dom[1], 7)
        Y = rng.uniform(dom[2], dom[3], 7)
        T = rng.uniform(0, t1, 7)
        np.testing.assert_allclose(ph.wind_at(back.wind, X, Y, T), ph.wind_at(sc.wind, X, Y, T),
                                   rtol=1e-12, atol=1e-12)


class TestWind:
    def test_constant(self):
        u, v = ph.wind_at(ph.ConstantWind(0.7, 0.7), np.array([0.0, 9.0]), np.array([3.0, 1.0]), 2.0)
        np.testing.assert_array_equal(u, [0.7, 0.7])
        np.testing.assert_array_equal(v, [0.7, 0.7])

    def test_rotating_formula(self):
        w = ph.RotatingWind()
        t = np.linspace(0, 8, 9)
        u, v = ph.wind_at(w, 0.0, 0.0, t)
        np.testing.assert_allclose(u, 0.2 + 0.5 * np.cos(np.pi / 4 * t), rtol=1e-14)
        np.testing.assert_allclose(v, 0.2 + 0.5 * np.sin(np.pi / 4 * t), rtol=1e-14)

    def gridded(self):
        rng = np.random.default_rng(0)
        return ph.GriddedWind([0.0, 1.0, 2.0], [0.0, 1.0, 2.0, 3.0], [0.0, 2.0],
                              rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4)))

    def test_gridded_nodes_exact(self):
        w = self.gridded()
        for it, t in enumerate(w.times):
            for iy, y in enumerate(w.ys):
                for ix, x in enumerate(w.xs):
                    u, v = ph.wind_at(w, x, y, t)
                    assert u == w.u[it, iy, ix] and v == w.v[it, iy, ix]

    def test_gridded_midway_in_time(self):
        w = self.gridded()
        u, v = ph.wind_at(w, 1.0, 2.0, 0.5)
        np.testing.assert_allclose(u, 0.5 * (w.u[0, 1, 1] + w.u[1, 1, 1]), rtol=1e-14)
        np.testing.assert_allclose(v, 0.5 * (w.v[0, 1, 1] + w.v[1, 1, 1]), rtol=1e-14)

    def test_gridded_bilinear_reproduces_affine(self):
        xs, ys, ts = np.linspace(0, 3, 4), np.linspace(0, 2, 3), np.array([0.0, 1.0])
        T, Y, X = np.meshgrid(ts, ys, xs, indexing="ij")
        u = 1.0 + 2.0 * X - 0.5 * Y + 0.25 * T
        w = ph.GriddedWind(ts, xs, ys, u, -u)
        q = np.random.default_rng(1).uniform(0, 1, (20, 3)) * [3, 2, 1]
        got, _ = ph.wind_at(w, q[:, 0], q[:, 1], q[:, 2])
        np.testing.assert_allclose(got, 1.0 + 2.0 * q[:, 0] - 0.5 * q[:, 1] + 0.25 * q[:, 2], rtol=1e-13)

    @pytest.mark.parametrize("q", [(3.5, 1.0, 0.5), (1.0, -0.1, 0.5), (1.0, 1.0, 2.5)])
    def test_gridded_out_of_coverage(self, q):
        with pytest.raises(ph.PhysicsError):
            ph.wind_at(self.gridded(), *q)

    def test_gridded_rejects_nonfinite(self):
        u = np.zeros((1, 2, 2))
        u[0, 0, 0] = np.nan
        with pytest.raises(ph.PhysicsError):
            ph.GriddedWind([0.0], [0.0, 1.0], [0.0, 1.0], u, np.zeros_like(u))

    def test_mean_speed_constant(self):
        np.testing.assert_allclose(ph.mean_wind_speed(ph.ConstantWind(0.7, 0.7), 0, 3), 0.7 * math.sqrt(2))

    def test_mean_speed_rotating_against_quadrature(self):
        from scipy.integrate import quad
        w = ph.RotatingWind()
        exact = quad(lambda t: math.hypot(*(float(c) for c in w.at(0, 0, t))), 0, 8)[0] / 8
        np.testing.assert_allclose(ph.mean_wind_speed(w, 0, 8, n=4001), exact, rtol=1e-5)


class TestSource:
    def test_peak(self):
        m = ph.SourceModel([[1.0, 2.0]], [3.5], 0.25)
        assert ph.source_at(m, 1.0, 2.0) == 3.5

    def test_tail(self):
        m = ph.SourceModel([[0.0, 0.0]], [2.0], 0.1)
        assert ph.source_at(m, 1.0, 0.0) < 2.0 * 1e-21

    def test_superposition(self):
        m = ph.SourceModel([[1.0, 1.0], [1.0, 1.0]], [2.0, 2.0], 0.3)
        assert ph.source_at(m, 1.0, 1.0) == 4.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_center_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        m = ph.SourceModel(rng.uniform(0, 1, (n, 2)), rng.uniform(0.5, 2, n), rng.uniform(0.1, 0.5))
        x, y = rng.uniform(-0.2, 1.2, 5), rng.uniform(-0.2, 1.2, 5)
        grad = ph.source_center_gradient(m, x, y)
        h = 1e-6
        for i in range(n):
            for j in range(2):
                up, dn = m.centers.copy(), m.centers.copy()
                up[i, j] += h
                dn[i, j] -= h
                fd = (ph.source_at(m.with_centers(up), x, y) - ph.source_at(m.with_centers(dn), x, y)) / (2 * h)
                scale = max(np.abs(fd).max(), 1e-8)
                assert np.abs(grad[:, i, j] - fd).max() / scale < 1e-6

    @pytest.mark.parametrize("kw", [{"sigma": 0.0}, {"amplitudes": [-1.0]}, {"trainable": ("z",)},
                                    {"centers": [[0.0, 0.0, 0.0]]}])
    def test_invalid(self, kw):
        args = dict(centers=[[0.0, 0.0]], amplitudes=[1.0], sigma=0.1)
        args.update(kw)
        with pytest.raises(ph.PhysicsError):
            ph.SourceModel(**args)


class TestScenario:
    @pytest.mark.parametrize("kw", [{"domain": (0, 0, 0, 1)}, {"k": 0.0}, {"time_window": (3.0, 1.0)},
                                    {"bc": "neumann"}, {"observation_times": (4.0,)}])
    def test_invalid(self, kw):
        with pytest.raises(ph.PhysicsError):
            make_scenario(**kw)

    def test_source_outside_domain(self):
        with pytest.raises(ph.PhysicsError):
            make_scenario(sources=ph.SourceModel([[11.0, 1.0]], [1.0], 0.5))

    def test_single_instant_allowed(self):
        assert make_scenario(time_window=(3.0, 3.0)).time_window == (3.0, 3.0)

    def test_default_scales(self):
        sc = make_scenario(domain=(0.0, 10.0, 0.0, 4.0))
        s = ph.default_scales(sc, 2.5)
        assert (s.C, s.L) == (2.5, 10.0)
        np.testing.assert_allclose(s.U, 0.7 * math.sqrt(2))

    def test_sensor_grid(self):
        g = ph.sensor_grid((0, 10, 0, 10), 3, margin=0.1)
        assert g.shape == (9, 2)
        np.testing.assert_allclose(g[:3], [[1, 1], [5, 1], [9, 1]])


class TestResidual:
    def test_steady_uniform(self):
        z = np.zeros(4)
        np.testing.assert_array_equal(ph.residual(z, z, z, z, z, 0.7, 0.7, z, 0.5), 0.0)

    def test_manufactured_linear(self):
        assert ph.residual(0, 1.0, 0, 0, 0, 2.0, 0.0, 2.0, 0.3) == 0.0

    def test_nondimensional_scales_laplacian(self):
        r_nd = ph.residual(0, 0, 0, 2.0, 4.0, 0, 0, 0, 12.0, form="nondimensional")
        r_d = ph.residual(0, 0, 0, 2.0, 4.0, 0, 0, 0, 1.0 / 12.0)
        np.testing.assert_allclose(r_nd, -0.5)
        np.testing.assert_allclose(r_d, r_nd, rtol=1e-15)

    def test_unknown_form(self):
        with pytest.raises(ph.PhysicsError):
            ph.residual(0, 0, 0, 0, 0, 0, 0, 0, 1.0, form="weird")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_linear_in_derivatives_and_source(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        u, v, k = rng.normal(size=5), rng.normal(size=5), rng.uniform(0.01, 2)
        alpha, beta = rng.normal(size=2)
        lhs = ph.residual(*(alpha * a + beta * b)[:5], u, v, (alpha * a + beta * b)[5], k)
        rhs = alpha * ph.residual(*a[:5], u, v, a[5], k) + beta * ph.residual(*b[:5], u, v, b[5], k)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


class TestHeatKernel:
    mass, k, x0, y0 = 2.0, 0.1, 0.3, -0.2

    def sample(self, n=400, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(0.2, 2.0, n), rng.uniform(-1.5, 2.0, n), rng.uniform(-2.0, 1.5, n)

    def test_closed_form_residual_vanishes(self):
        t, x, y = self.sample()
        d = ph.heat_kernel_derivatives(self.mass, self.k, self.x0, self.y0, t, x, y)
        r = ph.residual(d["c_t"], d["c_x"], d["c_y"], d["c_xx"], d["c_yy"], 0.0, 0.0, 0.0, self.k)
        assert np.abs(r).max() < 1e-8

    def test_finite_difference_residual(self):
        # independent route: derivatives by differencing the kernel itself
        t, x, y = self.sample(60, seed=1)

        def c(tt, xx, yy):
            return ph.heat_kernel_derivatives(self.mass, self.k, self.x0, self.y0, tt, xx, yy)["c"]

        h = 1e-4
        c_t = (c(t + h, x, y) - c(t - h, x, y)) / (2 * h)
        c_xx = (c(t, x + h, y) - 2 * c(t, x, y) + c(t, x - h, y)) / h ** 2
        c_yy = (c(t, x, y + h) - 2 * c(t, x, y) + c(t, x, y - h)) / h ** 2
        d = ph.heat_kernel_derivatives(self.mass, self.k, self.x0, self.y0, t, x, y)
        np.testing.assert_allclose(d["c_t"], c_t, atol=1e-6)
        np.testing.assert_allclose(d["c_xx"], c_xx, atol=1e-5)
        np.testing.assert_allclose(d["c_yy"], c_yy, atol=1e-5)
        r = c_t - self.k * (c_xx + c_yy)
        assert np.abs(r).max() < 1e-5

    def test_mass_conserved(self):
        xs = np.linspace(-6, 6, 601)
        X, Y = np.meshgrid(xs, xs)
        for t in (0.5, 2.0):
            c = ph.heat_kernel_derivatives(self.mass, self.k, self.x0, self.y0, t, X, Y)["c"]
            np.testing.assert_allclose(np.trapezoid(np.trapezoid(c, xs), xs), self.mass, rtol=1e-8)
