import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumepinn import network as nw
from plumepinn.diffgraph import Graph, ShapeError, forward


def zeroed(net):
    return nw.NetworkState(net.spec, {k: np.zeros_like(v) for k, v in net.params.items()}, net.seed)


def closed_form_count(width, depth, sin=False, heads=1, features=None, d_in=3):
    f = features or width
    first = d_in * f + f
    blocks = (f * width + width) + (depth - 1) * (width * width + width)
    return first + blocks + width * heads + heads


class TestArchitecture:
    def test_full_scale_width_count(self):
        spec = nw.ArchitectureSpec(hidden_width=300, depth=4, block_kind="resnet")
        assert spec.parameter_count() == closed_form_count(300, 4) == 3 * 300 + 300 + 4 * (300 * 300 + 300) + 301

    def test_fo_head_has_four_outputs(self):
        spec = nw.ArchitectureSpec(hidden_width=8, depth=2, output_heads="fo_pinn")
        net = nw.init(spec, 0)
        assert nw.evaluate(net, np.zeros((5, 3))).shape == (5, 4)
        assert spec.parameter_count() == closed_form_count(8, 2, heads=4)

    def test_sin_features_change_first_width(self):
        spec = nw.ArchitectureSpec(hidden_width=6, depth=2, sin_input_layer=True, sin_features=10)
        assert spec.parameter_count() == closed_form_count(6, 2, features=10)

    @pytest.mark.parametrize("kw", [{"hidden_width": 0}, {"depth": 0}, {"block_kind": "dense"},
                                    {"activation": "relu"}, {"output_heads": "both"}])
    def test_invalid_spec(self, kw):
        with pytest.raises(nw.ArchitectureError):
            nw.ArchitectureSpec(**kw)


class TestInit:
    def test_same_seed_identical(self):
        spec = nw.ArchitectureSpec(hidden_width=10, depth=3, sin_input_layer=True)
        a, b = nw.init(spec, 11), nw.init(spec, 11)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_distributions(self):
        spec = nw.ArchitectureSpec(hidden_width=200, depth=2, sin_input_layer=True)
        net = nw.init(spec, 3)
        for name, arr in net.params.items():
            if name.endswith(".b"):
                assert not arr.any()
        limit = np.sqrt(6.0 / 400)
        w = net.params["block0.W"]
        assert np.abs(w).max() <= limit
        np.testing.assert_allclose(w.var(), limit ** 2 / 3, rtol=0.05)
        s = net.params["sin.W"]
        assert abs(s.mean()) < 0.15 and abs(s.std() - 1.0) < 0.15

    def test_flat_round_trip(self):
        net = nw.init(nw.ArchitectureSpec(hidden_width=4, depth=2), 0)
        again = net.with_flat(net.flat())
        np.testing.assert_array_equal(again.flat(), net.flat())
        with pytest.raises(nw.ArchitectureError):
            net.with_flat(net.flat()[:-1])


class TestEvaluate:
    def test_zero_network_outputs_zero(self):
        net = zeroed(nw.init(nw.ArchitectureSpec(hidden_width=7, depth=3), 0))
        out = nw.evaluate(net, np.random.default_rng(0).uniform(-2, 2, (9, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_affine_case(self):
        spec = nw.ArchitectureSpec(hidden_width=3, depth=1, block_kind="resnet", activation="tanh")
        net = zeroed(nw.init(spec, 0))
        net.params["in.W"] = np.eye(3) * 1e-3
        net.params["head.W"] = np.array([[2.0], [-1.0], [0.5]]) * 1e3
        net.params["head.b"] = np.array([0.25])
        pts = np.random.default_rng(1).uniform(-1, 1, (6, 3))
        # tanh(1e-3 x) * 1e3 = x to O(1e-6); the resnet block adds zero
        expected = pts @ np.array([2.0, -1.0, 0.5]) + 0.25
        np.testing.assert_allclose(nw.evaluate(net, pts)[:, 0], expected, atol=1e-5)

    def test_repeatable(self):
        net = nw.init(nw.ArchitectureSpec(hidden_width=6, depth=2, sin_input_layer=True), 5)
        p = [[0.1, 0.2, 0.3]]
        np.testing.assert_array_equal(nw.evaluate(net, p), nw.evaluate(net, p))

    def test_wrong_input_dim(self):
        net = nw.init(nw.ArchitectureSpec(hidden_width=4, depth=1), 0)
        with pytest.raises(ShapeError):
            nw.evaluate(net, np.zeros((3, 2)))

    def test_matches_numpy_forward(self):
        spec = nw.ArchitectureSpec(hidden_width=5, depth=3, block_kind="resnet", sin_input_layer=True,
                                   output_heads="fo_pinn")
        net = nw.init(spec, 9)
        P = net.params
        pts = np.random.default_rng(2).uniform(0, 1, (7, 3))
        h = np.sin(2 * np.pi * (pts @ P["sin.W"] + P["sin.b"]))
        for k in range(3):
            z = h @ P[f"block{k}.W"] + P[f"block{k}.b"]
            h = h + (z - np.tanh(z))
        np.testing.assert_allclose(nw.evaluate(net, pts), h @ P["head.W"] + P["head.b"], rtol=1e-13)


class TestBuildingBlocks:
    def test_sin_map_zero(self):
        np.testing.assert_array_equal(nw.sin_input_map(np.ones((4, 3)), np.zeros((3, 5)), np.zeros(5)), 0.0)

    def test_sin_map_quarter_bias(self):
        np.testing.assert_allclose(nw.sin_input_map(np.ones((4, 3)), np.zeros((3, 5)), np.full(5, 0.25)), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_sin_map_range(self, seed):
        rng = np.random.default_rng(seed)
        out = nw.sin_input_map(rng.normal(size=(6, 3)), rng.normal(size=(3, 4)), rng.normal(size=4))
        assert np.all(np.abs(out) <= 1.0)

    def test_sin_map_shape_check(self):
        with pytest.raises(ShapeError):
            nw.sin_input_map(np.ones((4, 3)), np.zeros((5, 3)), np.zeros(5))

    def test_resnet_zero_weights_identity(self):
        h = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(nw.resnet_block(h, np.zeros((4, 4)), np.zeros(4)), h)

    def test_resnet_zero_input(self):
        W = np.random.default_rng(0).normal(size=(4, 4))
        np.testing.assert_array_equal(nw.resnet_block(np.zeros((3, 4)), W, np.zeros(4)), 0.0)

    def test_resnet_width_mismatch(self):
        with pytest.raises(ShapeError):
            nw.resnet_block(np.zeros((3, 4)), np.zeros((4, 5)), np.zeros(5))

    def test_resnet_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        W, b = rng.normal(size=(4, 4)), rng.normal(size=4)
        h0 = rng.normal(size=(1, 4))
        g = Graph()
        hn = g.input("h", (1, 4))
        out = nw.resnet_block_node(g, hn, g.constant(W), g.constant(b))
        eps = 1e-6
        for j in range(4):
            d = np.eye(4)[j]
            t = g.tangent(hn, d, out)
            jt = forward(g, {"h": h0}, [t])[t]
            fd = (nw.resnet_block(h0 + eps * d, W, b) - nw.resnet_block(h0 - eps * d, W, b)) / (2 * eps)
            np.testing.assert_allclose(jt, fd, rtol=1e-5, atol=1e-9)

    def test_resnet_stack_of_zeros_is_identity_on_features(self):
        spec = nw.ArchitectureSpec(hidden_width=4, depth=3, block_kind="resnet")
        g = Graph()
        h = g.input("h", (2, 4))
        node = h
        for k in range(spec.depth):
            node = nw.resnet_block_node(g, node, g.constant(np.zeros((4, 4))), g.constant(np.zeros(4)))
        hv = np.random.default_rng(0).normal(size=(2, 4))
        np.testing.assert_array_equal(forward(g, {"h": hv}, [node])[node], hv)

    def test_tanhshrink_odd_and_zero(self):
        g = Graph()
        x = g.input("x", (50,))
        y = g.tanhshrink(x)
        xs = np.linspace(-4, 4, 50)
        v = forward(g, {"x": xs})[y]
        vn = forward(g, {"x": -xs})[y]
        np.testing.assert_allclose(v, -vn, atol=1e-12)
        assert forward(g, {"x": np.zeros(50)})[y][0] == 0.0


class TestInputDerivatives:
    def test_engineered_single_axis(self):
        # in-layer reads x only and the zero-weight block is the identity: c = x - tanh(x)
        spec = nw.ArchitectureSpec(hidden_width=2, depth=1, block_kind="resnet")
        net = zeroed(nw.init(spec, 0))
        net.params["in.W"] = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        net.params["head.W"] = np.array([[1.0], [0.0]])
        pts = np.random.default_rng(0).uniform(-1, 1, (5, 3))
        d1 = nw.input_derivatives(net, pts, 1)
        np.testing.assert_allclose(d1["c_x"], np.tanh(pts[:, 0]) ** 2, rtol=1e-12)
        np.testing.assert_array_equal(d1["c_y"], 0.0)
        np.testing.assert_array_equal(d1["c_t"], 0.0)

    def test_engineered_second_derivative(self):
        # sin layer reading x only: c = sin(a x), c_xx = -a^2 sin(a x)
        spec = nw.ArchitectureSpec(hidden_width=1, depth=1, block_kind="resnet", sin_input_layer=True)
        net = zeroed(nw.init(spec, 0))
        net.params["sin.W"] = np.array([[0.3], [0.0], [0.0]])
        net.params["head.W"] = np.array([[1.0]])
        pts = np.random.default_rng(1).uniform(-1, 1, (6, 3))
        d2 = nw.input_derivatives(net, pts, 2)
        a = 2 * np.pi * 0.3
        np.testing.assert_allclose(d2["c_xx"], -a * a * np.sin(a * pts[:, 0]), rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(d2["c_yy"], 0.0)

    @pytest.mark.parametrize("head", ["c_only", "fo_pinn"])
    def test_random_net_matches_finite_differences(self, head):
        spec = nw.ArchitectureSpec(hidden_width=8, depth=3, sin_input_layer=True, output_heads=head)
        net = nw.init(spec, 21)
        net.params["sin.W"] *= 0.3
        pts = np.random.default_rng(5).uniform(0, 1, (6, 3))
        d1, d2 = nw.input_derivatives(net, pts, 1), nw.input_derivatives(net, pts, 2)
        c = lambda p: nw.evaluate(net, p)[:, 0]
        h1, h2 = 1e-5, 1e-4
        for k, axis in (("c_x", 0), ("c_y", 1), ("c_t", 2)):
            e = np.eye(3)[axis]
            fd = (c(pts + h1 * e) - c(pts - h1 * e)) / (2 * h1)
            np.testing.assert_allclose(d1[k], fd, rtol=1e-5, atol=1e-8)
        for k, axis in (("c_xx", 0), ("c_yy", 1)):
            e = np.eye(3)[axis]
            fd = (c(pts + h2 * e) - 2 * c(pts) + c(pts - h2 * e)) / h2 ** 2
            np.testing.assert_allclose(d2[k], fd, rtol=1e-5, atol=1e-5)

    def test_bad_order(self):
        net = nw.init(nw.ArchitectureSpec(hidden_width=2, depth=1), 0)
        with pytest.raises(Exception):
            nw.input_derivatives(net, np.zeros((1, 3)), 3)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        spec = nw.ArchitectureSpec(hidden_width=6, depth=2, sin_input_layer=True, output_heads="fo_pinn")
        net = nw.init(spec, 13)
        path = nw.save(net, tmp_path / "net.npz")
        back = nw.load(path)
        assert back.spec == spec and back.seed == 13
        pts = np.random.default_rng(0).uniform(size=(10, 3))
        np.testing.assert_array_equal(nw.evaluate(back, pts), nw.evaluate(net, pts))
        assert not list(tmp_path.glob("*.tmp*"))

    def test_rejects_foreign_format(self, tmp_path):
        p = tmp_path / "x.npz"
        np.savez(p, format=np.array("other"), spec=np.array("{}"), seed=np.array(0), names=np.array(["a"]),
                 flat=np.zeros(1))
        with pytest.raises(nw.ArchitectureError):
            nw.load(p)
