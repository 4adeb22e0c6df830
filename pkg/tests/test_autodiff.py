import numpy as np
import pytest

from mrfica import autodiff
from mrfica.errors import FormatError, ShapeError


def _rng(seed=0):
    return np.random.default_rng(seed)


def linear_graph(seed=0, n_in=5, n_out=3):
    g = autodiff.Graph()
    x = g.input("x")
    w = g.param("w", _rng(seed).normal(0, 0.4, (n_in, n_out))
                .astype(np.float32))
    b = g.param("b", _rng(seed + 1).normal(0, 0.1, n_out)
                .astype(np.float32))
    out = g.dense(x, w, b)
    t = g.input("target")
    loss = g.mse(out, t)
    return g, out, loss


class TestForwardBackward:
    def test_mse_of_identical_inputs(self):
        g = autodiff.Graph()
        a = g.input("a")
        b = g.input("b")
        loss = g.mse(a, b)
        x = _rng(1).normal(0, 1, (4, 6))
        val, values = autodiff.forward(g, {"a": x, "b": x}, output=loss)
        assert float(val) == 0.0

    def test_dense_identity(self):
        g = autodiff.Graph()
        x = g.input("x")
        w = g.param("w", np.eye(5, dtype=np.float32))
        b = g.param("b", np.zeros(5, dtype=np.float32))
        out = g.dense(x, w, b)
        data = _rng(2).normal(0, 1, (3, 5)).astype(np.float32)
        val, _ = autodiff.forward(g, {"x": data}, output=out)
        np.testing.assert_array_equal(val, data)

    def test_zero_loss_zero_gradients(self):
        g, out, loss = linear_graph()
        x = _rng(3).normal(0, 1, (4, 5))
        val, values = autodiff.forward(g, {"x": x, "target": np.zeros(1)},
                                       output=out)
        # target equal to the prediction makes every gradient vanish
        _, values = autodiff.forward(g, {"x": x, "target": val},
                                     output=loss)
        grads = autodiff.backward(g, values, loss)
        for arr in grads.values():
            np.testing.assert_array_equal(arr, np.zeros_like(arr))

    def test_three_layer_net_finite_differences(self):
        g = autodiff.Graph()
        x = g.input("x")
        rng = _rng(4)
        w1 = g.param("w1", rng.normal(0, 0.5, (6, 8)).astype(np.float32))
        b1 = g.param("b1", rng.normal(0, 0.2, 8).astype(np.float32))
        w2 = g.param("w2", rng.normal(0, 0.5, (8, 5)).astype(np.float32))
        b2 = g.param("b2", rng.normal(0, 0.2, 5).astype(np.float32))
        w3 = g.param("w3", rng.normal(0, 0.5, (5, 2)).astype(np.float32))
        b3 = g.param("b3", rng.normal(0, 0.2, 2).astype(np.float32))
        h1 = g.relu(g.dense(x, w1, b1))
        h2 = g.sigmoid(g.dense(h1, w2, b2))
        out = g.dense(h2, w3, b3)
        t = g.input("target")
        loss = g.mse(out, t)
        feeds = {"x": rng.normal(0, 1, (8, 6)),
                 "target": rng.normal(0, 1, (8, 2))}
        rep = autodiff.gradient_check(g, feeds, loss, epsilon=1e-3)
        assert rep.passed
        assert rep.max_rel_error < 1e-4

    def test_shape_error_names_node(self):
        g = autodiff.Graph()
        x = g.input("x")
        w = g.param("w", np.zeros((4, 3), dtype=np.float32))
        b = g.param("b", np.zeros(3, dtype=np.float32))
        node = g.dense(x, w, b)
        with pytest.raises(ShapeError, match=f"node {node.idx}"):
            autodiff.forward(g, {"x": np.zeros((2, 5))}, output=node)


class TestOperators:
    def test_broadcast_multiply_backward_vs_dense_oracle(self):
        # d/ds of sum over an expanded elementwise product
        rng = _rng(5)
        x = rng.normal(0, 1, (2, 3, 3, 4)).astype(np.float64)
        s = rng.normal(0, 1, (2, 4)).astype(np.float64)
        up = rng.normal(0, 1, (2, 3, 3, 4)).astype(np.float64)
        g = autodiff.Graph()
        xn = g.input("x")
        sn = g.input("s")
        node = g.scale_channels(xn, sn)
        _, values = autodiff.forward(g, {"x": x, "s": s}, output=node,
                                     dtype=np.float64)
        dx, ds = autodiff._BACKWARD["scale_channels"](node, up,
                                                      values[node.idx],
                                                      x, s)
        expanded = np.zeros_like(s)
        for n in range(2):
            for c in range(4):
                expanded[n, c] = np.sum(up[n, :, :, c] * x[n, :, :, c])
        np.testing.assert_allclose(ds, expanded, rtol=0, atol=1e-12)
        np.testing.assert_allclose(dx, up * s[:, None, None, :], rtol=0,
                                   atol=1e-12)

    def test_max_pool_tie_routes_to_first(self):
        g = autodiff.Graph()
        x = g.input("x")
        node = g.max_pool_all(x)
        data = np.zeros((1, 2, 2, 1), dtype=np.float64)
        data[0, 0, 1, 0] = 5.0
        data[0, 1, 0, 0] = 5.0   # tie with an earlier scan position
        _, values = autodiff.forward(g, {"x": data}, output=node,
                                     dtype=np.float64)
        (dx,) = autodiff._BACKWARD["max_pool_all"](node, np.ones((1, 1)),
                                                   values[node.idx], data)
        assert dx[0, 0, 1, 0] == 1.0
        assert dx[0, 1, 0, 0] == 0.0

    def test_conv_gradcheck(self):
        rng = _rng(6)
        g = autodiff.Graph()
        x = g.input("x")
        w = g.param("w", rng.normal(0, 0.3, (3, 3, 3, 4))
                    .astype(np.float32))
        b = g.param("b", rng.normal(0, 0.1, 4).astype(np.float32))
        out = g.flatten(g.conv2d(x, w, b))
        t = g.input("target")
        loss = g.mse(out, t)
        feeds = {"x": rng.normal(0, 1, (2, 5, 5, 3)),
                 "target": rng.normal(0, 1, (2, 100))}
        rep = autodiff.gradient_check(g, feeds, loss, epsilon=1e-3)
        assert rep.passed

    def test_avg_pool_and_add_gradcheck(self):
        rng = _rng(7)
        g = autodiff.Graph()
        x = g.input("x")
        w = g.param("w", rng.normal(0, 0.4, (3, 2)).astype(np.float32))
        b = g.param("b", np.zeros(2, dtype=np.float32))
        pa = g.avg_pool_all(x)
        pm = g.max_pool_all(x)
        mix = g.add(g.dense(pa, w, b), g.dense(pm, w, b))
        t = g.input("target")
        loss = g.mse(g.sigmoid(mix), t)
        feeds = {"x": rng.normal(0, 1, (3, 4, 4, 3)),
                 "target": rng.uniform(0, 1, (3, 2))}
        rep = autodiff.gradient_check(g, feeds, loss, epsilon=1e-3)
        assert rep.passed


class TestGradientCheck:
    def test_linear_model_is_exact(self):
        g, out, loss = linear_graph(seed=8)
        rng = _rng(9)
        feeds = {"x": rng.normal(0, 1, (6, 5)),
                 "target": rng.normal(0, 1, (6, 3))}
        rep = autodiff.gradient_check(g, feeds, loss, epsilon=1e-3)
        assert rep.max_rel_error < 1e-8

    def test_corrupted_backward_detected(self, monkeypatch):
        g, out, loss = linear_graph(seed=10)
        rng = _rng(11)
        feeds = {"x": rng.normal(0, 1, (6, 5)),
                 "target": rng.normal(0, 1, (6, 3))}

        original = autodiff._BACKWARD["dense"]

        def corrupted(node, grad, out_val, x, w, b):
            dx, dw, db = original(node, grad, out_val, x, w, b)
            return dx, 1.25 * dw, db

        monkeypatch.setitem(autodiff._BACKWARD, "dense", corrupted)
        rep = autodiff.gradient_check(g, feeds, loss, epsilon=1e-3)
        assert not rep.passed

    def test_params_restored_after_check(self):
        g, out, loss = linear_graph(seed=12)
        before = {k: v.copy() for k, v in g.params.items()}
        rng = _rng(13)
        feeds = {"x": rng.normal(0, 1, (4, 5)),
                 "target": rng.normal(0, 1, (4, 3))}
        autodiff.gradient_check(g, feeds, loss)
        for name, arr in g.params.items():
            np.testing.assert_array_equal(arr, before[name])


class TestAdam:
    def test_zero_gradient_is_noop(self):
        params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        grads = {"w": np.zeros(2, dtype=np.float32)}
        state = autodiff.AdamState.for_params(params, lr=0.1)
        autodiff.adam_step(params, grads, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.t == 1

    def test_first_step_magnitude(self):
        params = {"w": np.array([0.0], dtype=np.float32)}
        grads = {"w": np.array([0.37], dtype=np.float32)}
        state = autodiff.AdamState.for_params(params, lr=1e-2)
        autodiff.adam_step(params, grads, state)
        assert abs(params["w"][0]) == pytest.approx(1e-2, rel=1e-4)

    def test_converges_on_quadratic(self):
        # f(w) = (w - 3)^2, gradient 2 (w - 3)
        params = {"w": np.array([0.0], dtype=np.float32)}
        state = autodiff.AdamState.for_params(params, lr=0.1)
        for _ in range(100):
            g = {"w": 2.0 * (params["w"] - 3.0)}
            autodiff.adam_step(params, g, state)
        assert abs(params["w"][0] - 3.0) < 0.1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = _rng(14)
        params = {
            "conv_w": rng.normal(0, 1, (3, 3, 2, 4)).astype(np.float32),
            "bias": rng.normal(0, 1, 4).astype(np.float32),
            "scalarish": rng.normal(0, 1, (1,)).astype(np.float32),
        }
        path = tmp_path / "ckpt.mrfw"
        autodiff.save_params(path, params)
        back = autodiff.load_params(path)
        assert list(back) == list(params)
        for name in params:
            np.testing.assert_array_equal(back[name], params[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ckpt.mrfw"
        autodiff.save_params(path, {"w": np.zeros(3, dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="bad magic"):
            autodiff.load_params(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "ckpt.mrfw"
        autodiff.save_params(path, {"w": np.zeros(64, dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(FormatError, match="truncated"):
            autodiff.load_params(path)
