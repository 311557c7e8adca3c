import struct

import numpy as np
import pytest

from altisr.numcore import (
    AdamState,
    NumericError,
    ParamSet,
    Tensor,
    activation,
    adam_step,
    backward,
    conv2d,
    dense,
    depthwise_conv2d,
    l1_loss,
    load_params,
    relu,
    save_params,
    sigmoid,
    tensor_sum,
)
from oracles import (
    adam_scalar_reference,
    assert_grads_close,
    conv2d_loop,
    dense_loop,
    finite_diff_grad,
    l1_loop,
)


def delta_kernel(cout, cin, k):
    ker = np.zeros((cout, cin, k, k))
    c = k // 2
    for i in range(min(cout, cin)):
        ker[i, i, c, c] = 1.0
    return ker


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.random((1, 3, 3, 3)))
        out = conv2d(x, Tensor(delta_kernel(3, 3, 3)), Tensor(np.zeros(3)), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_input_ones_kernel(self):
        x = Tensor(np.full((1, 1, 5, 5), 5.0))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        # Interior pixels sum nine 5s.
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 45.0)
        oracle = conv2d_loop(x.data, np.ones((1, 1, 3, 3)), np.zeros(1), 1)
        np.testing.assert_allclose(out.data, oracle)

    def test_zero_kernel_bias(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.random((2, 3, 4, 4)))
        b = np.array([0.3, -0.7])
        out = conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(b), padding=1)
        for co in range(2):
            np.testing.assert_allclose(out.data[:, co], b[co])

    def test_random_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1)
        np.testing.assert_allclose(out.data, conv2d_loop(x, k, b, 1), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                   Tensor(np.zeros(1)), padding=1)

    def test_non_finite_input_rejected(self):
        bad = np.zeros((1, 1, 3, 3))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericError):
            Tensor(bad)


class TestDepthwise:
    def test_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 3, 4, 4)))
        ker = np.zeros((3, 1, 3, 3))
        ker[:, 0, 1, 1] = 1.0
        out = depthwise_conv2d(x, Tensor(ker))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zeroed_channel(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((1, 3, 4, 4)))
        ker = np.zeros((3, 1, 3, 3))
        ker[1:, 0, 1, 1] = 1.0
        out = depthwise_conv2d(x, Tensor(ker))
        np.testing.assert_array_equal(out.data[0, 0], 0.0)
        np.testing.assert_array_equal(out.data[0, 1:], x.data[0, 1:])

    def test_matches_per_channel_conv2d(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 4, 4))
        ker = rng.standard_normal((2, 1, 3, 3))
        out = depthwise_conv2d(Tensor(x), Tensor(ker))
        for c in range(2):
            ref = conv2d_loop(x[:, c : c + 1], ker[c : c + 1], np.zeros(1), 1)
            np.testing.assert_allclose(out.data[:, c : c + 1], ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="depthwise"):
            depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))))


class TestDense:
    def test_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 4))
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.0, -2.0, 0.5])
        out = dense(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), Tensor(b))
        np.testing.assert_allclose(out.data, np.broadcast_to(b, (3, 3)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        out = dense(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, dense_loop(x, w, b), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dense"):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


class TestActivations:
    def test_relu_anchors(self):
        out = relu(Tensor([-2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_sigmoid_anchor(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_open_interval(self):
        xs = np.arange(-10.0, 11.0)
        out = sigmoid(Tensor(xs)).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_activation_dispatch(self):
        x = Tensor([1.0, -1.0])
        np.testing.assert_array_equal(activation(x, "relu").data, relu(x).data)
        np.testing.assert_array_equal(activation(x, "sigmoid").data, sigmoid(x).data)
        with pytest.raises(ValueError):
            activation(x, "tanh")


class TestL1Loss:
    def test_equal_inputs(self):
        x = Tensor(np.ones((3, 3)))
        assert l1_loss(x, Tensor(np.ones((3, 3)))).item() == 0.0

    def test_unit_gap(self):
        assert l1_loss(Tensor(np.zeros(5)), Tensor(np.ones(5))).item() == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((4, 7))
        b = rng.standard_normal((4, 7))
        got = l1_loss(Tensor(a), Tensor(b)).item()
        assert abs(got - l1_loop(a, b)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(9).random((2, 3, 4)), requires_grad=True)
        backward(tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(x + Tensor(np.ones(3)))

    def test_accumulation_and_reset(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def run():
            backward(tensor_sum(mul2(x)))

        def mul2(t):
            return t * 2.0

        run()
        first = x.grad.copy()
        run()
        np.testing.assert_array_equal(x.grad, 2 * first)
        x.zero_grad()
        run()
        np.testing.assert_array_equal(x.grad, first)

    @pytest.mark.parametrize("layer", ["conv2d", "depthwise", "dense", "relu", "sigmoid", "l1"])
    def test_finite_difference_per_layer(self, layer):
        rng = np.random.default_rng(hash(layer) % 2**32)
        if layer == "conv2d":
            x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
            b = Tensor(rng.standard_normal(3) * 0.1, requires_grad=True)
            tgt = Tensor(rng.standard_normal((1, 3, 4, 4)))
            fwd = lambda: l1_loss(conv2d(x, k, b, padding=1), tgt)
            checked = [x, k, b]
        elif layer == "depthwise":
            x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.5, requires_grad=True)
            tgt = Tensor(rng.standard_normal((1, 3, 4, 4)))
            fwd = lambda: l1_loss(depthwise_conv2d(x, k), tgt)
            checked = [x, k]
        elif layer == "dense":
            x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 4)) * 0.5, requires_grad=True)
            b = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True)
            tgt = Tensor(rng.standard_normal((3, 5)))
            fwd = lambda: l1_loss(dense(x, w, b), tgt)
            checked = [x, w, b]
        elif layer == "relu":
            x = Tensor(rng.standard_normal((4, 4)) + 0.3, requires_grad=True)
            tgt = Tensor(rng.standard_normal((4, 4)))
            fwd = lambda: l1_loss(relu(x), tgt)
            checked = [x]
        elif layer == "sigmoid":
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            tgt = Tensor(rng.standard_normal((4, 4)))
            fwd = lambda: l1_loss(sigmoid(x), tgt)
            checked = [x]
        else:
            x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            tgt = Tensor(rng.standard_normal((4, 4)))
            fwd = lambda: l1_loss(x * x, tgt)
            checked = [x]

        backward(fwd())
        for t in checked:
            numeric = finite_diff_grad(lambda: fwd().item(), t.data)
            assert_grads_close(t.grad, numeric)

    def test_repeat_with_reset_is_deterministic(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        k = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        tgt = Tensor(rng.standard_normal((1, 2, 4, 4)))

        def run():
            for t in (x, k, b):
                t.zero_grad()
            backward(l1_loss(conv2d(x, k, b, padding=1), tgt))
            return x.grad.copy(), k.grad.copy(), b.grad.copy()

        g1 = run()
        g2 = run()
        for a, bb in zip(g1, g2):
            np.testing.assert_array_equal(a, bb)


class TestAdam:
    def _params(self, value):
        p = ParamSet()
        p.add("x", Tensor(np.array(value), requires_grad=True))
        return p

    def test_zero_gradient_is_noop_at_any_t(self):
        p = self._params([1.0, -2.0])
        state = AdamState(p)
        for _ in range(5):
            p["x"].grad = np.zeros(2)
            adam_step(p, state, lr=0.1)
        np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])
        assert state.t == 5

    def test_first_step_closed_form(self):
        p = self._params([4.0])
        state = AdamState(p)
        g = np.array([0.25])
        p["x"].grad = g.copy()
        adam_step(p, state, lr=0.01)
        expected = 4.0 - 0.01 * g[0] / (abs(g[0]) + state.eps)
        np.testing.assert_allclose(p["x"].data, [expected], rtol=1e-12)

    def test_quadratic_descent_matches_reference(self):
        p = self._params(1.0)
        state = AdamState(p)
        for _ in range(100):
            p["x"].zero_grad()
            backward(mulself(p["x"]))
            adam_step(p, state, lr=0.1)
        ref = adam_scalar_reference(lambda x: 2.0 * x, 1.0, lr=0.1, steps=100)
        assert abs(p["x"].item() - ref) < 1e-12
        assert abs(p["x"].item()) < 0.1

    def test_missing_grad_rejected(self):
        p = self._params(1.0)
        with pytest.raises(ValueError, match="missing"):
            adam_step(p, AdamState(p), lr=0.1)


def mulself(t):
    return tensor_sum(t * t)


class TestParamSet:
    def test_unique_names_and_order(self):
        p = ParamSet()
        p.add("b", Tensor(np.zeros(2), requires_grad=True))
        p.add("a", Tensor(np.ones(3), requires_grad=True))
        assert p.names() == ["b", "a"]
        with pytest.raises(ValueError):
            p.add("a", Tensor(np.zeros(1)))

    def test_copy_is_deep(self):
        p = ParamSet()
        p.add("w", Tensor(np.ones(3), requires_grad=True))
        q = p.copy()
        q["w"].data[0] = 5.0
        assert p["w"].data[0] == 1.0
        assert q["w"].requires_grad


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        p = ParamSet()
        p.add("conv_in.weight", Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True))
        p.add("conv_in.bias", Tensor(rng.standard_normal(4), requires_grad=True))
        p.add("scalar", Tensor(np.array(3.25), requires_grad=True))
        path = tmp_path / "ck.bin"
        save_params(p, path)
        q = load_params(path)
        assert q.names() == p.names()
        for name in p:
            assert q[name].data.tobytes() == p[name].data.tobytes()
            assert q[name].requires_grad

    def test_binary_layout(self, tmp_path):
        p = ParamSet()
        p.add("w", Tensor(np.array([1.5, -2.0]), requires_grad=True))
        path = tmp_path / "ck.bin"
        save_params(p, path)
        blob = path.read_bytes()
        assert blob[:8] == b"ALTISR01"
        assert struct.unpack_from("<I", blob, 8)[0] == 1
        assert struct.unpack_from("<I", blob, 12)[0] == 1  # len("w")
        assert blob[16:17] == b"w"
        assert struct.unpack_from("<I", blob, 17)[0] == 1  # rank
        assert struct.unpack_from("<Q", blob, 21)[0] == 2  # dim
        np.testing.assert_array_equal(
            np.frombuffer(blob, dtype="<f8", count=2, offset=29), [1.5, -2.0]
        )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTAMAGIC")
        with pytest.raises(ValueError, match="magic"):
            load_params(path)
