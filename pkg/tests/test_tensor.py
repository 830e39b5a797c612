import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcmamba import tensor as T
from pcmamba.tensor import Tape, Tensor
from pcmamba.verify import grad_check


def naive_conv(x, w, dilation, padding):
    """Six nested loops, cross-correlation."""
    c_in, H, W = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = H + 2 * padding - dilation * (k - 1)
    Wo = W + 2 * padding - dilation * (k - 1)
    out = np.zeros((c_out, Ho, Wo))
    for o, i, r, c, a, b in itertools.product(range(c_out), range(c_in), range(Ho), range(Wo), range(k), range(k)):
        out[o, r, c] += w[o, i, a, b] * xp[i, r + a * dilation, c + b * dilation]
    return out


class TestElementwise:
    def test_mul_identity(self):
        out = T.elementwise("mul", Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [1, 2, 3])

    def test_add_zero(self, rng):
        x = rng.standard_normal(7)
        np.testing.assert_array_equal(T.elementwise("add", Tensor(x, dtype=np.float64), 0.0).data, x)

    def test_exp_zero(self):
        assert T.elementwise("exp", Tensor([0.0])).data[0] == 1.0

    def test_broadcast_shape(self):
        assert T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3))).shape == (2, 3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_unsupported_kind(self):
        with pytest.raises(ValueError, match="unsupported"):
            T.elementwise("cosh", Tensor([1.0]))

    def test_arity(self):
        with pytest.raises(ValueError):
            T.elementwise("add", Tensor([1.0]))
        with pytest.raises(ValueError):
            T.elementwise("exp", Tensor([1.0]), Tensor([1.0]))

    def test_non_finite_is_an_error(self):
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
            T.log(Tensor([-1.0]))

    @given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4,), elements=st.floats(-5, 5)))
    def test_broadcast_grad_shapes(self, a, b):
        x = Tensor(a, requires_grad=True, dtype=np.float64)
        y = Tensor(b, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = T.tsum(x * y + y)
        tape.backward(loss)
        assert x.grad.shape == x.shape and y.grad.shape == y.shape
        np.testing.assert_allclose(y.grad, a.sum(axis=0) + 3)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        np.testing.assert_allclose(T.matmul(Tensor(np.eye(2)), Tensor(m, dtype=np.float64)).data, m)

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_zero(self, rng):
        out = T.matmul(Tensor(np.zeros((3, 2))), Tensor(rng.standard_normal((2, 4))))
        assert not out.data.any()

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self, f64, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        g = rng.standard_normal((3, 2))
        with Tape() as tape:
            loss = T.tsum(T.matmul(a, b) * g)
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_batched_weight_grad(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        r = grad_check(lambda: T.tsum(T.matmul(x, w) ** 2), {"x": x, "w": w})
        assert r.passed, r.measurements


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = rng.standard_normal((1, 5, 5))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_allclose(out.data, x)

    @pytest.mark.parametrize("dilation,padding", [(1, 0), (1, 1), (2, 2), (3, 1)])
    def test_loop_oracle(self, f64, rng, dilation, padding):
        x = rng.standard_normal((3, 8, 8))
        w = rng.standard_normal((2, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), dilation, padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, dilation, padding), rtol=1e-12, atol=1e-12)

    def test_receptive_field(self):
        # a single hot pixel spreads over k + (k-1)(d-1) = 5 columns
        x = np.zeros((1, 9, 9))
        x[0, 4, 4] = 1
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), dilation=2, padding=2)
        cols = np.nonzero(out.data[0].any(axis=0))[0]
        assert cols.max() - cols.min() + 1 == 5

    def test_same_padding(self):
        out = T.conv2d(Tensor(np.ones((2, 6, 6))), Tensor(np.ones((1, 2, 3, 3))), dilation=2, padding=2)
        assert out.shape == (1, 6, 6)

    def test_non_positive_output(self):
        with pytest.raises(ValueError, match="non-positive"):
            T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), dilation=2)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25)

    def test_closed_form(self):
        out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]), dtype=np.float64))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)

    def test_large_inputs_stay_finite(self):
        out = T.softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, 0.5)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
    def test_shift_invariance_and_simplex(self, x, c):
        a = T.softmax(Tensor(x, dtype=np.float64), axis=1).data
        b = T.softmax(Tensor(x + c, dtype=np.float64), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert (a > 0).all()
        np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


class TestBackward:
    def test_square(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True, dtype=np.float64)
        with Tape():
            loss = T.tsum(x * x)
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_independent_leaf(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        with Tape():
            loss = T.tsum(y * y) + T.tsum(x * 0.0)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_accumulates(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(x * 3.0)
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = x * 2.0
        with pytest.raises(ValueError, match="scalar"):
            T.backward(y)

    def test_no_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(RuntimeError):
            T.backward(T.tsum(x))

    def test_nothing_recorded_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        assert T.tsum(x * 2.0)._tape is None

    def test_each_node_visited_once(self):
        # a diamond graph: x feeds two paths that rejoin
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            a = x * 3.0
            loss = T.tsum(a * a + a)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2 * 6 * 3 + 3])

    @pytest.mark.parametrize("profile,tol", [("float64", 1e-6), ("float32", 1e-3)])
    def test_random_composite(self, profile, tol):
        with T.precision(profile):
            r = np.random.default_rng(3)
            a = Tensor(r.standard_normal((4, 3)), requires_grad=True)
            b = Tensor(r.standard_normal((3, 5)), requires_grad=True)
            c = Tensor(r.uniform(0.5, 2.0, (5,)), requires_grad=True)

            def fn():
                h = T.tanh(T.matmul(a, b)) * T.sqrt(c) + T.sigmoid(T.matmul(a, b))
                h = T.layer_norm(h, c, T.log(c))
                return T.tsum(T.log_softmax(h, axis=1) * T.gelu(h)) + T.tsum(T.exp(h * 0.1) / c)

            rep = grad_check(fn, {"a": a, "b": b, "c": c}, tol=tol)
        assert rep.passed, rep.measurements

    @pytest.mark.parametrize("op", ["exp", "expm1", "tanh", "sigmoid", "softplus", "gelu", "sqrt", "log"])
    def test_unary_primitives(self, f64, op):
        x = Tensor(np.random.default_rng(0).uniform(0.2, 2.0, (3, 4)), requires_grad=True)
        rep = grad_check(lambda: T.tsum(T.elementwise(op, x) * np.arange(12.0).reshape(3, 4)), {"x": x})
        assert rep.passed, rep.measurements

    def test_shape_primitives(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4, 2))

        def fn():
            s = T.stack([x, y], axis=0)[1] * T.flip(x, 2)
            s = T.concat([s, T.pad(x, [(0, 0), (0, 0), (1, 1)])[..., 1:5]], axis=0)
            s = T.permute_axis(s, [2, 0, 3, 1], axis=2) + T.transpose(T.reshape(y, (2, 4, 3)), (0, 2, 1))[[1, 0, 1, 0]]
            return T.tsum(T.mean(s, axis=0) * w[..., 0]) + T.tsum(T.maximum(x, y) * w[..., 1])

        rep = grad_check(fn, {"x": x, "y": y})
        assert rep.passed, rep.measurements


class TestDeterminism:
    def test_bit_identical(self, rng):
        a = rng.standard_normal((8, 8)).astype(np.float32)
        out1 = T.softmax(T.matmul(Tensor(a), Tensor(a)), axis=0).data
        out2 = T.softmax(T.matmul(Tensor(a), Tensor(a)), axis=0).data
        assert out1.tobytes() == out2.tobytes()


class TestPrecision:
    def test_default_is_32_bit(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_profile_switch(self):
        with T.precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_rejects_other_types(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, rng, dtype):
        t = Tensor(rng.standard_normal((2, 3, 4)), dtype=dtype)
        T.save_tensor(tmp_path / "t.pctn", t)
        back = T.load_tensor(tmp_path / "t.pctn")
        assert back.dtype == dtype and back.data.tobytes() == t.data.tobytes()

    def test_layout(self):
        buf = T.tensor_to_bytes(Tensor(np.arange(3.0), dtype=np.float64))
        assert buf[:4] == b"PCTN"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:12], "little") == 3
        assert buf[12] == 1
        assert len(buf) == 13 + 3 * 8

    def test_bad_magic(self):
        buf = bytearray(T.tensor_to_bytes(Tensor([1.0])))
        buf[:4] = b"XXXX"
        with pytest.raises(T.FormatError):
            T.tensor_from_bytes(bytes(buf))

    def test_truncated(self):
        buf = T.tensor_to_bytes(Tensor(np.ones((4, 4))))
        with pytest.raises(T.FormatError):
            T.tensor_from_bytes(buf[:-3])

    @given(st.lists(st.integers(1, 4), min_size=0, max_size=3))
    def test_any_shape(self, shape):
        t = Tensor(np.arange(int(np.prod(shape)), dtype=np.float32).reshape(shape))
        back, end = T.tensor_from_bytes(T.tensor_to_bytes(t))
        assert back.shape == tuple(shape) and end == len(T.tensor_to_bytes(t))
