"""Autodiff engine: forward values against direct loop oracles, gradients
against finite differences, and the engine's record-keeping rules."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conunetr import tensor as T
from conunetr.tensor import Tensor


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation, one output element at a time."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


def conv_transpose_loop(x, w, b, k):
    """Scatter each input pixel's kernel-weighted contribution."""
    B, Cin, H, W = x.shape
    Cout = w.shape[1]
    out = np.zeros((B, Cout, H * k, W * k))
    for n in range(B):
        for c in range(Cin):
            for i in range(H):
                for j in range(W):
                    out[n, :, i * k : (i + 1) * k, j * k : (j + 1) * k] += x[n, c, i, j] * w[c]
    return out + b.reshape(1, -1, 1, 1)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        gflat[i] = (fp - fm) / (2 * h)
    return g


class TestCreation:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_context(self):
        with T.float64():
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    @pytest.mark.parametrize("init", ["zeros", "constant", "uniform", "normal"])
    def test_create_shapes(self, init):
        t = T.create((2, 3), init, value=4.0, seed=0)
        assert t.shape == (2, 3)

    def test_create_values_count_mismatch(self):
        with pytest.raises(ValueError, match="6 elements"):
            T.create((2, 3), "values", values=[1, 2, 3])

    def test_create_is_seeded(self):
        a = T.create((4,), "normal", seed=7).data
        b = T.create((4,), "normal", seed=7).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("shape", [(0,), (2, 0)])
    def test_zero_extent_rejected(self, shape):
        with pytest.raises(ValueError, match="extent"):
            T.create(shape)

    def test_unknown_initialiser(self):
        with pytest.raises(ValueError, match="initialiser"):
            T.create((2,), "ones")

    def test_unsupported_dtype(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)


class TestForwardValues:
    def test_conv2d_hand_value(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        w = np.ones((1, 1, 2, 2))
        out = T.conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(out[0, 0], [[8.0, 12.0], [20.0, 24.0]])

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 0, 1)])
    def test_conv2d_matches_loop(self, rng, stride, padding, k):
        size = 7 if stride == 2 and padding == 1 else 6
        x = rng.normal(size=(2, 3, size, size))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        with T.float64():
            got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv2d_loop(x, w, b, stride, padding), atol=1e-12)

    def test_conv2d_bad_geometry(self):
        with pytest.raises(ValueError, match="positive integer"):
            T.conv2d(T.zeros((1, 1, 5, 5)), T.zeros((1, 1, 2, 2)), stride=2)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(T.zeros((1, 2, 4, 4)), T.zeros((1, 3, 3, 3)))

    def test_conv_transpose_matches_loop(self, rng):
        x, w, b = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)
        with T.float64():
            got = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
        np.testing.assert_allclose(got, conv_transpose_loop(x, w, b, 2), atol=1e-12)

    def test_conv_transpose_rejects_overlap(self):
        with pytest.raises(ValueError, match="kh == kw == stride"):
            T.conv_transpose2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 3, 3)), stride=2)

    def test_max_pool(self):
        x = np.array([[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 1.0], [0.0, 0.0, 1.0, 1.0], [9.0, 0.0, 1.0, 2.0]])
        out = T.max_pool2d(Tensor(x[None, None]), 2).data[0, 0]
        assert np.array_equal(out, [[5.0, 7.0], [9.0, 2.0]])

    def test_softmax_hand_value(self):
        with T.float64():
            s = T.softmax(Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(s, [1 / 3, 2 / 3], rtol=1e-15)

    def test_softmax_large_logits_stable(self):
        s = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s, [0.5, 0.5, 0.0])

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(3, 5))
        with T.float64():
            a = T.log_softmax(Tensor(x), axis=1).data
            b = np.log(T.softmax(Tensor(x), axis=1).data)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_gelu_values(self):
        # 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))) evaluated independently
        with T.float64():
            out = T.gelu(Tensor([-1.0, 0.0, 1.0, 2.0])).data
        np.testing.assert_allclose(out, [-0.15880800939172324, 0.0, 0.8411919906082768, 1.954597694087775], rtol=1e-14)

    def test_layer_norm_oracle(self, rng):
        x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
        with T.float64():
            out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * g + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_group_norm_oracle(self, rng):
        x, g, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)
        with T.float64():
            out = T.group_norm(Tensor(x), 2, Tensor(g), Tensor(b)).data
        ref = np.empty_like(x)
        for n in range(2):
            for grp in range(2):
                block = x[n, 2 * grp : 2 * grp + 2]
                ref[n, 2 * grp : 2 * grp + 2] = (block - block.mean()) / np.sqrt(block.var() + 1e-5)
        ref = ref * g.reshape(1, 4, 1, 1) + b.reshape(1, 4, 1, 1)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_group_norm_indivisible(self):
        with pytest.raises(ValueError, match="groups"):
            T.group_norm(T.zeros((1, 3, 2, 2)), 2, T.zeros((3,)), T.zeros((3,)))

    def test_matmul_rank_checks(self):
        with pytest.raises(ValueError, match="rank"):
            T.matmul(T.zeros((3,)), T.zeros((3, 2)))
        with pytest.raises(ValueError, match="inner"):
            T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))

    def test_broadcast_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
            T.zeros((2, 3)) + T.zeros((4,))

    def test_take_rows_out_of_range(self):
        with pytest.raises(IndexError):
            T.take_rows(T.zeros((3, 2)), [3])


class TestGradients:
    """Analytic float64 gradients against central differences of the same op."""

    CASES = {
        "mul_broadcast": (lambda a, b: (a * b).sum(), [(3, 4), (1, 4)]),
        "matmul": (lambda a, b: (a @ b).sum(), [(2, 3, 4), (4, 2)]),
        "softmax": (lambda a: (T.softmax(a, axis=0) * Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
        "layer_norm": (lambda x, g: (T.layer_norm(x, g, T.zeros((5,))) * Tensor(np.arange(15.0).reshape(3, 5))).sum(), [(3, 5), (5,)]),
        "conv2d": (lambda x, w: (T.conv2d(x, w, padding=1) * T.conv2d(x, w, padding=1)).sum(), [(1, 2, 4, 4), (3, 2, 3, 3)]),
        "conv_transpose2d": (lambda x, w: (T.conv_transpose2d(x, w) * T.conv_transpose2d(x, w)).sum(), [(1, 2, 2, 2), (2, 3, 2, 2)]),
        "getitem_repeat": (lambda a: (a[[0, 0, 2]] * a[[0, 0, 2]]).sum(), [(3, 2)]),
        "concat_slice": (lambda a, b: (T.slice_axis(T.concat([a, b], axis=0), 0, 1, 4) * T.slice_axis(T.concat([a, b], axis=0), 0, 1, 4)).sum(), [(2, 3), (3, 3)]),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_against_central_differences(self, rng, name):
        fn, shapes = self.CASES[name]
        arrays = [rng.normal(size=s) for s in shapes]
        with T.float64():
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            fn(*ts).backward()
            for i, t in enumerate(ts):
                def f(x, i=i):
                    with T.no_grad():
                        args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
                        return float(fn(*args).data)
                np.testing.assert_allclose(t.grad, numeric_grad(f, arrays[i].copy()), rtol=1e-6, atol=1e-7)

    def test_finite_diff_gradcheck_helper(self, rng):
        with T.float64():
            x = Tensor(rng.normal(size=(3, 3)))
            err = T.finite_diff_gradcheck(lambda t: T.exp(t).sum(), x)
        assert err < 1e-6


class TestRecord:
    def test_shared_subexpression_accumulates(self):
        with T.float64():
            x = Tensor([3.0], requires_grad=True)
            y = x * x
            (y + y).backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor([2.0], requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        assert x.grad[0] == pytest.approx(6.0)
        x.zero_grad()
        assert x.grad is None

    def test_record_released_after_backward(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * x).sum()
        y.backward()
        with pytest.raises(RuntimeError, match="computation record"):
            y.backward()

    def test_non_scalar_backward_needs_seed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2.0).backward()
        (x * 2.0).backward(np.ones(2))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_builds_no_record(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_constant_inputs_get_no_grad(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([5.0])
        (a * b).sum().backward()
        assert b.grad is None and a.grad[0] == 5.0

    def test_deep_chain_is_iterative(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    def test_check_finite(self):
        with T.check_finite():
            with pytest.raises(T.NonFiniteError, match="exp"):
                T.exp(Tensor([1000.0]))

    def test_division_by_tensor_unsupported(self):
        with pytest.raises(TypeError):
            Tensor([1.0]) / Tensor([2.0])


class TestProperties:
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=5), elements=st.floats(-30, 30)))
    def test_softmax_normalised(self, x):
        with T.float64():
            s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
        assert np.all(s >= 0)

    @given(
        hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
        hnp.arrays(np.float64, (4,), elements=st.floats(-5, 5)),
    )
    def test_broadcast_add_gradient_sums(self, a, b):
        with T.float64():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            (ta + tb).sum().backward()
        assert np.array_equal(ta.grad, np.ones((3, 4)))
        assert np.array_equal(tb.grad, np.full(4, 3.0))

    @given(hnp.arrays(np.float64, (2, 6), elements=st.floats(-10, 10)), st.floats(-5, 5))
    def test_softmax_shift_invariance(self, x, c):
        with T.float64():
            a = T.softmax(Tensor(x)).data
            b = T.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @given(hnp.arrays(np.float64, (1, 1, 4, 4), elements=st.floats(-10, 10), unique=True))
    def test_max_pool_gradient_routes_to_argmax(self, x):
        t = Tensor(x, requires_grad=True, dtype=np.float64)
        T.max_pool2d(t, 2).sum().backward()
        assert t.grad.sum() == 4.0
        assert np.all(t.grad[t.grad > 0] == 1.0)
        blocks = x.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
        picked = np.sort(x[t.grad == 1.0])
        assert np.array_equal(picked, np.sort(blocks.max(axis=1)))
