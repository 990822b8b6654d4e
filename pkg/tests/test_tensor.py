"""Kernel tests: elementwise/matrix/conv/pool ops against brute-force oracles,
softmax in extended precision, and backward-pass contracts."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssntraj import tensor as T
from ssntraj.errors import DimensionError, UsageError
from ssntraj.tensor import Tensor

# x * Phi(x) at 1.0, evaluated with mpmath erf before the build and frozen
GELU_AT_1 = 0.8413447460685429


class TestMatmul:
    def test_identity(self):
        b = np.arange(9.0).reshape(3, 3)
        out = T.matmul(Tensor(np.eye(3)), Tensor(b))
        assert np.array_equal(out.data, b)

    def test_scalar_case(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5))
        ref = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - ref).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5, 5))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2)))
        assert np.array_equal(out.data, x)

    def test_all_ones_kernel_on_constant_input(self):
        x = np.ones((1, 3, 3))
        k = np.ones((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 9.0

    def test_against_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 8, 8))
        k = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        ho = (8 + 2 * pad - 3) // stride + 1
        ref = np.zeros((4, ho, ho))
        for o in range(4):
            for i in range(ho):
                for j in range(ho):
                    acc = 0.0
                    for c in range(2):
                        for ki in range(3):
                            for kj in range(3):
                                acc += xp[c, i * stride + ki, j * stride + kj] * k[o, c, ki, kj]
                    ref[o, i, j] = acc + b[o]
        out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError, match="larger than padded input"):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 7, 7))), Tensor(np.zeros(1)))

    @given(h=st.integers(3, 12), w=st.integers(3, 12), k=st.integers(1, 5),
           s=st.integers(1, 3), p=st.integers(0, 2))
    @settings(max_examples=60, deadline=None)
    def test_output_shape_formula(self, h, w, k, s, p):
        if k > h + 2 * p or k > w + 2 * p:
            return
        out = T.conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((1, 1, k, k))),
                       Tensor(np.zeros(1)), stride=s, padding=p)
        assert out.shape == (1, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class TestElementwise:
    def test_fixed_points(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert T.tanh(Tensor([0.0])).data[0] == 0.0

    def test_gelu_at_one_matches_erf_oracle(self):
        out = T.gelu(Tensor([1.0]))
        assert abs(out.data[0] - GELU_AT_1) < 1e-15
        # recompute the frozen value with mpmath to keep the pin honest
        with mpmath.workdps(40):
            ref = mpmath.mpf(1) * (mpmath.mpf(1) + mpmath.erf(1 / mpmath.sqrt(2))) / 2
        assert abs(out.data[0] - float(ref)) < 1e-15

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0, abs=1e-12)
        assert out.data[1] == pytest.approx(1.0, abs=1e-12)

    def test_add_mul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        with pytest.raises(DimensionError):
            T.mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_no_nan_inf_on_bounded_inputs(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1e3, 1e3, size=(4, 4))
        for op in (T.sigmoid, T.tanh, T.gelu, lambda t: T.scale(t, 2.0), T.softmax_rows):
            out = op(Tensor(x))
            assert np.all(np.isfinite(out.data)), op


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = T.softmax_rows(Tensor([[3.3, 3.3, 3.3]]))
        assert np.abs(out.data - 1 / 3).max() < 1e-15

    def test_large_offset_does_not_overflow(self):
        x = 700.0
        out = T.softmax_rows(Tensor([[x, x - 1000.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_against_mpmath_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 7))
        out = T.softmax_rows(Tensor(x))
        with mpmath.workdps(50):
            for i in range(5):
                es = [mpmath.exp(mpmath.mpf(v)) for v in x[i]]
                total = mpmath.fsum(es)
                ref = np.array([float(e / total) for e in es])
                assert np.abs(out.data[i] - ref).max() < 1e-12

    @given(st.lists(st.lists(st.floats(-100, 100), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(lambda rows: len({len(r) for r in rows}) == 1))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, rows):
        out = T.softmax_rows(Tensor(np.array(rows)))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-9
        assert np.all(out.data >= 0)


class TestReductions:
    def test_avgpool_full_window_is_channel_mean(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 4, 4))
        out = T.avgpool2d(Tensor(x), 4, 1)
        assert out.shape == (3, 1, 1)
        assert np.abs(out.data[:, 0, 0] - x.mean(axis=(1, 2))).max() < 1e-12

    def test_constant_input_constant_output(self):
        out = T.avgpool2d(Tensor(np.full((2, 6, 6), 2.5)), 2, 2)
        assert np.abs(out.data - 2.5).max() < 1e-15

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 6, 6))
        out = T.avgpool2d(Tensor(x), 2, 2)
        ref = np.zeros((3, 3, 3))
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    ref[c, i, j] = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
        assert np.abs(out.data - ref).max() < 1e-12

    def test_window_exceeding_extent(self):
        with pytest.raises(DimensionError):
            T.avgpool2d(Tensor(np.zeros((1, 3, 3))), 4, 1)

    def test_sum_and_mean(self):
        x = np.arange(6.0).reshape(2, 3)
        assert T.tsum(Tensor(x)).item() == 15.0
        assert T.tmean(Tensor(x)).item() == 2.5


class TestBackward:
    def test_square_sum_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        assert np.array_equal(x.grad, [6.0])

    def test_linear_map_gradients(self):
        rng = np.random.default_rng(21)
        w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
        T.tsum(T.matmul(w, x)).backward()
        assert np.abs(w.grad - np.broadcast_to(x.data.T, (3, 4))).max() < 1e-15
        assert np.abs(x.grad[:, 0] - w.data.sum(axis=0)).max() < 1e-15

    def test_backward_on_non_scalar_raises(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(UsageError):
            T.add(x, x).backward()

    def test_backward_through_untracked_branch_is_noop(self):
        x = Tensor([2.0], requires_grad=True)
        y = Tensor([5.0])  # untracked
        T.tsum(T.mul(x, y)).backward()
        assert y.grad is None
        assert np.array_equal(x.grad, [5.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        sink = T.tsum(T.mul(x, x))
        sink.backward()
        sink.backward()
        assert np.array_equal(x.grad, [12.0])

    def test_zero_grad_resets(self):
        x = Tensor([3.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        x.zero_grad()
        assert x.grad is None

    def test_shared_operand_gradients_do_not_alias(self):
        # add hands the same upstream array to both parents; each leaf must
        # still accumulate independently
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        s = T.add(a, b)
        T.tsum(T.mul(s, s)).backward()
        assert np.array_equal(a.grad, b.grad)
        a.grad[0] = 99.0
        assert b.grad[0] != 99.0


class TestDeterminism:
    def test_bit_identical_op_sequence(self):
        def run():
            rng = np.random.default_rng(77)
            x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
            k = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
            out = T.gelu(T.conv2d(x, k, Tensor(np.zeros(2)), padding=1))
            sink = T.tsum(out)
            sink.backward()
            return out.data.tobytes(), x.grad.tobytes()

        assert run() == run()


class TestShapePlumbing:
    def test_wrap_angle_interval(self):
        vals = np.array([0.0, np.pi, -np.pi, 3 * np.pi, -2.5 * np.pi, 2 * np.pi])
        out = T.wrap_angle(Tensor(vals)).data
        assert np.all(out > -np.pi - 1e-15)
        assert np.all(out <= np.pi + 1e-15)
        assert out[1] == pytest.approx(np.pi)
        assert out[2] == pytest.approx(np.pi)  # -pi maps to the closed end
        assert out[5] == pytest.approx(0.0, abs=1e-12)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
        joined = T.concat([Tensor(a), Tensor(b)], axis=0)
        back = T.slice_axis(joined, 0, 2, 6)
        assert np.array_equal(back.data, b)

    def test_add_bias_broadcasts_rows_only(self):
        m = Tensor(np.zeros((2, 3)))
        out = T.add_bias(m, Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
        with pytest.raises(DimensionError):
            T.add_bias(m, Tensor([1.0, 2.0]))
