import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onecross import numerics as nm
from onecross.layers import AttentionConfig, SelfLayer
from onecross.model import ModelParams
from onecross.numerics import LOG_ZERO, NonFiniteError, ShapeError, Tensor
from onecross.training import ce_loss


def seeded(shape, seed=0, std=1.0):
    return np.random.default_rng(seed).normal(0.0, std, size=shape)


class TestMatmul:
    def test_identity(self):
        x = Tensor(seeded((3, 4), 1))
        out = nm.matmul(Tensor(np.eye(3)), x)
        assert np.array_equal(out.data, x.data)

    def test_hand_arithmetic(self):
        out = nm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.item() == 11.0

    def test_backward_vs_finite_differences(self):
        a = Tensor(seeded((3, 3), 2), requires_grad=True)
        b = Tensor(seeded((3, 3), 3), requires_grad=True)

        def f():
            return nm.sum_all(nm.mul(nm.matmul(a, b), nm.matmul(a, b)))

        report = nm.grad_check(f, {"a": a, "b": b}, h=1e-5, tol=1e-6)
        assert report.passed, report

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(Tensor(np.zeros(4)), axis=-1)
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_shift_invariance(self):
        x = seeded(6, 4)
        a = nm.softmax(Tensor(x), axis=-1).data
        b = nm.softmax(Tensor(x + 17.3), axis=-1).data
        assert np.allclose(a, b, atol=1e-12)

    def test_analytic(self):
        out = nm.softmax(Tensor([0.0, math.log(3.0)]), axis=-1)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    def test_rows_sum_to_one_and_open_interval(self, seed, n):
        x = Tensor(seeded((3, n), seed, std=5.0))
        y = nm.softmax(x, axis=-1).data
        assert np.all(y > 0) and np.all(y < 1)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            nm.softmax(Tensor(np.zeros((2, 2))), axis=2)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = Tensor(np.full((2, 5), 3.7))
        out = nm.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = nm.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_backward_vs_finite_differences(self):
        x = Tensor(seeded((3, 6), 5), requires_grad=True)
        g = Tensor(seeded(6, 6, 0.3) + 1.0, requires_grad=True)
        b = Tensor(seeded(6, 7, 0.3), requires_grad=True)

        def f():
            return nm.mean_all(nm.gelu(nm.layer_norm(x, g, b)))

        report = nm.grad_check(f, {"x": x, "gain": g, "bias": b}, h=1e-5, tol=1e-6)
        assert report.passed, report


class TestLogSumExp:
    def test_singleton(self):
        assert nm.log_sum_exp([math.log(0.4)]) == pytest.approx(math.log(0.4))

    def test_pair_of_ones(self):
        assert nm.log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0))

    def test_sentinel_is_absorbing(self):
        assert nm.log_sum_exp([LOG_ZERO, math.log(3.0)]) == pytest.approx(math.log(3.0))

    def test_all_sentinel(self):
        assert nm.log_sum_exp([LOG_ZERO, LOG_ZERO]) == LOG_ZERO

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
    def test_bounds(self, xs):
        out = nm.log_sum_exp(xs)
        assert out >= max(xs) - 1e-12
        assert out <= max(xs) + math.log(len(xs)) + 1e-12


class TestGradCheck:
    def test_sum_of_squares_analytic(self):
        x = Tensor(seeded(6, 8), requires_grad=True)

        def f():
            return nm.sum_all(nm.mul(x, x))

        report = nm.grad_check(f, {"x": x}, h=1e-5, tol=1e-8)
        assert report.passed, report
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_linear_softmax_cross_entropy(self):
        x = Tensor(seeded((4, 5), 9), requires_grad=True)
        w = Tensor(seeded((5, 5), 10), requires_grad=True)
        targets = [0, 3, 1, 4]

        def f():
            return ce_loss(nm.matmul(x, w), targets)

        report = nm.grad_check(f, {"x": x, "w": w}, h=1e-5, tol=1e-6)
        assert report.passed, report

    def test_full_self_layer(self):
        params = ModelParams(0)
        layer = SelfLayer(params, "l", AttentionConfig(16, 4, 24))
        x = Tensor(seeded((4, 16), 11), requires_grad=True)

        def f():
            return nm.mean_all(layer(x))

        named = {p: t for p, t in params.items()}
        named["x"] = x
        report = nm.grad_check(f, named, h=1e-5, tol=1e-4)
        assert report.passed, report

    def test_non_finite_function_is_diagnosed(self):
        x = Tensor(np.array([1e308]), requires_grad=True)

        def f():
            return nm.sum_all(nm.mul(x, x))

        with pytest.raises(NonFiniteError):
            nm.grad_check(f, {"x": x})


class TestAccumulation:
    def test_tensor_consumed_twice_sums_contributions(self):
        x = Tensor(seeded((3, 3), 12), requires_grad=True)
        a = Tensor(seeded((3, 3), 13), requires_grad=True)
        b = Tensor(seeded((3, 3), 14), requires_grad=True)

        def f():
            return nm.sum_all(nm.add(nm.matmul(x, a), nm.matmul(x, b)))

        report = nm.grad_check(f, {"x": x}, h=1e-5, tol=1e-7)
        assert report.passed, report
        x.zero_grad()
        f().backward()
        # grad of sum(x@a + x@b) w.r.t. x is ones @ (a+b)^T, twice accumulated
        expect = np.ones((3, 3)) @ (a.data + b.data).T
        assert np.allclose(x.grad, expect, atol=1e-12)


class TestMachinery:
    def test_forward_nonfinite_is_hard_error(self):
        x = Tensor(np.array([1e308]))
        with pytest.raises(NonFiniteError):
            nm.scale(nm.scale(x, 1e100), 1e100)

    def test_no_grad_records_nothing(self):
        x = Tensor(seeded(4, 15), requires_grad=True)
        with nm.no_grad():
            y = nm.scale(x, 2.0)
        assert y._record is None and not y.requires_grad

    def test_backward_needs_scalar(self):
        x = Tensor(seeded((2, 2), 16), requires_grad=True)
        with pytest.raises(ShapeError):
            nm.scale(x, 1.0).backward()

    def test_bias_add_broadcast_only_last_axis(self):
        x = Tensor(seeded((3, 4), 17))
        b = Tensor(seeded(4, 18))
        assert nm.add(x, b).shape == (3, 4)
        with pytest.raises(ShapeError):
            nm.add(x, Tensor(seeded(3, 19)))

    def test_grad_and_data_shapes_agree(self):
        x = Tensor(seeded((2, 5), 20), requires_grad=True)
        nm.sum_all(nm.gelu(x)).backward()
        assert x.grad.shape == x.data.shape
