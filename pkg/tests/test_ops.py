import math

import numpy as np
import pytest

from pysaan.autodiff import Tape, Tensor, backward, default_dtype
from pysaan.errors import DimensionError
from pysaan.gradcheck import finite_difference_check
from pysaan.ops import (
    BatchNormState,
    bce_with_logits,
    channel_l2_normalize,
    channel_max,
    channel_mean,
    concat,
    conv2d,
    global_pool,
    linear,
    pool2d,
    split,
    upsample2x_bilinear,
    batchnorm2d,
)


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum('nckl,ockl->no', patch, w) + b
    return out


def f64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestConv2d:
    @pytest.mark.parametrize('stride,padding', [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_matches_direct_loop(self, rng, stride, padding):
        x, w, b = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), atol=1e-12)

    def test_gradients(self, rng):
        with default_dtype(np.float64):
            report = finite_difference_check(
                lambda x, w, b: conv2d(x, w, b, stride=2, padding=1),
                [f64(rng, 2, 3, 7, 7), f64(rng, 4, 3, 3, 3), f64(rng, 4)])
        assert report.passed, report.max_rel_error

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestPooling:
    def test_max_pool_forward(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(pool2d(x, 'max', 2).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_max_pool_ties_route_to_first_argmax(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = pool2d(x, 'max', 2).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_avg_pool_and_global_pool_gradients(self, rng):
        report = finite_difference_check(lambda x: pool2d(x, 'avg', 2), [f64(rng, 2, 3, 4, 4)])
        assert report.passed
        report = finite_difference_check(lambda x: global_pool(x, 'max'), [f64(rng, 2, 3, 4, 4)])
        assert report.passed
        report = finite_difference_check(lambda x: global_pool(x, 'avg'), [f64(rng, 2, 3, 4, 4)])
        assert report.passed

    def test_channel_reductions(self, rng):
        x = rng.standard_normal((2, 5, 3, 3))
        np.testing.assert_allclose(channel_mean(Tensor(x)).data, x.mean(axis=1, keepdims=True))
        np.testing.assert_array_equal(channel_max(Tensor(x)).data, x.max(axis=1, keepdims=True))
        assert finite_difference_check(channel_max, [f64(rng, 2, 5, 3, 3)]).passed
        assert finite_difference_check(channel_mean, [f64(rng, 2, 5, 3, 3)]).passed


class TestNormalization:
    def test_l2_normalize_gives_unit_vectors(self, rng):
        out = channel_l2_normalize(Tensor(rng.standard_normal((2, 6, 4, 4)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_l2_normalize_zero_vector_is_zero(self):
        out = channel_l2_normalize(Tensor(np.zeros((1, 3, 1, 1))), eps=1e-6)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_l2_normalize_gradient(self, rng):
        assert finite_difference_check(channel_l2_normalize, [f64(rng, 2, 4, 3, 3)]).passed

    def test_batchnorm_training_statistics(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
        state = BatchNormState.create(3, np.float64)
        out = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_batchnorm_eval_uses_running_statistics(self):
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        x = Tensor(np.full((1, 1, 2, 2), 3.0))
        out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False)
        np.testing.assert_allclose(out.data, 2.0 / math.sqrt(4.0 + 1e-5))

    @pytest.mark.parametrize('training', [True, False])
    def test_batchnorm_gradients(self, rng, training):
        state = BatchNormState.create(3, np.float64)
        report = finite_difference_check(
            lambda x, g, b: batchnorm2d(x, g, b, BatchNormState.create(3, np.float64) if training else state,
                                        training),
            [f64(rng, 3, 3, 4, 4), f64(rng, 3), f64(rng, 3)])
        assert report.passed, report.max_rel_error


class TestResampling:
    def test_upsample_constant_stays_constant(self):
        out = upsample2x_bilinear(Tensor(np.full((1, 2, 3, 5), 0.25)))
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out.data, 0.25)

    def test_upsample_interpolates_between_neighbours(self):
        out = upsample2x_bilinear(Tensor(np.array([[[[0.0, 1.0]]]]))).data[0, 0, 0]
        np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])

    def test_upsample_gradient(self, rng):
        assert finite_difference_check(upsample2x_bilinear, [f64(rng, 2, 2, 3, 4)]).passed


class TestConcatSplit:
    def test_split_inverts_concat(self, rng):
        a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 5, 3, 3))
        parts = split(concat([Tensor(a), Tensor(b)], axis=1), [2, 5], axis=1)
        np.testing.assert_array_equal(parts[0].data, a)
        np.testing.assert_array_equal(parts[1].data, b)

    def test_concat_gradient(self, rng):
        report = finite_difference_check(lambda a, b: concat([a, b * 2.0], axis=1),
                                         [f64(rng, 1, 2, 2, 2), f64(rng, 1, 3, 2, 2)])
        assert report.passed

    def test_split_gradient(self, rng):
        report = finite_difference_check(lambda x: split(x, [1, 3], axis=1)[1] * 3.0, [f64(rng, 1, 4, 2, 2)])
        assert report.passed

    def test_concat_rejects_mismatched_shapes(self):
        with pytest.raises(DimensionError):
            concat([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


class TestLinearAndBce:
    def test_linear_gradient(self, rng):
        assert finite_difference_check(linear, [f64(rng, 3, 4), f64(rng, 2, 4), f64(rng, 2)]).passed

    def test_bce_values(self):
        out = bce_with_logits(Tensor(np.array([0.0, 50.0, -50.0])), np.array([1.0, 1.0, 0.0])).data
        np.testing.assert_allclose(out[0], math.log(2.0))
        assert out[1] < 1e-20 and out[2] < 1e-20

    def test_bce_gradient(self, rng):
        y = (rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64)
        assert finite_difference_check(lambda x: bce_with_logits(x, y), [f64(rng, 2, 1, 3, 3)]).passed
