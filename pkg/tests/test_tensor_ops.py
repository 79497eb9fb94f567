"""Forward-pass contracts of the primitive ops against independent oracles."""

import numpy as np
import pytest

from mgunet import ops
from mgunet.errors import DimensionError
from mgunet.tensor import Tensor

from oracles import (bilinear_matrix, loop_avg_pool2d, loop_conv2d,
                     loop_matmul, loop_max_pool2d)


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestConv2d:
    def test_all_ones_3x3(self):
        x = t(np.ones((1, 1, 3, 3)))
        w = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros(1))
        out = ops.conv2d(x, w, b)
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        out = ops.conv2d(t(np.full((1, 1, 1, 1), 5.0)), t(np.ones((1, 1, 1, 1))), t(np.zeros(1)))
        assert out.data[0, 0, 0, 0] == 5.0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        got = ops.conv2d(t(x), t(w), t(b)).data
        want = loop_conv2d(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("stride,padding", [((1, 1), (1, 1)), ((2, 2), (0, 0)), ((2, 1), (1, 2))])
    def test_stride_padding_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        got = ops.conv2d(t(x), t(w), t(b), stride=stride, padding=padding).data
        want = loop_conv2d(x, w, b, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-12

    def test_channel_mismatch_raises(self, rng):
        x = t(rng.standard_normal((1, 3, 4, 4)))
        w = t(rng.standard_normal((2, 2, 3, 3)))
        with pytest.raises(DimensionError):
            ops.conv2d(x, w, t(np.zeros(2)))

    def test_kernel_larger_than_input_raises(self, rng):
        with pytest.raises(DimensionError):
            ops.conv2d(t(rng.standard_normal((1, 1, 2, 2))),
                       t(rng.standard_normal((1, 1, 3, 3))), t(np.zeros(1)))

    def test_1x1_fast_path_matches_oracle(self, rng):
        x = rng.standard_normal((2, 5, 4, 6))
        w = rng.standard_normal((3, 5, 1, 1))
        b = rng.standard_normal(3)
        got = ops.conv2d(t(x), t(w), t(b)).data
        want = loop_conv2d(x, w, b, stride=(1, 1), padding=(0, 0))
        assert np.max(np.abs(got - want)) < 1e-12


class TestPooling:
    def test_max_2x2(self):
        x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert ops.max_pool2d(x, (2, 2)).data[0, 0, 0, 0] == 4.0

    def test_avg_2x2(self):
        x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert ops.avg_pool2d(x, (2, 2)).data[0, 0, 0, 0] == 2.5

    def test_constant_preserved(self):
        x = t(np.full((1, 2, 4, 4), 3.25))
        assert np.all(ops.max_pool2d(x, (2, 2)).data == 3.25)
        assert np.all(ops.avg_pool2d(x, (2, 2)).data == 3.25)

    def test_max_matches_oracle(self, rng):
        x = rng.standard_normal((1, 3, 8, 8))
        got = ops.max_pool2d(t(x), (2, 2)).data
        assert np.array_equal(got, loop_max_pool2d(x, (2, 2)))

    def test_avg_matches_oracle(self, rng):
        x = rng.standard_normal((1, 3, 8, 8))
        got = ops.avg_pool2d(t(x), (4, 2)).data
        assert np.max(np.abs(got - loop_avg_pool2d(x, (4, 2)))) < 1e-12

    def test_non_divisible_raises(self, rng):
        with pytest.raises(DimensionError):
            ops.max_pool2d(t(rng.standard_normal((1, 1, 5, 4))), (2, 2))
        with pytest.raises(DimensionError):
            ops.avg_pool2d(t(rng.standard_normal((1, 1, 4, 6))), (4, 4))


class TestBilinearUpsample:
    def test_constant_image(self):
        x = t(np.full((1, 2, 3, 5), 1.5))
        out = ops.bilinear_upsample(x, 7, 11)
        assert out.data.shape == (1, 2, 7, 11)
        assert np.max(np.abs(out.data - 1.5)) < 1e-12

    def test_single_pixel_broadcast(self):
        out = ops.bilinear_upsample(t(np.full((1, 1, 1, 1), 2.75)), 5, 9)
        assert np.all(out.data == 2.75)

    def test_matches_matrix_oracle(self, rng):
        x = rng.standard_normal((1, 1, 2, 2))
        got = ops.bilinear_upsample(t(x), 4, 4).data
        want = (bilinear_matrix(2, 2, 4, 4) @ x.reshape(-1)).reshape(1, 1, 4, 4)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_matrix_oracle_larger(self, rng):
        x = rng.standard_normal((2, 3, 5, 7))
        got = ops.bilinear_upsample(t(x), 8, 13).data
        m = bilinear_matrix(5, 7, 8, 13)
        for n in range(2):
            for c in range(3):
                want = (m @ x[n, c].reshape(-1)).reshape(8, 13)
                assert np.max(np.abs(got[n, c] - want)) < 1e-12

    def test_downscale_rejected(self, rng):
        with pytest.raises(DimensionError):
            ops.bilinear_upsample(t(rng.standard_normal((1, 1, 4, 4))), 2, 4)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((4, 4))
        out = ops.matmul(t(np.eye(4)), t(m))
        assert np.max(np.abs(out.data - m)) < 1e-15

    def test_hand_example(self):
        out = ops.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_matches_loop_oracle(self, rng):
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        got = ops.matmul(t(a), t(b)).data
        assert np.max(np.abs(got - loop_matmul(a, b))) < 1e-12

    def test_batched_broadcast(self, rng):
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((5, 2))
        got = ops.matmul(t(a), t(b)).data
        for i in range(3):
            assert np.max(np.abs(got[i] - loop_matmul(a[i], b))) < 1e-12

    def test_inner_dim_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ops.matmul(t(rng.standard_normal((2, 3))), t(rng.standard_normal((4, 2))))


class TestSoftmaxChannels:
    def test_uniform_logits(self):
        x = t(np.zeros((1, 11, 2, 2)))
        p = ops.softmax_channels(x).data
        assert np.max(np.abs(p - 1.0 / 11.0)) < 1e-15

    def test_no_overflow(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0, 0, 0] = 1000.0
        p = ops.softmax_channels(t(x)).data
        assert np.isfinite(p).all()
        assert abs(p[0, 0, 0, 0] - 1.0) < 1e-12
        assert p[0, 1, 0, 0] < 1e-12

    def test_extended_precision_oracle(self, rng):
        x = rng.standard_normal((2, 6, 3, 4)) * 5
        p = ops.softmax_channels(t(x)).data
        xe = x.astype(np.longdouble)
        e = np.exp(xe)
        want = (e / e.sum(axis=1, keepdims=True)).astype(np.float64)
        assert np.max(np.abs(p - want)) < 1e-12

    def test_channel_sums_one(self, rng):
        x = rng.standard_normal((1, 11, 8, 8)) * 10
        p = ops.softmax_channels(t(x)).data
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-9
        assert p.min() >= 0.0


class TestElementwiseAndShape:
    def test_relu(self):
        out = ops.relu(t([-3.0, 0.0, 3.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 3.0])

    def test_concat_preserves_order_and_slices_back(self, rng):
        a = rng.standard_normal((1, 2, 3, 4))
        b = rng.standard_normal((1, 3, 3, 4))
        cat = ops.concat_channels([t(a), t(b)])
        assert cat.data.shape == (1, 5, 3, 4)
        assert np.array_equal(ops.slice_channels(cat, 0, 2).data, a)
        assert np.array_equal(ops.slice_channels(cat, 2, 5).data, b)

    def test_concat_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ops.concat_channels([t(rng.standard_normal((1, 2, 3, 4))),
                                 t(rng.standard_normal((1, 2, 3, 5)))])

    def test_channel_norm_moments(self, rng):
        x = rng.standard_normal((2, 4, 8, 8)) * 4 + 1
        out = ops.channel_norm(t(x), t(np.ones(4)), t(np.zeros(4))).data
        mu = out.mean(axis=(2, 3))
        var = out.var(axis=(2, 3))
        assert np.max(np.abs(mu)) < 1e-9
        assert np.max(np.abs(var - 1.0)) < 1e-6
        # exact: output variance is var/(var+eps)
        want = x.var(axis=(2, 3)) / (x.var(axis=(2, 3)) + 1e-5)
        assert np.max(np.abs(var - want)) < 1e-12

    def test_reductions(self, rng):
        x = rng.standard_normal((3, 4))
        assert abs(ops.reduce_sum(t(x)).data - x.sum()) < 1e-12
        assert np.max(np.abs(ops.reduce_mean(t(x), axis=1).data - x.mean(axis=1))) < 1e-12

    def test_pad_replicate_forward(self):
        x = t(np.arange(4.0).reshape(1, 1, 2, 2))
        out = ops.pad_replicate(x, (0, 1), (0, 1)).data
        want = np.array([[0, 1, 1], [2, 3, 3], [2, 3, 3]], dtype=float).reshape(1, 1, 3, 3)
        assert np.array_equal(out, want)

    def test_transpose2d_batched(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert np.array_equal(ops.transpose2d(t(x)).data, np.swapaxes(x, -1, -2))
