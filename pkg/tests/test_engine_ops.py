"""Forward-path contracts of the tensor ops, checked against naive oracles."""
import numpy as np
import pytest

from sfbnet.engine import BatchNorm2d, Tensor, no_grad, ops
from sfbnet.errors import ConfigError, ContractError, DimensionError

rng = np.random.default_rng(1234)


def naive_conv2d(x, w, b, stride, padding):
    """Sliding-window dot-product reference."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oc in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[ni, oc, i, j] = (patch * w[oc]).sum()
            if b is not None:
                out[ni, oc] += b[oc]
    return out


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, None)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_strided_output_shape(self):
        x = Tensor(np.zeros((1, 1, 8, 8)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        out = ops.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4)

    def test_matches_sliding_window_oracle(self):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride, padding in [(1, 0), (2, 1), (1, 1)]:
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
            ref = naive_conv2d(x, w, b, stride, padding)
            assert np.abs(got - ref).max() < 1e-6

    def test_channel_mismatch_names_axes(self):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(DimensionError, match="axis 1"):
            ops.conv2d(x, w, None)

    def test_bad_stride_rejected(self):
        x = Tensor(np.zeros((1, 1, 5, 5)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            ops.conv2d(x, w, None, stride=0)


class TestConvTranspose2d:
    def test_stride2_doubles_spatial(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 2, 2)))
        out = ops.conv_transpose2d(x, w, None, stride=2)
        assert out.shape == (1, 1, 8, 8)

    def test_impulse_response_copies_kernel(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 3] = 1.0
        w = rng.standard_normal((1, 1, 3, 3))
        out = ops.conv_transpose2d(Tensor(x), Tensor(w), None, stride=1).data
        assert np.allclose(out[0, 0, 2:5, 3:6], w[0, 0])

    def test_forward_equals_conv_input_gradient(self):
        # conv_transpose2d(y) must equal the adjoint of conv2d: the gradient
        # of <conv2d(x), y> with respect to x.
        x = Tensor(rng.standard_normal((1, 2, 9, 9)), requires_grad=True)
        w = rng.standard_normal((3, 2, 3, 3))
        y = rng.standard_normal((1, 3, 5, 5))
        out = ops.conv2d(x, Tensor(w), None, stride=2, padding=1)
        ops.sum_(ops.mul(out, Tensor(y))).backward()
        adjoint = ops.conv_transpose2d(Tensor(y), Tensor(w), None,
                                       stride=2, padding=1)
        assert np.abs(x.grad - adjoint.data).max() < 1e-6

    def test_inner_product_adjoint_identity(self):
        # exact geometry: (H + 2p - K) divisible by the stride
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        y = rng.standard_normal((2, 4, 5, 5))
        cx = ops.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
        cty = ops.conv_transpose2d(Tensor(y), Tensor(w), None,
                                       stride=2, padding=1).data
        assert abs((cx * y).sum() - (x * cty).sum()) < 1e-5


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = ops.batch_norm2d(x, gamma, beta, np.zeros(3), np.ones(3),
                               training=True, update_running=False)
        assert np.abs(out.data).max() < 1e-3

    def test_zero_gamma_gives_beta(self):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        beta = np.array([1.0, -2.0, 0.5])
        out = ops.batch_norm2d(x, Tensor(np.zeros(3)), Tensor(beta),
                               np.zeros(3), np.ones(3), training=True,
                               update_running=False)
        assert np.allclose(out.data, beta.reshape(1, 3, 1, 1) * np.ones_like(x.data))

    def test_moments_after_normalization(self):
        x = Tensor(rng.standard_normal((4, 5, 8, 8)) * 3.0 + 2.0)
        out = ops.batch_norm2d(x, Tensor(np.ones(5)), Tensor(np.zeros(5)),
                               np.zeros(5), np.ones(5), training=True,
                               update_running=False).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-3

    def test_running_stats_update(self):
        bn = BatchNorm2d(2)
        x = Tensor(rng.standard_normal((8, 2, 4, 4)) + 5.0)
        bn(x, training=True)
        assert bn.batches_tracked[0] == 1
        assert np.all(bn.running_mean > 0)

    def test_eval_without_stats_is_config_error(self):
        bn = BatchNorm2d(2)
        x = Tensor(rng.standard_normal((2, 2, 4, 4)))
        with pytest.raises(ConfigError):
            bn(x, training=False)


class TestActivations:
    def test_gelu_zero(self):
        assert ops.gelu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_gelu_at_three(self):
        # x * Phi(x) at x=3, from the erf evaluation: 2.9959503059051097
        out = ops.gelu(Tensor(np.array([3.0], dtype=np.float64)))
        assert abs(out.data[0] - 2.9959503059051097) < 1e-9

    def test_gelu_monotone_nonnegative_axis(self):
        grid = np.linspace(0.0, 6.0, 200)
        vals = ops.gelu(Tensor(grid)).data
        assert np.all(np.diff(vals) >= 0)

    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5

    def test_sigmoid_symmetry(self):
        x = rng.standard_normal(64) * 4
        s = ops.sigmoid(Tensor(x)).data + ops.sigmoid(Tensor(-x)).data
        assert np.abs(s - 1.0).max() < 1e-6

    def test_sigmoid_extreme_negative_no_error(self):
        out = ops.sigmoid(Tensor(np.array([-1000.0]))).data
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(out).all()


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax_lastdim(Tensor(np.zeros(4))).data
        assert np.allclose(out, 0.25)

    def test_shift_invariance(self):
        x = rng.standard_normal((3, 5))
        a = ops.softmax_lastdim(Tensor(x)).data
        b = ops.softmax_lastdim(Tensor(x + 123.4)).data
        assert np.abs(a - b).max() < 1e-12

    def test_large_logit_stable(self):
        out = ops.softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
        assert np.isfinite(out).all()
        assert out[0] == 1.0 and out[1] == 0.0

    def test_rows_are_distributions(self):
        x = rng.standard_normal((6, 4, 9)) * 5
        out = ops.softmax_lastdim(Tensor(x)).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestLinear:
    def test_identity(self):
        x = rng.standard_normal((4, 3))
        out = ops.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x)

    def test_zero_weight_constant_bias(self):
        x = rng.standard_normal((2, 5, 3))
        b = np.array([1.0, 2.0])
        out = ops.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b))
        assert np.allclose(out.data, np.broadcast_to(b, (2, 5, 2)))

    def test_matches_matmul_oracle(self):
        x = rng.standard_normal((2, 7, 5))
        w = rng.standard_normal((4, 5))
        b = rng.standard_normal(4)
        out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
        ref = x @ w.T + b
        assert np.abs(out - ref).max() < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), None)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(rng.standard_normal(10), requires_grad=True)
        ops.sum_(ops.mul(x, x)).backward()
        assert np.allclose(x.grad, 2 * x.data)

    def test_constant_loss_leaves_grad_zero(self):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        loss = Tensor(np.array(3.0), requires_grad=True)
        loss.backward()
        assert np.all(x.grad_or_zeros() == 0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        with pytest.raises(ContractError):
            ops.mul(x, x).backward()

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ops.add(ops.mul(x, x), ops.mul(x, 2.0))  # x^2 + 2x
        ops.sum_(y).backward()
        assert np.allclose(x.grad, 2 * x.data + 2.0)

    def test_broadcast_bias_gradient(self):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        ops.sum_(ops.add(x, b)).backward()
        assert b.grad.shape == (1, 3, 1, 1)
        assert np.allclose(b.grad, 2 * 16)

    def test_no_grad_blocks_recording(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad
        assert y._backward_fn is None

    def test_forward_values_finite(self):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)) * 10)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        out = ops.gelu(ops.conv2d(x, w, None, 1, 1))
        assert np.isfinite(out.data).all()


class TestRearrangeOps:
    def test_pad_crop_roundtrip(self):
        x = Tensor(rng.standard_normal((1, 2, 5, 7)))
        padded = ops.pad2d(x, 3, 1)
        assert padded.shape == (1, 2, 8, 8)
        back = ops.crop2d(padded, 5, 7)
        assert np.array_equal(back.data, x.data)

    def test_roll_inverse(self):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        assert np.array_equal(ops.roll2d(ops.roll2d(x, -2, -2), 2, 2).data, x.data)

    def test_concat_split_roundtrip(self):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 3, 4))
        joined = ops.concat([Tensor(a), Tensor(b)], axis=1)
        parts = ops.split(joined, 2, axis=1)
        assert np.array_equal(parts[0].data, a)
        assert np.array_equal(parts[1].data, b)

    def test_take_rows_gathers(self):
        table = rng.standard_normal((5, 3))
        idx = np.array([4, 0, 0, 2])
        out = ops.take_rows(Tensor(table), idx)
        assert np.array_equal(out.data, table[idx])

    def test_deterministic_forward(self):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        a = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        b = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        assert np.array_equal(a, b)
