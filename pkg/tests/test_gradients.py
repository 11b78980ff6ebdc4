"""Randomized finite-difference checks of every differentiable op.

All checks run in double precision; the engine's backward rules must agree
with central differences to better than 1e-5 relative error.
"""
import numpy as np
import pytest

from sfbnet.attention import BottleneckTransformer, RelPosBias, sw_mhsa
from sfbnet.engine import Tensor, gradcheck, ops
from sfbnet.loss import cross_entropy_loss, soft_dice_loss
from sfbnet.sfb import SwinFilterBlock

TOL = 1e-5


def weighted_sum(t: Tensor, coeff: Tensor) -> Tensor:
    return ops.sum_(ops.mul(t, coeff))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def run_check(f, tensors, rng, samples=4):
    err = gradcheck.check(f, tensors, rng, samples_per_tensor=samples)
    assert err < TOL, f"worst relative error {err:.3e}"


def test_conv2d_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 7, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    coeff = Tensor(rng.standard_normal((2, 4, 4, 4)))
    run_check(lambda: weighted_sum(ops.conv2d(x, w, b, 2, 1), coeff), [x, w, b], rng)


def test_conv_transpose2d_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4, 2, 2)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    coeff = Tensor(rng.standard_normal((2, 4, 10, 10)))
    run_check(lambda: weighted_sum(ops.conv_transpose2d(x, w, b, 2), coeff), [x, w, b], rng)


def test_batch_norm_gradients_train_and_eval(rng):
    x = Tensor(rng.standard_normal((3, 4, 5, 5)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(4), requires_grad=True)
    beta = Tensor(rng.standard_normal(4), requires_grad=True)
    running_mean, running_var = np.zeros(4), np.ones(4)
    coeff = Tensor(rng.standard_normal((3, 4, 5, 5)))
    run_check(lambda: weighted_sum(
        ops.batch_norm2d(x, gamma, beta, running_mean, running_var,
                         training=True, update_running=False), coeff),
        [x, gamma, beta], rng)
    run_check(lambda: weighted_sum(
        ops.batch_norm2d(x, gamma, beta, running_mean, running_var,
                         training=False), coeff),
        [x, gamma, beta], rng)


@pytest.mark.parametrize("op", [ops.gelu, ops.sigmoid, ops.softmax_lastdim,
                                ops.log_softmax_lastdim])
def test_elementwise_and_softmax_gradients(rng, op):
    x = Tensor(rng.standard_normal((3, 9)), requires_grad=True)
    coeff = Tensor(rng.standard_normal((3, 9)))
    run_check(lambda: weighted_sum(op(x), coeff), [x], rng)


def test_linear_and_layer_norm_gradients(rng):
    x = Tensor(rng.standard_normal((3, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 7)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(5) * 0.1, requires_grad=True)
    coeff = Tensor(rng.standard_normal((3, 5)))
    run_check(lambda: weighted_sum(ops.linear(x, w, b), coeff), [x, w, b], rng)

    gamma = Tensor(rng.standard_normal(7), requires_grad=True)
    beta = Tensor(rng.standard_normal(7), requires_grad=True)
    coeff2 = Tensor(rng.standard_normal((3, 7)))
    run_check(lambda: weighted_sum(
        ops.layer_norm_lastdim(x, gamma, beta), coeff2), [x, gamma, beta], rng)


def test_arithmetic_gradients(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)) + 3.0, requires_grad=True)
    coeff = Tensor(rng.standard_normal((3, 4)))
    run_check(lambda: weighted_sum(ops.div(a, b), coeff), [a, b], rng)
    run_check(lambda: weighted_sum(ops.sub(ops.mul(a, b), ops.add(a, b)), coeff),
              [a, b], rng)
    m1 = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    m2 = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    coeff_m = Tensor(rng.standard_normal((2, 3, 5)))
    run_check(lambda: weighted_sum(ops.matmul(m1, m2), coeff_m), [m1, m2], rng)


def test_take_rows_and_split_gradients(rng):
    table = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    idx = np.array([0, 3, 3, 5])
    coeff = Tensor(rng.standard_normal((4, 2)))
    run_check(lambda: weighted_sum(ops.take_rows(table, idx), coeff), [table], rng)

    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    coeff2 = Tensor(rng.standard_normal((2, 2)))
    run_check(lambda: weighted_sum(ops.split(x, 3, axis=1)[1], coeff2), [x], rng)


def test_windowed_attention_gradients(rng):
    q = Tensor(rng.standard_normal((1, 4, 7, 7)), requires_grad=True)
    k = Tensor(rng.standard_normal((1, 4, 7, 7)), requires_grad=True)
    v = Tensor(rng.standard_normal((1, 4, 7, 7)), requires_grad=True)
    bias = RelPosBias(3, 2, np.float64)
    bias.table.data[:] = rng.standard_normal(bias.table.shape) * 0.2
    coeff = Tensor(rng.standard_normal((1, 4, 7, 7)))
    # padded + shifted path exercises masks, rolls and the bias gather
    run_check(lambda: weighted_sum(sw_mhsa(q, k, v, 2, 3, bias=bias), coeff),
              [q, k, v, bias.table], rng, samples=3)


def test_bottleneck_transformer_gradients(rng):
    layer = BottleneckTransformer(8, 16, 4, np.random.default_rng(5), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
    coeff = Tensor(rng.standard_normal((2, 8, 4, 4)))
    tensors = [x] + list(layer.parameters())
    run_check(lambda: weighted_sum(layer(x), coeff), tensors, rng, samples=2)


def test_sfb_block_gradients(rng):
    block = SwinFilterBlock(4, 2, 4, np.random.default_rng(3), dtype=np.float64)
    block.bias1.table.data[:] = rng.standard_normal(block.bias1.table.shape) * 0.1
    block.bias2.table.data[:] = rng.standard_normal(block.bias2.table.shape) * 0.1
    block.gate_conv.weight.data[:] = rng.standard_normal(block.gate_conv.weight.shape) * 0.3
    f_enc = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    f_dec = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    coeff = Tensor(rng.standard_normal((2, 4, 8, 8)))
    tensors = [f_enc, f_dec] + list(block.parameters())
    run_check(lambda: weighted_sum(
        block(f_enc, f_dec, training=True, update_stats=False), coeff),
        tensors, rng, samples=2)


def test_loss_gradients(rng):
    logits = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    labels = rng.integers(0, 4, (2, 8, 8))
    run_check(lambda: soft_dice_loss(logits, labels), [logits], rng)
    run_check(lambda: cross_entropy_loss(logits, labels), [logits], rng)


def test_adjoint_identity_property(rng):
    # <conv(x), y> == <x, conv_transpose(y)> for matching geometry
    for _ in range(5):
        # exact geometry: (H + 2p - K) divisible by the stride
        x = rng.standard_normal((1, 2, 9, 9))
        w = rng.standard_normal((3, 2, 3, 3))
        y = rng.standard_normal((1, 3, 5, 5))
        cx = ops.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
        cty = ops.conv_transpose2d(Tensor(y), Tensor(w), None,
                                       stride=2, padding=1).data
        assert abs((cx * y).sum() - (x * cty).sum()) < 1e-5
