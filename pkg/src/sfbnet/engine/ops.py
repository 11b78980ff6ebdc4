"""Differentiable operations over :class:`~sfbnet.engine.tensor.Tensor`.

Every function computes its result with plain numpy, then registers a
closure that maps the output gradient back onto the inputs. Convolution
is realized as an explicit patch gather (im2col) followed by one matrix
multiply, so it can be checked directly against a sliding-window oracle.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from ..errors import ConfigError, DimensionError
from . import flops
from .tensor import Tensor, make_node


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _pair(a, b):
    """Coerce the operands of a binary op, keeping the tensor's precision.

    Python and numpy scalars arrive as strong-typed float64 zero-d arrays,
    which would silently promote a float32 graph; a bare scalar passed next
    to a Tensor therefore adopts the Tensor's dtype.
    """
    a_raw, b_raw = a, b
    a, b = as_tensor(a), as_tensor(b)
    if isinstance(a_raw, Tensor) and not isinstance(b_raw, Tensor) \
            and b.data.ndim == 0 and b.data.dtype != a.data.dtype:
        b = Tensor(b.data.astype(a.data.dtype))
    elif isinstance(b_raw, Tensor) and not isinstance(a_raw, Tensor) \
            and a.data.ndim == 0 and a.data.dtype != b.data.dtype:
        a = Tensor(a.data.astype(b.data.dtype))
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return make_node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = -a.data
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return make_node(out, (a,), backward, "neg")


# ---------------------------------------------------------------------------
# shape manipulation (zero-FLOP rearrangements)
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return make_node(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return make_node(out, (a,), backward, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return make_node(out, tuple(tensors), backward, "concat")


def split(a: Tensor, sections: int, axis: int) -> list:
    """Split into equal sections along ``axis`` (inverse of :func:`concat`)."""
    a = as_tensor(a)
    if a.data.shape[axis] % sections:
        raise DimensionError(
            f"cannot split axis {axis} of extent {a.data.shape[axis]} into "
            f"{sections} equal sections"
        )
    pieces = np.split(a.data, sections, axis=axis)
    outs = []
    for i, piece in enumerate(pieces):
        def backward(g, i=i):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                idx = [slice(None)] * a.data.ndim
                step = a.data.shape[axis] // sections
                idx[axis] = slice(i * step, (i + 1) * step)
                full[tuple(idx)] = g
                a.accumulate_grad(full)

        outs.append(make_node(np.ascontiguousarray(piece), (a,), backward, "split"))
    return outs


def pad2d(a: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes of an NCHW tensor."""
    a = as_tensor(a)
    if pad_bottom == 0 and pad_right == 0:
        return a
    out = np.pad(a.data, ((0, 0), (0, 0), (0, pad_bottom), (0, pad_right)))
    h, w = a.data.shape[2], a.data.shape[3]

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :, :h, :w])

    return make_node(out, (a,), backward, "pad2d")


def crop2d(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height``×``width`` region of an NCHW tensor."""
    a = as_tensor(a)
    if a.data.shape[2] == height and a.data.shape[3] == width:
        return a
    out = np.ascontiguousarray(a.data[:, :, :height, :width])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, :, :height, :width] = g
            a.accumulate_grad(full)

    return make_node(out, (a,), backward, "crop2d")


def roll2d(a: Tensor, shift_y: int, shift_x: int) -> Tensor:
    """Cyclic shift of the spatial axes of an NCHW tensor."""
    a = as_tensor(a)
    if shift_y == 0 and shift_x == 0:
        return a
    out = np.roll(a.data, (shift_y, shift_x), axis=(2, 3))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.roll(g, (-shift_y, -shift_x), axis=(2, 3)))

    return make_node(out, (a,), backward, "roll2d")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table; backward scatter-adds (for bias lookups)."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, index, g)
            table.accumulate_grad(acc)

    return make_node(out, (table,), backward, "take_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    flops.add(a.data.size)
    axes = axis if axis is not None else tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % a.data.ndim for ax in axes)

    def backward(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: lhs axis -1 is {a.data.shape[-1]}, "
            f"rhs axis -2 is {b.data.shape[-2]}"
        )
    out = np.matmul(a.data, b.data)
    flops.add(2 * out.size * a.data.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return make_node(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``y = x @ weight.T + bias``.

    ``weight`` has shape (d_out, d_in); every leading axis of ``x`` is
    preserved.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    d_out, d_in = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise DimensionError(
            f"linear: input last axis is {x.data.shape[-1]}, weight expects {d_in}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out2 = x2 @ weight.data.T
    tokens = x2.shape[0]
    flops.add(2 * tokens * d_in * d_out)
    if bias is not None:
        bias = as_tensor(bias)
        out2 = out2 + bias.data
        flops.add(tokens * d_out)
    out = out2.reshape(*lead, d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        if x.requires_grad:
            x.accumulate_grad((g2 @ weight.data).reshape(x.data.shape))
        if weight.requires_grad:
            weight.accumulate_grad(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# activations and normalizers
# ---------------------------------------------------------------------------

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf gelu: ``x * Phi(x)`` with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = x * cdf
    flops.add(out.size)

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a.accumulate_grad(g * (cdf + x * pdf))

    return make_node(out, (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    flops.add(s.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return make_node(s, (a,), backward, "sigmoid")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    flops.add(5 * s.size)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=-1, keepdims=True)
            a.accumulate_grad(s * (g - dot))

    return make_node(s, (a,), backward, "softmax")


def log_softmax_lastdim(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    flops.add(5 * out.size)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return make_node(out, (a,), backward, "log_softmax")


def layer_norm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine params must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    flops.add(4 * out.size)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gamma.data
            term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) \
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution via patch gather + matmul
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise DimensionError(
            f"conv geometry collapses: input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {pad}"
        )
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        i_end = i + stride * h_out
        for j in range(k):
            j_end = j + stride * w_out
            cols[:, :, i, j] = img[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * k * k, h_out * w_out), h_out, w_out


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, h_out, w_out)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * h_out
        for j in range(k):
            j_end = j + stride * w_out
            img[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, NCHW input and OIKK weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride={stride}, padding={padding} out of range")
    n, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if kh != kw:
        raise DimensionError(f"conv2d expects square kernels, got {kh}x{kw}")
    if c_in != c_in_w:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {c_in} channels, "
            f"weight axis 1 expects {c_in_w}"
        )
    k = kh
    cols, h_out, w_out = _im2col(x.data, k, stride, padding)
    w_flat = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w_flat, cols).reshape(n, c_out, h_out, w_out)
    flops.add(2 * n * c_out * h_out * w_out * c_in * k * k)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise DimensionError(
                f"conv2d bias must have shape ({c_out},), got {bias.data.shape}"
            )
        out = out + bias.data.reshape(1, c_out, 1, 1)
        flops.add(out.size)

    def backward(g):
        g_flat = g.reshape(n, c_out, h_out * w_out)
        if weight.requires_grad:
            gw = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_cols = np.matmul(w_flat.T, g_flat)
            x.accumulate_grad(_col2im(g_cols, x.data.shape, k, stride, padding))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution (the adjoint of conv2d with the same
    geometry). Weight layout is (c_in, c_out, K, K)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or padding < 0:
        raise ConfigError(
            f"conv_transpose2d: stride={stride}, padding={padding} out of range"
        )
    n, c_in, h, w = x.data.shape
    c_in_w, c_out, kh, kw = weight.data.shape
    if kh != kw:
        raise DimensionError(f"conv_transpose2d expects square kernels, got {kh}x{kw}")
    if c_in != c_in_w:
        raise DimensionError(
            f"conv_transpose2d channel mismatch: input axis 1 has {c_in} channels, "
            f"weight axis 0 expects {c_in_w}"
        )
    k = kh
    h_out = (h - 1) * stride + k - 2 * padding
    w_out = (w - 1) * stride + k - 2 * padding
    if h_out <= 0 or w_out <= 0:
        raise DimensionError(
            f"conv_transpose2d geometry collapses: input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    x_flat = x.data.reshape(n, c_in, h * w)
    w_flat = weight.data.reshape(c_in, c_out * k * k)
    cols = np.matmul(w_flat.T, x_flat)  # (n, c_out*k*k, h*w)
    out = _col2im(cols, (n, c_out, h_out, w_out), k, stride, padding)
    flops.add(2 * n * c_in * h * w * c_out * k * k)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise DimensionError(
                f"conv_transpose2d bias must have shape ({c_out},), got {bias.data.shape}"
            )
        out = out + bias.data.reshape(1, c_out, 1, 1)
        flops.add(out.size)

    def backward(g):
        g_cols, _, _ = _im2col(g, k, stride, padding)  # (n, c_out*k*k, h*w)
        if x.requires_grad:
            gx = np.matmul(w_flat, g_cols)
            x.accumulate_grad(gx.reshape(x.data.shape))
        if weight.requires_grad:
            gw = np.matmul(x_flat, g_cols.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5,
                 update_running: bool = True) -> Tensor:
    """Per-channel batch norm for NCHW tensors.

    Train mode normalizes with batch statistics and (optionally) updates
    the running estimates in place; eval mode normalizes with the running
    estimates. Callers are responsible for refusing eval mode when the
    running estimates were never populated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batch_norm2d affine params must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    m = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            unbiased = var * (m / max(m - 1, 1))
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    flops.add(4 * out.size)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scale = (gamma.data * inv).reshape(1, c, 1, 1)
            if training:
                g_sum = g.sum(axis=(0, 2, 3), keepdims=True)
                gx_sum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx_sum = gx_sum.reshape(1, c, 1, 1)
                g_sum = g_sum.reshape(1, c, 1, 1)
                x.accumulate_grad(scale * (g - g_sum / m - xhat * gx_sum / m))
            else:
                x.accumulate_grad(scale * g)

    return make_node(out, (x, gamma, beta), backward, "batch_norm2d")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> Tensor:
    """Constant one-hot encoding appended as a trailing class axis."""
    labels = np.asarray(labels)
    eye = np.eye(num_classes, dtype=dtype)
    return Tensor(eye[labels])
