"""Cross-attention gate on skip connections.

The block lets the decoder decide how much of each encoder activation
survives the skip connection. Two windowed attention stages (plain, then
shifted) run cross-attention with queries and keys projected from the
decoder map and values carrying the encoder content; a 1x1 conv plus
batch norm and a sigmoid turn the result into per-channel, per-position
weights in (0, 1), which rescale the encoder map elementwise.
"""
from __future__ import annotations

import numpy as np

from .attention import RelPosBias, WindowLayout, sw_mhsa, w_mhsa
from .engine import BatchNorm2d, Conv2d, Module, ops
from .engine.module import glorot_uniform
from .engine.tensor import Parameter, Tensor
from .errors import DimensionError


class ChannelLinear(Module):
    """Linear projection applied to the channel axis of an NCHW map."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(glorot_uniform(rng, (c_out, c_in), c_in, c_out, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tok = ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))
        tok = ops.linear(tok, self.weight, self.bias)
        out = ops.transpose(tok, (0, 2, 1))
        return ops.reshape(out, (n, self.weight.shape[0], h, w))


class SwinFilterBlock(Module):
    """Gate an encoder map with decoder-driven windowed cross-attention.

    Each attention stage owns separate query/key/value projections and its
    own relative position bias. By default the shifted stage keeps taking
    queries and keys from the decoder while its values carry the first
    stage's output; ``sw_self_attention=True`` switches the second stage to
    plain self-attention on that intermediate instead.

    The gate's 1x1 conv starts at zero so the initial weights are 0.5
    everywhere (an unbiased filter).
    """

    def __init__(self, channels: int, heads: int, window: int,
                 rng: np.random.Generator, dtype=np.float32,
                 sw_self_attention: bool = False):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.window = window
        self.sw_self_attention = sw_self_attention
        self.q1 = ChannelLinear(channels, channels, rng, dtype)
        self.k1 = ChannelLinear(channels, channels, rng, dtype)
        self.v1 = ChannelLinear(channels, channels, rng, dtype)
        self.q2 = ChannelLinear(channels, channels, rng, dtype)
        self.k2 = ChannelLinear(channels, channels, rng, dtype)
        self.v2 = ChannelLinear(channels, channels, rng, dtype)
        self.bias1 = RelPosBias(window, heads, dtype)
        self.bias2 = RelPosBias(window, heads, dtype)
        self.gate_conv = Conv2d(channels, channels, 1, rng, dtype=dtype, init="zeros")
        self.gate_norm = BatchNorm2d(channels, dtype=dtype)

    def gate_weights(self, f_enc: Tensor, f_dec: Tensor, training: bool,
                     update_stats: bool = True) -> Tensor:
        """The sigmoid gate map w, strictly inside (0, 1)."""
        n, c, h, w = f_enc.shape
        nd, cd, hd, wd = f_dec.shape
        if (h, w) != (hd, wd):
            raise DimensionError(
                f"encoder map is {h}x{w} but decoder map is {hd}x{wd}"
            )
        if c != self.channels or cd != self.channels:
            raise DimensionError(
                f"block built for {self.channels} channels, got encoder {c} "
                f"and decoder {cd}"
            )
        layout = WindowLayout(h, w, self.window, shift=0)
        intermediate = w_mhsa(
            self.q1(f_dec), self.k1(f_dec), self.v1(f_enc), self.heads,
            layout, bias=self.bias1, mask=layout.attention_mask(),
        )
        if self.sw_self_attention:
            ca_out = sw_mhsa(
                self.q2(intermediate), self.k2(intermediate),
                self.v2(intermediate), self.heads, self.window, bias=self.bias2,
            )
        else:
            ca_out = sw_mhsa(
                self.q2(f_dec), self.k2(f_dec), self.v2(intermediate),
                self.heads, self.window, bias=self.bias2,
            )
        pre = self.gate_norm(self.gate_conv(ca_out), training, update_stats)
        return ops.sigmoid(pre)

    def __call__(self, f_enc: Tensor, f_dec: Tensor, training: bool,
                 update_stats: bool = True) -> Tensor:
        w = self.gate_weights(f_enc, f_dec, training, update_stats)
        return ops.mul(f_enc, w)
