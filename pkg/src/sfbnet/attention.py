"""Windowed multi-head attention with optional cyclic shift.

Feature maps are split into non-overlapping M x M windows and attention
runs independently inside each window. The shifted variant rolls the map
by floor(M/2) in both spatial directions first, so information can cross
window borders on alternating applications; positions that were not
neighbours before the roll are kept apart with an additive mask. Feature
sizes that are not multiples of M are zero-padded bottom/right, and the
padded positions are masked out of every attention row and cropped away
after merging.
"""
from __future__ import annotations

import numpy as np

from .engine import Module, Parameter, ops
from .engine.module import LayerNorm, Linear
from .engine.tensor import Tensor
from .errors import ConfigError, ContractError, DimensionError

MASK_VALUE = -1e9
_PAD_REGION = -1


class WindowLayout:
    """Partition of an H x W map into M x M windows, plus the shift mask data.

    ``region_ids`` labels each padded position with an integer such that two
    positions may attend each other iff their labels agree: padding gets a
    dedicated label, and under a cyclic shift the canvas is split into the
    usual nine bands so that positions wrapped together from opposite edges
    stay separated.
    """

    def __init__(self, height: int, width: int, window: int, shift: int = 0):
        if window <= 0:
            raise ContractError(f"window size must be positive, got {window}")
        if shift not in (0, window // 2):
            raise ConfigError(
                f"shift must be 0 or floor(M/2)={window // 2}, got {shift}"
            )
        self.height = height
        self.width = width
        self.window = window
        self.shift = shift
        self.pad_bottom = (window - height % window) % window
        self.pad_right = (window - width % window) % window
        self.padded_height = height + self.pad_bottom
        self.padded_width = width + self.pad_right
        self.windows_y = self.padded_height // window
        self.windows_x = self.padded_width // window
        self.num_windows = self.windows_y * self.windows_x
        self.region_ids = self._build_region_ids()

    def _build_region_ids(self) -> np.ndarray:
        hp, wp, m, s = self.padded_height, self.padded_width, self.window, self.shift
        ids = np.zeros((hp, wp), dtype=np.int64)
        if s > 0:
            bands = (slice(0, hp - m), slice(hp - m, hp - s), slice(hp - s, hp))
            bands_w = (slice(0, wp - m), slice(wp - m, wp - s), slice(wp - s, wp))
            count = 0
            for hs in bands:
                for ws in bands_w:
                    ids[hs, ws] = count
                    count += 1
        if self.pad_bottom:
            ids[self.height:, :] = _PAD_REGION
        if self.pad_right:
            ids[:, self.width:] = _PAD_REGION
        return ids

    def attention_mask(self) -> np.ndarray | None:
        """Additive (num_windows, M^2, M^2) mask, or None when nothing blocks."""
        if self.shift == 0 and not (self.pad_bottom or self.pad_right):
            return None
        ids = np.roll(self.region_ids, (-self.shift, -self.shift), axis=(0, 1))
        m = self.window
        ids = ids.reshape(self.windows_y, m, self.windows_x, m)
        ids = ids.transpose(0, 2, 1, 3).reshape(self.num_windows, m * m)
        blocked = ids[:, :, None] != ids[:, None, :]
        return np.where(blocked, MASK_VALUE, 0.0)

    def matches(self, height: int, width: int) -> bool:
        return self.height == height and self.width == width


def window_partition(x: Tensor, layout: WindowLayout) -> Tensor:
    """Rearrange NCHW into (N * num_windows, M^2, C) window tokens.

    Applies the layout's padding and cyclic shift first; the rearrangement
    itself is lossless.
    """
    n, c, h, w = x.shape
    if not layout.matches(h, w):
        raise DimensionError(
            f"layout built for {layout.height}x{layout.width} applied to {h}x{w}"
        )
    m = layout.window
    x = ops.pad2d(x, layout.pad_bottom, layout.pad_right)
    if layout.shift:
        x = ops.roll2d(x, -layout.shift, -layout.shift)
    x = ops.reshape(x, (n, c, layout.windows_y, m, layout.windows_x, m))
    x = ops.transpose(x, (0, 2, 4, 3, 5, 1))  # n, wy, wx, my, mx, c
    return ops.reshape(x, (n * layout.num_windows, m * m, c))


def window_merge(windows: Tensor, layout: WindowLayout, batch: int) -> Tensor:
    """Inverse of :func:`window_partition`; exact round trip."""
    m = layout.window
    bw, tokens, c = windows.shape
    if tokens != m * m or bw != batch * layout.num_windows:
        raise DimensionError(
            f"window tensor {windows.shape} does not match layout "
            f"({layout.num_windows} windows of {m * m} tokens, batch {batch})"
        )
    x = ops.reshape(windows, (batch, layout.windows_y, layout.windows_x, m, m, c))
    x = ops.transpose(x, (0, 5, 1, 3, 2, 4))  # n, c, wy, my, wx, mx
    x = ops.reshape(x, (batch, c, layout.padded_height, layout.padded_width))
    if layout.shift:
        x = ops.roll2d(x, layout.shift, layout.shift)
    return ops.crop2d(x, layout.height, layout.width)


class RelPosBias(Module):
    """Learnable attention bias indexed by relative patch offset.

    One table row per offset pair (dy, dx) in [-(M-1), M-1]^2 and one column
    per head; materializes to a per-head M^2 x M^2 matrix in which the entry
    for a patch pair depends only on the difference of their coordinates.
    """

    def __init__(self, window: int, heads: int, dtype=np.float32):
        super().__init__()
        self.window = window
        self.heads = heads
        side = 2 * window - 1
        self.table = Parameter(np.zeros((side * side, heads), dtype=dtype))
        coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                      indexing="ij")).reshape(2, -1)
        rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
        self.index = (rel[0] * side + rel[1]).reshape(-1)

    def materialize(self) -> Tensor:
        """Bias as a (heads, M^2, M^2) tensor ready to add to logits."""
        m2 = self.window * self.window
        rows = ops.take_rows(self.table, self.index)  # (M^4, heads)
        rows = ops.reshape(rows, (m2, m2, self.heads))
        return ops.transpose(rows, (2, 0, 1))


def w_mhsa(q_src: Tensor, k_src: Tensor, v_src: Tensor, heads: int,
           layout: WindowLayout, bias: RelPosBias | None = None,
           mask: np.ndarray | None = None, return_attn: bool = False):
    """Windowed multi-head scaled-dot-product attention over NCHW maps.

    ``q_src``/``k_src`` and ``v_src`` may have different channel counts; the
    output keeps the value channels and the input spatial size. ``mask`` is
    an additive (num_windows, M^2, M^2) array; ``bias`` is added per head.
    """
    n, cq, h, w = q_src.shape
    _, ck, hk, wk = k_src.shape
    _, cv, hv, wv = v_src.shape
    if (h, w) != (hk, wk) or (h, w) != (hv, wv):
        raise DimensionError(
            f"attention sources must share spatial dims, got {h}x{w}, "
            f"{hk}x{wk}, {hv}x{wv}"
        )
    if cq != ck:
        raise DimensionError(f"query has {cq} channels but key has {ck}")
    if cq % heads or cv % heads:
        raise ConfigError(
            f"channel counts ({cq} query, {cv} value) must be divisible by "
            f"{heads} heads"
        )
    m = layout.window
    m2 = m * m
    dq = cq // heads
    dv = cv // heads
    nw = layout.num_windows

    def to_heads(src, c, d):
        tok = window_partition(src, layout)  # (n*nw, m2, c)
        tok = ops.reshape(tok, (n * nw, m2, heads, d))
        return ops.transpose(tok, (0, 2, 1, 3))  # (n*nw, heads, m2, d)

    q = to_heads(q_src, cq, dq)
    k = to_heads(k_src, ck, dq)
    v = to_heads(v_src, cv, dv)

    logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    logits = ops.mul(logits, 1.0 / np.sqrt(dq))
    if bias is not None:
        logits = ops.add(logits, bias.materialize())
    if mask is not None:
        logits = ops.reshape(logits, (n, nw, heads, m2, m2))
        logits = ops.add(logits, mask[None, :, None, :, :].astype(q.dtype))
        logits = ops.reshape(logits, (n * nw, heads, m2, m2))
    attn = ops.softmax_lastdim(logits)
    out = ops.matmul(attn, v)  # (n*nw, heads, m2, dv)
    out = ops.transpose(out, (0, 2, 1, 3))
    out = ops.reshape(out, (n * nw, m2, cv))
    merged = window_merge(out, layout, n)
    if return_attn:
        return merged, attn.data.reshape(n, nw, heads, m2, m2)
    return merged


def sw_mhsa(q_src: Tensor, k_src: Tensor, v_src: Tensor, heads: int,
            window: int, bias: RelPosBias | None = None,
            return_attn: bool = False):
    """Shifted-window attention: cyclic shift, masked w_mhsa, inverse shift.

    The shift and its inverse are carried by the layout, so this is w_mhsa
    under a layout whose shift is floor(M/2) with the matching mask.
    """
    _, _, h, w = q_src.shape
    layout = WindowLayout(h, w, window, shift=window // 2)
    return w_mhsa(q_src, k_src, v_src, heads, layout,
                  bias=bias, mask=layout.attention_mask(),
                  return_attn=return_attn)


class BottleneckTransformer(Module):
    """One conventional pre-norm transformer encoder layer on the bottleneck.

    Flattens the map to tokens, adds a learnable absolute position embedding,
    then applies global multi-head self-attention and a two-layer gelu MLP
    (hidden width 4x), each behind a residual connection.
    """

    def __init__(self, channels: int, tokens: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        super().__init__()
        if channels % heads:
            raise ConfigError(
                f"bottleneck channels ({channels}) not divisible by heads ({heads})"
            )
        self.channels = channels
        self.tokens = tokens
        self.heads = heads
        self.pos_emb = Parameter(
            (0.02 * rng.standard_normal((1, tokens, channels))).astype(dtype))
        self.norm1 = LayerNorm(channels, dtype=dtype)
        self.qkv = Linear(channels, 3 * channels, rng, dtype=dtype, init="glorot")
        self.proj = Linear(channels, channels, rng, dtype=dtype, init="glorot")
        self.norm2 = LayerNorm(channels, dtype=dtype)
        self.mlp_in = Linear(channels, mlp_ratio * channels, rng, dtype=dtype)
        self.mlp_out = Linear(mlp_ratio * channels, channels, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels or h * w != self.tokens:
            raise DimensionError(
                f"transformer built for {self.tokens} tokens x {self.channels} "
                f"channels, got map {c}x{h}x{w}"
            )
        t = h * w
        d = c // self.heads
        tok = ops.transpose(ops.reshape(x, (n, c, t)), (0, 2, 1))
        tok = ops.add(tok, self.pos_emb)

        normed = self.norm1(tok)
        qkv = self.qkv(normed)  # (n, t, 3c)
        q, k, v = ops.split(qkv, 3, axis=2)
        q, k, v = (ops.transpose(ops.reshape(p, (n, t, self.heads, d)), (0, 2, 1, 3))
                   for p in (q, k, v))  # (n, heads, t, d)
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
        attn = ops.softmax_lastdim(logits)
        ctx = ops.matmul(attn, v)  # (n, heads, t, d)
        ctx = ops.transpose(ctx, (0, 2, 1, 3))
        ctx = ops.reshape(ctx, (n, t, c))
        tok = ops.add(tok, self.proj(ctx))

        tok = ops.add(tok, self.mlp_out(ops.gelu(self.mlp_in(self.norm2(tok)))))

        out = ops.transpose(tok, (0, 2, 1))
        return ops.reshape(out, (n, c, h, w))
