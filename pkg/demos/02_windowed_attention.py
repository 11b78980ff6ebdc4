# Windowed and shifted-window attention
# -------------------------------------
# Attention runs inside non-overlapping M x M windows. The shifted variant
# rolls the feature map by floor(M/2) first so consecutive applications let
# information cross window borders, and an additive mask keeps positions
# that were never neighbours from attending to each other.

import numpy as np

from sfbnet.attention import WindowLayout, sw_mhsa, w_mhsa, window_merge, window_partition
from sfbnet.engine import Tensor

rng = np.random.default_rng(1)

# Partition an 8x8 map into 2x2 = 4 windows of 4x4 patches.
layout = WindowLayout(8, 8, 4)
x = Tensor(rng.standard_normal((1, 8, 8, 8)))
tokens = window_partition(x, layout)
print("window tokens  :", tokens.shape, "(windows x patches x channels)")

# The rearrangement is lossless.
back = window_merge(tokens, layout, batch=1)
print("merge roundtrip:", np.array_equal(back.data, x.data))

# Sizes that are not multiples of M get zero-padded bottom/right; padded
# positions are masked out of attention and cropped after merging.
ragged = WindowLayout(7, 9, 4)
print("padded canvas  :", (ragged.padded_height, ragged.padded_width),
      "->", ragged.num_windows, "windows")

# Plain windowed attention: with zero queries and keys every window
# averages its own values and nothing leaks between windows.
zero = Tensor(np.zeros((1, 8, 8, 8)))
v = Tensor(rng.standard_normal((1, 8, 8, 8)))
mean_per_window = w_mhsa(zero, zero, v, heads=1, layout=layout)
block = v.data[0, :, :4, :4].mean(axis=(1, 2))
print("uniform attn   :",
      np.allclose(mean_per_window.data[0, :, 0, 0], block))

# Shifted attention blocks pairs that only meet through the cyclic wrap.
q = Tensor(rng.standard_normal((1, 8, 8, 8)))
out, attn = sw_mhsa(q, q, v, heads=2, window=4, return_attn=True)
print("attention rows sum to one:",
      np.abs(attn.sum(axis=-1) - 1).max() < 1e-6)
print("some pairs exactly masked:", (attn == 0).any())
