# The skip-connection gate
# ------------------------
# A SwinFilterBlock lets the decoder choose what survives the skip path.
# Queries and keys are projected from the decoder map, values carry the
# encoder content; two windowed attention stages (plain then shifted) feed
# a 1x1 conv + batch norm + sigmoid that yields weights in (0, 1), and the
# encoder map is rescaled elementwise by those weights.

import numpy as np

from sfbnet.engine import Tensor
from sfbnet.sfb import SwinFilterBlock

rng = np.random.default_rng(2)

block = SwinFilterBlock(channels=8, heads=2, window=4,
                        rng=np.random.default_rng(0))

f_enc = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
f_dec = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))

# Freshly built, the gate conv is zero, so the gate starts unbiased at 0.5.
gate = block.gate_weights(f_enc, f_dec, training=True, update_stats=False)
print("initial gate   : min %.3f  max %.3f" % (gate.data.min(), gate.data.max()))

# Randomize the gate conv to see a non-trivial filter.
block.gate_conv.weight.data[:] = 0.4 * rng.standard_normal(
    block.gate_conv.weight.shape).astype(np.float32)
gate = block.gate_weights(f_enc, f_dec, training=True, update_stats=False)
out = block(f_enc, f_dec, training=True, update_stats=False)

print("gate range     : (%.3f, %.3f) - strictly inside (0, 1)"
      % (gate.data.min(), gate.data.max()))
print("output shape   :", out.shape, "== encoder shape", f_enc.shape)
kept = np.abs(out.data) / np.maximum(np.abs(f_enc.data), 1e-12)
print("mean kept      : %.3f of the encoder magnitude" % kept.mean())

# The gate can only attenuate: zero encoder input stays zero.
zero_out = block(Tensor(np.zeros((1, 8, 16, 16))), f_dec,
                 training=True, update_stats=False)
print("zero encoder   : output all zero ->", bool((zero_out.data == 0).all()))
