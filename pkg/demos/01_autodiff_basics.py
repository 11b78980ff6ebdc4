# Autodiff engine walkthrough
# ---------------------------
# The package is built on a small reverse-mode engine: a Tensor wraps a
# numpy array, every op records how to push gradients back to its inputs,
# and backward() replays the recorded graph in reverse topological order.

import numpy as np

from sfbnet.engine import Tensor, gradcheck, ops

rng = np.random.default_rng(0)

# A scalar chain: loss = sum((x * w + b)^2)
x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
b = Tensor(np.ones((4, 3)), requires_grad=True)

y = ops.add(ops.mul(x, w), b)
loss = ops.sum_(ops.mul(y, y))
loss.backward()

print("loss          :", float(loss.data))
print("dL/dx == 2yw  :", np.allclose(x.grad, 2 * y.data * w.data))
print("dL/dw == 2yx  :", np.allclose(w.grad, 2 * y.data * x.data))

# The same machinery drives convolutions. conv2d is an explicit patch
# gather followed by one matrix multiply, so it is easy to cross-check.
img = Tensor(rng.standard_normal((1, 1, 6, 6)), requires_grad=True)
kernel = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
feat = ops.conv2d(img, kernel, None, stride=1, padding=1)
print("conv output   :", feat.shape)

# Every backward rule in the engine is validated against central finite
# differences in double precision. Here is the helper the tests use:
x64 = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
coeff = Tensor(rng.standard_normal((3, 5)))
err = gradcheck.check(lambda: ops.sum_(ops.mul(ops.gelu(x64), coeff)),
                      [x64], rng)
print("gelu grad err :", f"{err:.2e} (tolerance 1e-5)")
