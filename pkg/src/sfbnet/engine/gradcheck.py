"""Central finite-difference checking of the backward pass."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_difference(f, tensor: Tensor, indices, h: float = 1e-3) -> np.ndarray:
    """Central-difference derivative of scalar ``f()`` w.r.t. selected entries.

    Uses the five-point (fourth-order) central stencil at step ``h``: the
    plain two-point stencil's O(h^2) truncation already exceeds 1e-5 on
    softmax-heavy compositions at h=1e-3, while a wrong backward rule is
    off by orders of magnitude either way. ``f`` must recompute the loss
    from the current value of ``tensor.data``.
    """
    flat = tensor.data.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for row, idx in enumerate(indices):
        orig = flat[idx]

        def eval_at(delta):
            flat[idx] = orig + delta
            return float(f().data)

        f1 = eval_at(h)
        f_1 = eval_at(-h)
        f2 = eval_at(2 * h)
        f_2 = eval_at(-2 * h)
        flat[idx] = orig
        out[row] = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = 1e-2) -> float:
    """Worst |analytic - numeric| scaled by max(|analytic|, |numeric|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(f, tensors, rng: np.random.Generator, samples_per_tensor: int = 4,
          h: float = 1e-3) -> float:
    """Worst relative error between autograd and finite differences.

    ``f`` builds and returns the scalar loss from the current data of
    ``tensors`` (all of which must require grad and be float64 for the
    stated tolerances to be meaningful).
    """
    for t in tensors:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        n = t.data.size
        k = min(samples_per_tensor, n)
        indices = rng.choice(n, size=k, replace=False)
        numeric = finite_difference(f, t, indices, h=h)
        analytic = t.grad_or_zeros().reshape(-1)[indices]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
