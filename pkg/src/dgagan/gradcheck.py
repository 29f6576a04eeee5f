"""Central finite-difference oracle for the reverse-mode engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


def finite_difference_check(
    f: Callable[..., Tensor],
    at: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    denom_clamp: float = 1e-8,
) -> float:
    """Compare backward() gradients of the scalar function ``f`` against
    central differences at ``at``; returns the max relative error.

    All work is forced to double precision; the forward path under test is
    exactly the one the check perturbs, while the finite differences stay
    independent of any backward code.
    """
    tensors = [at] if isinstance(at, Tensor) else list(at)
    leaves = [Tensor(t.data.astype(np.float64).copy(), requires_grad=True) for t in tensors]

    out = f(*leaves)
    if out.size != 1:
        raise ValueError("finite_difference_check requires a scalar-valued function")
    out.backward()

    max_rel = 0.0
    for li, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(*leaves).item()
                flat[i] = orig - eps
                fm = f(*leaves).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            ad = analytic.reshape(-1)[i]
            denom = max(abs(fd), abs(ad), denom_clamp)
            max_rel = max(max_rel, abs(fd - ad) / denom)
    return max_rel
