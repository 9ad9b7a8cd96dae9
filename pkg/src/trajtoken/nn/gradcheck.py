"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["grad_check"]


def grad_check(
    fn,
    tensors: list[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the given tensors to a scalar Tensor.  All tensors are
    perturbed entry by entry; ``max_entries`` subsamples entries per tensor
    for large parameters.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = fn()
    out.backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1.0)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
