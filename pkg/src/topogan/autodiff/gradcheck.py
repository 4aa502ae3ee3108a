"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare reverse-mode gradients of a scalar function with central differences.

    ``fn`` is re-evaluated with perturbed values of ``inputs`` (which must be
    64-bit leaf tensors with ``requires_grad``). Up to ``max_coords``
    coordinates per input are sampled. The step for a coordinate is
    ``h * max(1, |value|)``.

    Returns:
        max over sampled coordinates of
        ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit inputs")
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            step = h * max(1.0, abs(original))
            flat[i] = original + step
            f_plus = fn().item()
            flat[i] = original - step
            f_minus = fn().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2 * step)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
