"""Central finite-difference verification of recorded adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from datkit.errors import ParameterError, PrecisionError
from datkit.tensor import Tensor, backward, no_grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0, max_coords: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return any shape; it is contracted with a fixed random
    projection so every output coordinate contributes.  Only inputs with
    ``requires_grad`` are perturbed.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_coords`` limits the
    check to a seeded random subset of coordinates per input (for models whose
    parameter count makes the full sweep impractical).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps={eps} outside [1e-7, 1e-3]")
    for t in inputs:
        if t.dtype != np.float64:
            raise PrecisionError(f"grad_check needs float64 inputs, got {t.dtype}")
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)

    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    for t in inputs:
        t.grad = None
    backward(out, proj)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
