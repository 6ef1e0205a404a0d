"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

# Gradients below this magnitude, relative to max(1, |f|), are treated as zero;
# central differences with step 1e-4 cannot resolve them from roundoff.
GRADIENT_FLOOR = 1e-6


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor. Inputs are expected in float64.
    With ``max_coords`` only that many randomly chosen coordinates per input
    are perturbed (the analytic gradient is still computed in full).
    Error per coordinate is ``|a - n| / max(|a|, |n|, GRADIENT_FLOOR * max(1, |f|))``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    floor = GRADIENT_FLOOR * max(1.0, abs(float(loss.data)))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(*inputs).data)
            flat[i] = orig - step
            down = float(f(*inputs).data)
            flat[i] = orig
            num = (up - down) / (2 * step)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
