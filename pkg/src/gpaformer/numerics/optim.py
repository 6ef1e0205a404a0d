"""Learnable parameters and the AdamW update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    value: Tensor
    first_moment: np.ndarray = field(default=None)  # type: ignore[assignment]
    second_moment: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        if not isinstance(self.value, Tensor):
            self.value = Tensor(self.value)
        self.value.requires_grad = True
        if self.first_moment is None:
            self.first_moment = np.zeros_like(self.value.data)
        if self.second_moment is None:
            self.second_moment = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad = None


def adamw_step(p: Parameter, grad: np.ndarray | None, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> Parameter:
    """One AdamW update, in place.

    The bias-corrected Adam step is taken first; the weight decay then shrinks
    the updated value by ``lr * weight_decay`` without touching the moments.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    data = p.value.data
    g = np.zeros_like(data) if grad is None else np.asarray(grad, dtype=data.dtype)
    p.step_count += 1
    t = p.step_count
    p.first_moment *= beta1
    p.first_moment += (1.0 - beta1) * g
    p.second_moment *= beta2
    p.second_moment += (1.0 - beta2) * g * g
    m_hat = p.first_moment / (1.0 - beta1 ** t)
    v_hat = p.second_moment / (1.0 - beta2 ** t)
    data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(data.dtype)
    if weight_decay:
        data -= (lr * weight_decay) * data
    return p
