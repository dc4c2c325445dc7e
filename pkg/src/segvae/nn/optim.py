"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, arr):
        return cls(np.zeros_like(arr), np.zeros_like(arr), 0)


def adam_step(param, grad, state, lr, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """Update ``param`` (a Tensor or ndarray) in place; returns ``(param, state)``."""
    # ndarray also has a .data attribute (a memoryview), so test the type
    data = param if isinstance(param, np.ndarray) else param.data
    grad = np.asarray(grad)
    if grad.shape != data.shape or state.m.shape != data.shape:
        raise ValueError(f"adam_step: shapes differ ({data.shape}, {grad.shape}, {state.m.shape})")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * np.square(grad)
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(data.dtype, copy=False)
    return param, state
