"""Adam with bias-corrected moments, on flat float64 parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, theta: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(theta, dtype=float), np.zeros_like(theta, dtype=float), **kw)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float = 1e-3) -> np.ndarray:
    """Return the updated parameters; ``state`` is advanced in place."""
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError("theta, gradient and moments must share a shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
