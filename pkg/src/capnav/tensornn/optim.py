"""Adam with bias correction and global gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capnav.tensornn.autograd import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update."""
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [None if g is None else g * scale for g in grads]
    return grads, total


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, max_grad_norm: float = 1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad`` buffers; returns the pre-clip norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        grads, norm = clip_grad_norm(grads, self.max_grad_norm)
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return norm
