"""Adam with bias correction, operating in place on parameter tensors."""

from __future__ import annotations

import numpy as np

from .tape import Tensor


class NumericalFaultError(ArithmeticError):
    """Raised when an update would propagate non-finite values."""


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8).

    Moment accumulators are allocated with exactly the shapes of the bound
    parameters. ``step`` applies one bias-corrected update in place.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} grads, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalFaultError("non-finite gradient")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
