"""Adam optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class AdamState:
    """Per-parameter-set moments and step counter for Adam.

    Weight decay is decoupled: parameters are shrunk by lr * weight_decay
    before the moment update, so the decay never enters m or v.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def rebind(self, params: list[Tensor]) -> None:
        """Point the state at replacement parameter tensors (same shapes)."""
        if len(params) != len(self.params):
            raise ShapeError("rebind parameter count mismatch")
        for p, m in zip(params, self.m):
            if p.data.shape != m.shape:
                raise ShapeError(f"rebind shape mismatch: {p.data.shape} vs {m.shape}")
        self.params = list(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        """One Adam update; grads default to each parameter's .grad."""
        if grads is None:
            grads = [p.grad.data if p.grad is not None else np.zeros_like(p.data)
                     for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError("gradient count mismatch")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} mismatches parameter {p.data.shape}")
            new = p.data
            if self.weight_decay != 0.0:
                new = new - self.lr * self.weight_decay * new
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = new - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, grads: list[np.ndarray] | None = None) -> None:
    state.step(grads)
