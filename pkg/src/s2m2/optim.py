"""First-order optimizers over lists of leaf tensors."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ValidationError
from .tensor import Tensor


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float):
        if not lr > 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _check_finite(self) -> None:
        for n, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(
                    f"non-finite gradient in parameter {n} ({p.name or p.shape}) "
                    f"at optimizer step {self.steps + 1}; step aborted")

    def step(self) -> None:
        self._check_finite()
        self.steps += 1
        for n, p in enumerate(self.params):
            if p.grad is not None:
                self._update(n, p)

    def _update(self, n: int, p: Tensor) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.05, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, n, p):
        v = self.velocity[n]
        v *= self.momentum
        v += p.grad
        p.data -= self.lr * v


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, n, p):
        g = p.grad
        m, v = self.m[n], self.v[n]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params, lr: float | None = None, momentum: float = 0.9) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=1e-3 if lr is None else lr)
    if kind in ("sgd", "sgd-momentum"):
        return SGD(params, lr=0.05 if lr is None else lr, momentum=momentum)
    raise ValidationError(f"unknown optimizer {kind!r}; expected 'adam' or 'sgd'")
