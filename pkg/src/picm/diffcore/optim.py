"""Adam and AdamW with an explicit freeze contract.

Only parameters whose ``trainable`` flag is set are ever registered, and
``step`` refuses to run when a registered parameter has no gradient: a
silent zero update usually means a wiring bug upstream.
"""

from __future__ import annotations

import numpy as np

from .layers import Parameter


class OptimError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction; weight_decay here is the L2-coupled form."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = []
        for p in params:
            if not isinstance(p, Parameter):
                raise OptimError("optimizer accepts Parameter instances only")
            if p.trainable:
                self.params.append(p)
        if not self.params:
            raise OptimError("no trainable parameters given")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grad(self, p):
        if p.grad is None:
            raise OptimError("parameter has no gradient; run backward() before step()")
        if p.grad.shape != p.data.shape:
            raise OptimError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        return p.grad

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.trainable:
                raise OptimError("parameter was frozen after optimizer construction")
            g = self._grad(p).astype(p.data.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * update.astype(p.data.dtype)
        return t


class AdamW(Adam):
    """Adam with decoupled weight decay applied directly to the weights."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        super().__init__(params, lr=lr, betas=betas, eps=eps, weight_decay=0.0)
        self.decoupled_decay = weight_decay

    def step(self):
        for p in self.params:
            self._grad(p)
        for p in self.params:
            p.data = p.data - self.lr * self.decoupled_decay * p.data
        return super().step()


def optimizer_step(optimizer):
    """Advance the optimizer by one step and return the new step count."""
    return optimizer.step()
