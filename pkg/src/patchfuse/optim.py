"""Optimizers and the cosine learning-rate schedule.

Both optimizers mutate parameter tensors in place, outside any recording;
the training loops build a fresh tape per step and clear grads afterwards.
"""

from __future__ import annotations

import numpy as np


def cosine_lr(base_lr, step, total_steps):
    """Cosine annealing from ``base_lr`` at step 0 to exactly 0 at ``total_steps``.

    lr(t) = 0.5 * lr0 * (1 + cos(pi * t / T)), monotone nonincreasing on
    [0, T]; steps past T stay at 0.
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    t = min(step, total_steps)
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * t / total_steps))


def zero_grads(params):
    for tensor in params.values():
        tensor.grad = None


class Sgd:
    """Plain SGD with optional momentum; lr is passed per step (scheduled)."""

    def __init__(self, params, momentum=0.0):
        self.params = params
        self.momentum = float(momentum)
        self._velocity = (
            {name: np.zeros_like(t.data) for name, t in params.items()}
            if self.momentum
            else None
        )

    def step(self, lr):
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            if self._velocity is not None:
                v = self._velocity[name]
                v *= self.momentum
                v += tensor.grad
                tensor.data -= lr * v
            else:
                tensor.data -= lr * tensor.grad


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._t = 0

    def step(self):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self._t
        c2 = 1.0 - b2**self._t
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
