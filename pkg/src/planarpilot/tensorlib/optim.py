"""Adam with linear warmup and cosine learning-rate decay."""

from __future__ import annotations

import logging
import math

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam over a named parameter dict.

    The effective learning rate ramps linearly from 0 over ``warmup_steps``
    and then follows a cosine decay to 0 at ``decay_steps``. ``lr_at(0)`` is 0
    whenever warmup is enabled.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        warmup_steps: int = 100,
        decay_steps: int = 10_000,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if self.decay_steps <= self.warmup_steps:
            return self.lr
        frac = (step - self.warmup_steps) / (self.decay_steps - self.warmup_steps)
        frac = min(max(frac, 0.0), 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> bool:
        """Apply one update from the accumulated ``.grad`` fields.

        Returns False (and applies nothing) if any gradient is non-finite.
        """
        grads = {}
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                log.warning("adam: non-finite gradient for %r at step %d; update skipped", k, self.step_count)
                return False
            grads[k] = g

        lr_t = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
