"""AdamW with decoupled weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Decay is applied directly to the parameter (never folded into the
    gradient) and skips every rank<=1 tensor: norm gains, biases, and
    start-token vectors stay undecayed.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-4, beta1=0.9, beta2=0.95,
                 eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None):
        """One update from the .grad fields; missing grads are treated as zero."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay > 0.0 and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment arrays under stable names, for checkpointing."""
        out = {}
        for name in sorted(self.params):
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        for name in self.params:
            self.m[name] = np.array(tensors[f"opt.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(tensors[f"opt.v.{name}"], dtype=np.float64)


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at step == total_steps."""
    if total_steps <= 0:
        raise ConfigError("cosine_lr: total_steps must be positive")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
