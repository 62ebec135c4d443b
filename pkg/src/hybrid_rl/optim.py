"""Gradient-descent and Adam updates over the trainable tensors of a snapshot."""
from __future__ import annotations

import numpy as np

from .config import OptimConfig
from .policy import PolicyParams


class Optimizer:
    """Descends ``grad`` on trainable tensors only; frozen tensors are never touched.

    Each call to :meth:`step` returns a new :class:`PolicyParams`.
    """

    def __init__(self, config: OptimConfig | None = None):
        self.config = config or OptimConfig()
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: PolicyParams, grad: dict[str, np.ndarray]) -> PolicyParams:
        cfg = self.config
        self.t += 1
        updated = {}
        for name in params.trainable:
            g = grad[name]
            if cfg.kind == "sgd":
                updated[name] = params[name] - cfg.lr * g
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - cfg.beta1 ** self.t)
            v_hat = v / (1 - cfg.beta2 ** self.t)
            updated[name] = params[name] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return params.replace(updated, step=params.step + 1)


def scale_grad(grad: dict[str, np.ndarray], factor: float) -> dict[str, np.ndarray]:
    return {k: factor * v for k, v in grad.items()}


def add_grads(a: dict[str, np.ndarray], b: dict[str, np.ndarray], wb: float = 1.0) -> dict[str, np.ndarray]:
    return {k: a[k] + wb * b[k] for k in a}
