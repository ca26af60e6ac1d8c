"""Adaptive-moment gradient descent on a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    step_size: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    def step(self, x: np.ndarray, g: np.ndarray, step_size: float | None = None) -> np.ndarray:
        """Return the updated parameters; ``x`` is left untouched."""
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        if g.shape != self.m.shape:
            raise ValueError(f"gradient shape {g.shape} != state shape {self.m.shape}")
        lr = self.step_size if step_size is None else step_size
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)
