"""Meta-parameter optimizers: Adam (default) and plain SGD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Bias-corrected Adam over one flat parameter vector."""

    dim: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.m = np.zeros(self.dim)
        self.v = np.zeros(self.dim)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if grad.shape != (self.dim,) or params.shape != (self.dim,):
            raise ValueError(
                f"optimizer dimension {self.dim} does not match "
                f"params {params.shape} / grad {grad.shape}"
            )
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step_count)
        v_hat = self.v / (1 - self.beta2**self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class PlainSgdState:
    """params - lr * grad; used by tests and for unscaled interpolation steps."""

    dim: int
    lr: float = 1.0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad
