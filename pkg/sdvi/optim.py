"""
Optimizer state and variance-reduction baselines.

Both operate on numpy arrays in place and ascend (the objectives here are
ELBOs and log-likelihoods, never losses).
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class AdamState:
    """Adam moments for one parameter array."""
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float) -> "AdamState":
        return cls(m=np.zeros_like(params, dtype=float), v=np.zeros_like(params, dtype=float), lr=lr)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """One bias-corrected ascent step; params is updated in place."""
        grad = np.asarray(grad, dtype=float).reshape(params.shape)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class MovingAverageBaseline:
    """
    Control variate for score-function gradients.

    The baseline used for a batch only depends on earlier batches, so the
    gradient stays unbiased. Before any history exists, each particle gets
    the mean of the other particles in its batch.
    """
    momentum: float = 0.9
    value: Optional[float] = field(default=None)

    def baselines(self, rewards: np.ndarray) -> np.ndarray:
        n = rewards.shape[0]
        if self.value is not None:
            return np.full(n, self.value)
        if n < 2:
            return np.zeros(n)
        return (rewards.sum() - rewards) / (n - 1)

    def update(self, rewards: np.ndarray) -> None:
        finite = rewards[np.isfinite(rewards)]
        if finite.size == 0:
            return
        mean = float(finite.mean())
        if self.value is None:
            self.value = mean
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * mean
