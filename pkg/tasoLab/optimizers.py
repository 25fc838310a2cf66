from abc import ABC, abstractmethod
from typing import Dict, Tuple

import numpy as np

from .autodiff import Matrix
from .schema import OptimizerKind, TrainConfig
from .utils import ContractError


class BaseOptimizer(ABC):
    """Base class for optimizers over named, immutable parameter tensors.

    Each step returns fresh trainable Matrix objects; the caller swaps them in.
    Learning rates are passed per parameter so every adapted matrix can carry its own
    sparsity-scaled rate.
    """

    @abstractmethod
    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        pass

    def step(
            self,
            params: Dict[str, Matrix],
            grads: Dict[str, Matrix],
            lrs: Dict[str, float]
    ) -> Dict[str, Matrix]:
        updated = {}
        for key, param in params.items():
            if key not in grads:
                raise ContractError(f"no gradient for parameter {key!r}")
            new = self.update(key, param.data, grads[key].data, lrs[key])
            updated[key] = Matrix(new, trainable=True, name=param.name, dtype=param.dtype)
        return updated


class SGD(BaseOptimizer):
    """Plain gradient descent: theta <- theta - lr * g."""

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        return param - lr * grad


class Adam(BaseOptimizer):
    """Adam with bias correction.

    State for an entry whose gradient is always zero stays exactly zero, so masked
    factor entries never move.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict[str, Tuple[int, np.ndarray, np.ndarray]] = {}

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        t, m, v = self.state.get(key, (0, np.zeros_like(param), np.zeros_like(param)))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[key] = (t, m, v)
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig) -> BaseOptimizer:
    if config.optimizer == OptimizerKind.SGD:
        return SGD()
    return Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
