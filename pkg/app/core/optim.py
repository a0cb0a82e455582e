"""
Adaptive-moment optimizer over named parameters
"""
import logging
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from app.core.errors import ShapeError
from app.core.tensor import Variable


logger = logging.getLogger(__name__)


def sgd_adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]],
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update.

    `step` is the 1-based count after this update. Missing gradients count as
    zero. Moment buffers are created (zero) on first use and updated in place
    in `moments`; returns the new parameter arrays.
    """
    updated: Dict[str, np.ndarray] = {}
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeError(f"adam: gradient shape {grad.shape} does not match parameter '{name}' {value.shape}")

        m, v = moments.get(name, (np.zeros_like(value), np.zeros_like(value)))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        moments[name] = (m, v)
        updated[name] = value - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return updated


class Adam:
    """Adam over a fixed dict of parameter Variables"""

    def __init__(
        self,
        params: Mapping[str, Variable],
        lr: float = 2e-4,
        betas: Tuple[float, float] = (0.5, 0.999),
        eps: float = 1e-8
    ):
        self.params: Dict[str, Variable] = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        updated = sgd_adam_step(
            {name: p.value for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.moments,
            self.step_count,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for name, value in updated.items():
            self.params[name].value = value

    def parameters(self) -> Iterable[Variable]:
        return self.params.values()
