# Lint as: python3
"""AdamW with decoupled weight decay and a linearly decaying learning rate."""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ScheduleError, ShapeError


@dataclass
class OptimizerState:
    """Moments and schedule of one AdamW optimizer.

    Args:
        lr (`float`): initial learning rate.
        total_steps (`int`): length of the linear decay; stepping past it raises [`ScheduleError`].
        betas (`tuple` of `float`): `(beta1, beta2)`.
        eps (`float`): denominator term.
        weight_decay (`float`): decoupled weight decay coefficient.
    """

    lr: float
    total_steps: int
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ScheduleError(f"total_steps must be at least 1, got {self.total_steps}")
        self.betas = tuple(self.betas)

    def current_lr(self) -> float:
        """Learning rate of the next step: `lr * (1 - step / total_steps)`."""
        if self.step >= self.total_steps:
            raise ScheduleError(f"Step budget of {self.total_steps} steps exhausted")
        return self.lr * (1.0 - self.step / self.total_steps)


def adamw_update(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptimizerState
) -> Dict[str, np.ndarray]:
    """Return updated copies of `params`; `opt` moments and step counter are advanced in place."""
    lr = opt.current_lr()
    beta1, beta2 = opt.betas
    t = opt.step + 1
    updated = {}
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}")
        m = opt.exp_avg.get(name)
        v = opt.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new = param * (1.0 - lr * opt.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        opt.exp_avg[name] = m
        opt.exp_avg_sq[name] = v
        updated[name] = new
    opt.step = t
    return updated
