"""
Adam with global-norm gradient clipping and a linearly decaying step size.

Each update first rescales the whole gradient list so its global L2 norm is
at most ``clip_norm``, then applies Adam (beta1 0.9, beta2 0.999, eps 1e-8)
at ``base_lr * max(0, 1 - step / total_steps)``.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter
from .errors import ShapeMismatch

logger = logging.getLogger(__name__)


def linear_decay(base_lr: float, step: int, total_steps: int) -> float:
    """
    Learning rate after ``step`` updates of ``total_steps``.

    Example:
        >>> linear_decay(3e-4, 50, 100)
        0.00015
    """
    if total_steps <= 0:
        return 0.0
    return base_lr * max(0.0, 1.0 - step / total_steps)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(
    grads: Sequence[np.ndarray], max_norm: float
) -> tuple[list[np.ndarray], float]:
    """
    Rescale gradients so their global norm does not exceed ``max_norm``.

    Returns:
        tuple: (clipped gradients, norm before clipping).
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return [np.array(g, dtype=np.float64) for g in grads], norm


@dataclass
class OptimizerState:
    """Adam moments, step counter and schedule."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    base_lr: float = 3e-4
    total_steps: int = 1
    clip_norm: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    last_grad_norm: float = field(default=0.0)

    @classmethod
    def for_shapes(
        cls,
        shapes: Sequence[tuple[int, ...]],
        base_lr: float = 3e-4,
        total_steps: int = 1,
        clip_norm: float = 0.1,
    ) -> "OptimizerState":
        return cls(
            m=[np.zeros(s) for s in shapes],
            v=[np.zeros(s) for s in shapes],
            base_lr=base_lr,
            total_steps=total_steps,
            clip_norm=clip_norm,
        )

    @property
    def lr(self) -> float:
        """Step size the next update will use."""
        return linear_decay(self.base_lr, self.step, self.total_steps)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], opt: OptimizerState
) -> list[np.ndarray]:
    """
    One clipped Adam update.

    Args:
        params: Current parameter arrays.
        grads: Gradients, one per parameter.
        opt: Optimizer state; its moments and step counter advance.

    Returns:
        list[np.ndarray]: Updated parameters (new arrays).

    Raises:
        ShapeMismatch: If the lists or any shapes disagree.
    """
    if not len(params) == len(grads) == len(opt.m):
        raise ShapeMismatch(
            f"{len(params)} params, {len(grads)} grads, {len(opt.m)} moment slots"
        )
    for p, g, m in zip(params, grads, opt.m, strict=True):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape mismatch: param {p.shape}, grad {g.shape}, slot {m.shape}")

    lr = opt.lr
    clipped, opt.last_grad_norm = clip_global_norm(grads, opt.clip_norm)
    t = opt.step + 1
    updated = []
    for i, (p, g) in enumerate(zip(params, clipped, strict=True)):
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[i] / (1.0 - opt.beta1**t)
        v_hat = opt.v[i] / (1.0 - opt.beta2**t)
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    opt.step = t
    return updated


class Adam:
    """Adam over autograd Parameters, updating them in place."""

    def __init__(
        self,
        params: Sequence[Parameter],
        base_lr: float = 3e-4,
        total_steps: int = 1,
        clip_norm: float = 0.1,
    ) -> None:
        self.params = list(params)
        self.state = OptimizerState.for_shapes(
            [p.shape for p in self.params],
            base_lr=base_lr,
            total_steps=total_steps,
            clip_norm=clip_norm,
        )

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the learning rate used."""
        lr = self.state.lr
        new_values = adam_step([p.data for p in self.params], grads, self.state)
        for param, value in zip(self.params, new_values, strict=True):
            param.data = value
        return lr
