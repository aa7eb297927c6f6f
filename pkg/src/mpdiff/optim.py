"""Adam and the warmup / inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / step)``."""
    if step <= 0:
        return 0.0
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(self.params, lr, self.beta1, self.beta2, self.eps, self.state)


def adam_step(
    params: dict[str, Tensor],
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    if not lr > 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    for name, p in params.items():
        if name not in state.m or state.m[name].shape != p.shape:
            raise ValueError(f"adam_step: optimizer state does not match parameter {name!r}")
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        if p.grad is None:
            g = np.zeros_like(p.data)
        else:
            g = p.grad.astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
