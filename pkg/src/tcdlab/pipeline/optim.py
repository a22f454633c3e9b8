"""Adam with decoupled weight decay and a linear warmup / linear decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor
from ..errors import NumericError


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0 -> peak over ``warmup_steps``, then linear peak -> 0 at ``total_steps``."""
    if step <= 0:
        return 0.0
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def decays(name: str, param: Tensor) -> bool:
    """Weight decay applies to matrices only; LN gains/shifts and biases are 1-D."""
    return param.ndim >= 2


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, rate: float) -> None:
    """One in-place update of every parameter that has a gradient.

    Parameters whose ``grad`` is None (frozen, or experts that received no
    tokens this step) are left untouched, moments included.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        t = state.steps[name] = state.steps[name] + 1
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay and decays(name, p):
            update = update + state.weight_decay * p.data
        p.data = p.data - rate * update


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
