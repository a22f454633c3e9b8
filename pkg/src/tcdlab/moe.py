"""Top-1 Mixture-of-Experts feed-forward layer.

A linear-plus-softmax router scores every expert for each token, only the
highest-scoring expert runs, and its output is scaled by the routing
probability so the router receives gradient through that factor. Load
balancing is a KL penalty between the uniform distribution and the
batch-averaged routing distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class MoEConfig:
    num_experts: int = 64
    top_k: int = 1
    lambda_B: float = 1000.0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.top_k != 1:
            raise ConfigError("only top-1 routing is supported")
        if self.lambda_B < 0:
            raise ConfigError("lambda_B must be non-negative")


@dataclass
class RouterParams:
    weight: Tensor  # [E, H]
    bias: Tensor  # [E]

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]


@dataclass
class ExpertParams:
    w1: Tensor  # [H, F]
    b1: Tensor
    w2: Tensor  # [F, H]
    b2: Tensor


ExpertSet = list[ExpertParams]


class MoEOutput(NamedTuple):
    hidden: Tensor
    probs: Tensor
    expert_index: np.ndarray


def expert_ffn(x: Tensor, ex: ExpertParams, row_stable: bool = True) -> Tensor:
    h = ad.gelu(ad.matmul(x, ex.w1, row_stable=row_stable) + ex.b1)
    return ad.matmul(h, ex.w2, row_stable=row_stable) + ex.b2


def route(x: Tensor, router: RouterParams) -> Tensor:
    """Per-token expert probabilities, ``softmax(x W^T + b)``; shape [M, E]."""
    logits = ad.matmul(x, ad.transpose(router.weight), row_stable=True) + router.bias
    return ad.softmax(logits, axis=-1)


def select_expert(probs) -> np.ndarray:
    """Argmax expert per row. ``np.argmax`` returns the first maximum, so ties go to the lowest index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(data, axis=-1)


def moe_forward(x: Tensor, router: RouterParams, experts: ExpertSet) -> MoEOutput:
    """Route each row of ``x`` [M, H] to its top-1 expert and scale by that expert's probability.

    Tokens are grouped by expert so each expert runs once on its rows; the
    merged result matches a per-token loop bit-for-bit because expert matmuls
    use the row-stable kernel.
    """
    if len(experts) != router.num_experts:
        raise ConfigError(f"router scores {router.num_experts} experts but {len(experts)} given")
    probs = route(x, router)
    choice = select_expert(probs)
    parts, rows = [], []
    for k, ex in enumerate(experts):
        r = np.flatnonzero(choice == k)
        if r.size == 0:
            continue
        y = expert_ffn(ad.take_rows(x, r), ex)
        gate = ad.index(probs, (r, np.full(r.size, k)))
        parts.append(y * ad.reshape(gate, (r.size, 1)))
        rows.append(r)
    return MoEOutput(ad.merge_rows(parts, rows, x.shape[0]), probs, choice)


def load_balance_loss(probs: Tensor) -> Tensor:
    """KL(uniform || mean routing distribution over the batch)."""
    n_experts = probs.shape[-1]
    q = probs.mean(axis=0)
    uniform = np.full(n_experts, 1.0 / n_experts)
    return ad.kl_div(Tensor(uniform), q)
