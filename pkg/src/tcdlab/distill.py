"""Relation-alignment distillation from a frozen teacher into a student.

Instead of pulling student representations towards the teacher's values, the
losses here match pairwise cosine similarities: between sampled tokens at the
trunk (post-LN) and residual-inner (pre-residual) sites, and between queries
and keys of each attention head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CompatibilityError, ConfigError, NumericError
from .moe import MoEConfig
from .transformer import TapSet


@dataclass
class DistillConfig:
    lambda_T: float = 1.0
    lambda_I: float = 1.0
    lambda_A: float = 1.0
    sample_total: int = 4096
    num_groups: int = 32
    group_size: int = 128
    seed: int = 0
    aggregate: str = "mean"  # "mean" | "sum" over layers and sublayers

    def __post_init__(self):
        if self.num_groups * self.group_size != self.sample_total:
            raise ConfigError(
                f"num_groups * group_size = {self.num_groups * self.group_size} != sample_total {self.sample_total}")
        if min(self.lambda_T, self.lambda_I, self.lambda_A) < 0:
            raise ConfigError("distillation weights must be non-negative")
        if self.aggregate not in ("mean", "sum"):
            raise ConfigError(f"aggregate must be 'mean' or 'sum', got {self.aggregate!r}")

    @classmethod
    def small_scale(cls, **overrides) -> DistillConfig:
        """Defaults used for H=128 models, where attention alignment is switched off."""
        return cls(**{"lambda_A": 0.0, **overrides})

    @property
    def active(self) -> bool:
        return max(self.lambda_T, self.lambda_I, self.lambda_A) > 0


@dataclass
class RelationSample:
    """Flat indices into the [B*T] token axis, one row per group."""

    groups: np.ndarray  # [num_groups, group_size]

    @property
    def num_groups(self) -> int:
        return self.groups.shape[0]


def sample_tokens(valid: np.ndarray, cfg: DistillConfig, rng: np.random.Generator) -> RelationSample:
    """Draw ``num_groups`` groups of ``group_size`` non-padding token positions.

    With at least ``sample_total`` candidates the groups partition a random
    subset (disjoint); with fewer, each group is drawn without replacement on
    its own; below ``group_size`` candidates a group is drawn with replacement.
    """
    pool = np.flatnonzero(np.asarray(valid, dtype=bool).reshape(-1))
    if pool.size == 0:
        raise ValueError("sample_tokens: batch has no non-padding tokens")
    g, n = cfg.num_groups, cfg.group_size
    if pool.size >= cfg.sample_total:
        picked = rng.permutation(pool)[: cfg.sample_total]
        return RelationSample(picked.reshape(g, n))
    replace = pool.size < n
    groups = np.stack([rng.choice(pool, size=n, replace=replace) for _ in range(g)])
    return RelationSample(groups)


def relation_matrix(reps: Tensor) -> Tensor:
    """Pairwise cosine similarity of rows; batched over leading axes."""
    unit = ad.normalize_rows(reps)
    return unit @ unit.swapaxes(-1, -2)


def relation_alignment(student: Tensor, teacher: Tensor, groups: np.ndarray) -> Tensor:
    """Mean squared difference of group relation matrices, averaged over groups.

    Diagonal pairs are included.
    """
    g, n = groups.shape
    flat = groups.reshape(-1)
    s = relation_matrix(ad.take_rows(student, flat).reshape(g, n, student.shape[-1]))
    t = relation_matrix(ad.take_rows(teacher, flat).reshape(g, n, teacher.shape[-1]))
    diff = s - t.detach()
    return (diff * diff).mean()


def _check_sites(student: list[Tensor], teacher: list[Tensor], site: str) -> None:
    if len(student) != len(teacher):
        raise CompatibilityError(f"{site}: student has {len(student)} taps, teacher {len(teacher)}")
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise CompatibilityError(f"{site}: tap shape {s.shape} vs teacher {t.shape}")


def _aggregate(losses: list[Tensor], how: str) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses)) if how == "mean" else total


def _site_loss(student: list[Tensor], teacher: list[Tensor], sample: RelationSample,
               site: str, aggregate: str) -> Tensor:
    _check_sites(student, teacher, site)
    if not student:
        return Tensor(0.0)
    losses = [relation_alignment(s, t, sample.groups) for s, t in zip(student, teacher)]
    return _aggregate(losses, aggregate)


def trunk_loss(student: TapSet, teacher: TapSet, sample: RelationSample, aggregate: str = "mean") -> Tensor:
    return _site_loss(student.trunk, teacher.trunk, sample, "trunk", aggregate)


def inner_loss(student: TapSet, teacher: TapSet, sample: RelationSample, aggregate: str = "mean") -> Tensor:
    return _site_loss(student.inner, teacher.inner, sample, "inner", aggregate)


def qk_alignment(sq: Tensor, sk: Tensor, tq: Tensor, tk: Tensor, valid: np.ndarray) -> Tensor:
    """Query-key relation loss for one attention layer.

    Inputs are [B, heads, T, d]. Pairs are formed within each sequence over
    non-padding positions; per-(sequence, head) means are averaged over heads
    and over sequences that have at least one real token.
    """
    s = ad.normalize_rows(sq) @ ad.normalize_rows(sk).swapaxes(-1, -2)
    with ad.no_grad():
        t = ad.normalize_rows(tq) @ ad.normalize_rows(tk).swapaxes(-1, -2)
    valid = np.asarray(valid, dtype=float)
    counts = valid.sum(axis=1)
    keep = counts > 0
    pair_w = valid[:, :, None] * valid[:, None, :]
    pair_w = pair_w / np.where(keep, counts * counts, 1.0)[:, None, None]
    pair_w = pair_w / (keep.sum() * sq.shape[1])
    diff = s - t.detach()
    return (diff * diff * pair_w[:, None, :, :]).sum()


def attention_loss(student: TapSet, teacher: TapSet, aggregate: str = "mean") -> Tensor:
    for a, b, site in ((student.queries, teacher.queries, "queries"), (student.keys, teacher.keys, "keys")):
        _check_sites(a, b, f"attention {site}")
    if not student.queries:
        return Tensor(0.0)
    losses = [qk_alignment(sq, sk, tq, tk, student.valid)
              for sq, sk, tq, tk in zip(student.queries, student.keys, teacher.queries, teacher.keys)]
    return _aggregate(losses, aggregate)


def total_student_loss(l_mlm: Tensor, l_b: Tensor | None = None, l_t: Tensor | None = None,
                       l_i: Tensor | None = None, l_a: Tensor | None = None,
                       cfg: DistillConfig | None = None, moe_cfg: MoEConfig | None = None) -> Tensor:
    """``L_MLM + lambda_B L_B + lambda_T L_T + lambda_I L_I + lambda_A L_A``.

    A missing component (``None``) or a missing config contributes nothing.
    """
    weights = {
        "l_b": moe_cfg.lambda_B if moe_cfg is not None else 0.0,
        "l_t": cfg.lambda_T if cfg is not None else 0.0,
        "l_i": cfg.lambda_I if cfg is not None else 0.0,
        "l_a": cfg.lambda_A if cfg is not None else 0.0,
    }
    parts = {"l_mlm": l_mlm, "l_b": l_b, "l_t": l_t, "l_i": l_i, "l_a": l_a}
    for name, value in parts.items():
        if value is not None and not math.isfinite(float(np.asarray(value.data).sum())):
            raise NumericError(f"loss component {name} is not finite")
    total = l_mlm
    for name, w in weights.items():
        if parts[name] is not None and w != 0.0:
            total = total + parts[name] * w
    return total
