"""Post-LN BERT-style encoder with activation taps at the distillation sites.

Every sublayer computes ``out = LN(h + f(h))``. The forward pass records the
normalised output (trunk tap), ``f(h)`` before the residual add (inner tap)
and the per-head queries and keys of each attention sublayer.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyMaskError, ShapeError, VocabError
from .moe import ExpertParams, MoEConfig, RouterParams, moe_forward

MASK_FILL = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 30522
    hidden_dim: int = 128
    num_layers: int = 12
    num_heads: int = 2
    ffn_dim: int = 0  # 0 means 4 * hidden_dim
    max_seq_len: int = 128
    ln_eps: float = 1e-12
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.hidden_dim
        for name in ("vocab_size", "hidden_dim", "num_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be non-negative")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def geometry_hash(cfg: ModelConfig, moe: MoEConfig | None) -> str:
    """Stable digest of everything that determines parameter names and shapes."""
    payload = {"model": dataclasses.asdict(cfg), "moe": None if moe is None else dataclasses.asdict(moe)}
    for key in ("dropout", "init_std"):
        payload["model"].pop(key)
    if payload["moe"] is not None:
        payload["moe"].pop("lambda_B")
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TapSet:
    """Activations captured during one forward pass.

    ``trunk`` and ``inner`` hold one [B*T, H] entry per sublayer, ordered
    (layer 0 attention, layer 0 FFN, layer 1 attention, ...). ``queries`` and
    ``keys`` hold one [B, heads, T, head_dim] entry per attention sublayer.
    ``valid`` marks non-padding positions; padded rows are present in the
    tensors but never sampled or paired.
    """

    valid: np.ndarray
    trunk: list[Tensor] = field(default_factory=list)
    inner: list[Tensor] = field(default_factory=list)
    queries: list[Tensor] = field(default_factory=list)
    keys: list[Tensor] = field(default_factory=list)
    router_probs: list[Tensor] = field(default_factory=list)

    def head_qk(self, layer: int, head: int) -> tuple[Tensor, Tensor]:
        q, k = self.queries[layer], self.keys[layer]
        b, _, t, d = q.shape
        return (q[:, head].reshape(b * t, d), k[:, head].reshape(b * t, d))


class Encoder:
    """Vanilla BERT encoder, or MoE BERT when ``moe`` is given (every FFN becomes an MoE layer)."""

    def __init__(self, cfg: ModelConfig, moe: MoEConfig | None = None, seed: int = 0):
        self.cfg = cfg
        self.moe = moe
        self.training = True
        self.adapter_size: int | None = None
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- parameters ----------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _normal(self, rng, *shape) -> np.ndarray:
        return rng.normal(0.0, self.cfg.init_std, size=shape)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.cfg
        h, f = c.hidden_dim, c.ffn_dim
        self._add("tok_emb", self._normal(rng, c.vocab_size, h))
        self._add("pos_emb", self._normal(rng, c.max_seq_len, h))
        self._add("mlm_bias", np.zeros(c.vocab_size))
        for layer in range(c.num_layers):
            p = f"layers.{layer}"
            for m in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.w{m}", self._normal(rng, h, h))
                self._add(f"{p}.attn.b{m}", np.zeros(h))
            self._add(f"{p}.attn_ln.gamma", np.ones(h))
            self._add(f"{p}.attn_ln.beta", np.zeros(h))
            if self.moe is None:
                self._add_ffn(f"{p}.ffn", rng)
            else:
                self._add(f"{p}.moe.router.w", self._normal(rng, self.moe.num_experts, h))
                self._add(f"{p}.moe.router.b", np.zeros(self.moe.num_experts))
                for k in range(self.moe.num_experts):
                    self._add_ffn(f"{p}.moe.expert{k}", rng)
            self._add(f"{p}.ffn_ln.gamma", np.ones(h))
            self._add(f"{p}.ffn_ln.beta", np.zeros(h))

    def _add_ffn(self, prefix: str, rng) -> None:
        h, f = self.cfg.hidden_dim, self.cfg.ffn_dim
        self._add(f"{prefix}.w1", self._normal(rng, h, f))
        self._add(f"{prefix}.b1", np.zeros(f))
        self._add(f"{prefix}.w2", self._normal(rng, f, h))
        self._add(f"{prefix}.b2", np.zeros(h))

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arrays[name].shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def router(self, layer: int) -> RouterParams:
        p = self.params
        return RouterParams(p[f"layers.{layer}.moe.router.w"], p[f"layers.{layer}.moe.router.b"])

    def experts(self, layer: int) -> list[ExpertParams]:
        return [self._ffn_params(f"layers.{layer}.moe.expert{k}") for k in range(self.moe.num_experts)]

    def _ffn_params(self, prefix: str) -> ExpertParams:
        p = self.params
        return ExpertParams(p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    # -- forward -------------------------------------------------------
    def embed(self, token_ids: np.ndarray) -> Tensor:
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise ShapeError(f"token_ids must be [B, T], got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabError(f"token id out of range [0, {self.cfg.vocab_size})")
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        return ad.embedding(self.params["tok_emb"], ids) + self.params["pos_emb"][:t]

    def _adapter(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        z = ad.gelu(x @ p[f"{prefix}.down"] + p[f"{prefix}.bdown"])
        return x + (z @ p[f"{prefix}.up"] + p[f"{prefix}.bup"])

    def _drop(self, x: Tensor, rng) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, rng if self.training else None)

    def mha_sublayer(self, h: Tensor, layer: int, attn_bias: np.ndarray, taps: TapSet | None,
                     rng=None) -> Tensor:
        c, p = self.cfg, self.params
        pre = f"layers.{layer}"
        b, t, hd = h.shape
        nh, d = c.num_heads, c.head_dim

        def heads(x: Tensor) -> Tensor:
            return x.reshape(b, t, nh, d).transpose(0, 2, 1, 3)

        q = heads(h @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"])
        k = heads(h @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"])
        v = heads(h @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d)) + attn_bias
        weights = self._drop(ad.softmax(scores, axis=-1), rng)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, hd)
        inner = ctx @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]
        branch = inner
        if self.adapter_size is not None:
            branch = self._adapter(inner, f"{pre}.attn_adapter")
        out = ad.layer_norm(h + self._drop(branch, rng), p[f"{pre}.attn_ln.gamma"],
                            p[f"{pre}.attn_ln.beta"], c.ln_eps)
        if taps is not None:
            taps.inner.append(inner.reshape(b * t, hd))
            taps.trunk.append(out.reshape(b * t, hd))
            taps.queries.append(q)
            taps.keys.append(k)
        return out

    def ffn_sublayer(self, h: Tensor, layer: int, taps: TapSet | None, rng=None) -> Tensor:
        c, p = self.cfg, self.params
        pre = f"layers.{layer}"
        b, t, hd = h.shape
        flat = h.reshape(b * t, hd)
        if self.moe is None:
            ex = self._ffn_params(f"{pre}.ffn")
            inner = ad.gelu(flat @ ex.w1 + ex.b1) @ ex.w2 + ex.b2
        else:
            result = moe_forward(flat, self.router(layer), self.experts(layer))
            inner = result.hidden
            if taps is not None:
                taps.router_probs.append(result.probs)
        branch = inner
        if self.adapter_size is not None:
            branch = self._adapter(inner, f"{pre}.ffn_adapter")
        out = ad.layer_norm(h + self._drop(branch.reshape(b, t, hd), rng), p[f"{pre}.ffn_ln.gamma"],
                            p[f"{pre}.ffn_ln.beta"], c.ln_eps)
        if taps is not None:
            taps.inner.append(inner)
            taps.trunk.append(out.reshape(b * t, hd))
        return out

    def forward(self, token_ids: np.ndarray, valid: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, TapSet]:
        """Run the encoder; returns the final hidden states [B, T, H] and the tap set.

        ``valid`` marks real tokens; padding is excluded from attention keys.
        """
        ids = np.asarray(token_ids)
        if valid is None:
            valid = np.ones(ids.shape, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        attn_bias = np.where(valid, 0.0, MASK_FILL)[:, None, None, :]
        taps = TapSet(valid=valid)
        h = self._drop(self.embed(ids), rng)
        for layer in range(self.cfg.num_layers):
            h = self.mha_sublayer(h, layer, attn_bias, taps, rng)
            h = self.ffn_sublayer(h, layer, taps, rng)
        return h, taps

    __call__ = forward

    def mlm_logits(self, hidden_rows: Tensor) -> Tensor:
        """Vocabulary logits with the output projection tied to the token embedding."""
        return hidden_rows @ ad.transpose(self.params["tok_emb"]) + self.params["mlm_bias"]

    def mlm_loss(self, hidden: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        h = hidden.shape[-1]
        flat = hidden.reshape(-1, h)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            raise EmptyMaskError("mlm_loss: no masked positions")
        logits = self.mlm_logits(ad.take_rows(flat, rows))
        tgt = np.asarray(targets).reshape(-1)[rows]
        return ad.cross_entropy_masked(logits, tgt, np.ones(rows.size, dtype=bool))


def expected_param_count(cfg: ModelConfig, moe: MoEConfig | None = None) -> int:
    """Closed-form parameter count, checked against enumeration in the tests."""
    h, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    embeddings = v * h + cfg.max_seq_len * h + v
    attention = 4 * h * h + 4 * h + 2 * h
    ffn = 2 * f * h + f + h
    if moe is not None:
        ffn = moe.num_experts * ffn + moe.num_experts * h + moe.num_experts
    return embeddings + cfg.num_layers * (attention + ffn + 2 * h)
