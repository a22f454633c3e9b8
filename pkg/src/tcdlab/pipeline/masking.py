"""Sequence packing and masked-language-model corruption."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vocab import CLS, MASK, PAD, RESERVED, SEP, SPECIAL_IDS, Vocab

SELECT_RATE = 0.15
MASK_SHARE = 0.8
RANDOM_SHARE = 0.1
IGNORE = -1
FIRST_WORD = len(RESERVED)  # random replacements are drawn from ordinary words only


@dataclass
class MLMBatch:
    input_ids: np.ndarray  # [B, T]
    target_ids: np.ndarray  # [B, T], IGNORE where not selected
    mask_positions: np.ndarray  # [B, T] bool
    valid: np.ndarray  # [B, T] bool, False at padding

    @property
    def num_masked(self) -> int:
        return int(self.mask_positions.sum())


def pack_sequences(lines: Sequence[str], vocab: Vocab, seq_len: int) -> np.ndarray:
    """Concatenate sentences (each closed by [SEP]) and cut into [CLS]-prefixed rows of ``seq_len``.

    The final partial row is right-padded with [PAD].
    """
    stream: list[int] = []
    for line in lines:
        stream.extend(vocab.encode(line))
        stream.append(SEP)
    body = seq_len - 1
    rows = []
    for start in range(0, len(stream), body):
        chunk = [CLS] + stream[start:start + body]
        rows.append(chunk + [PAD] * (seq_len - len(chunk)))
    return np.array(rows, dtype=np.int64).reshape(-1, seq_len)


def _mask_one(seq: np.ndarray, vocab_size: int, rng: np.random.Generator):
    eligible = ~np.isin(seq, list(SPECIAL_IDS))
    selected = (rng.random(seq.shape) < SELECT_RATE) & eligible
    if not selected.any() and eligible.any():
        selected[rng.choice(np.flatnonzero(eligible))] = True
    roll = rng.random(seq.shape)
    random_ids = rng.integers(FIRST_WORD, max(vocab_size, FIRST_WORD + 1), size=seq.shape)
    corrupted = seq.copy()
    corrupted[selected & (roll < MASK_SHARE)] = MASK
    swap = selected & (roll >= MASK_SHARE) & (roll < MASK_SHARE + RANDOM_SHARE)
    corrupted[swap] = random_ids[swap]
    return corrupted, selected


def make_mlm_batch(sequences: np.ndarray, vocab_size: int, seed: int, epoch: int,
                   indices: Sequence[int] | None = None) -> MLMBatch:
    """Select 15% of non-special tokens and corrupt them 80/10/10 ([MASK] / random / unchanged).

    Each row draws from its own generator keyed on (seed, epoch, sequence
    index), so a sequence gets the same corruption whatever batch it lands in
    and a different one every epoch. A row with no selected token but at least
    one eligible token has one selection forced.
    """
    seqs = np.asarray(sequences, dtype=np.int64)
    if indices is None:
        indices = range(len(seqs))
    inputs = np.empty_like(seqs)
    selected = np.zeros(seqs.shape, dtype=bool)
    for row, (seq, idx) in enumerate(zip(seqs, indices)):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        inputs[row], selected[row] = _mask_one(seq, vocab_size, rng)
    targets = np.where(selected, seqs, IGNORE)
    return MLMBatch(inputs, targets, selected, seqs != PAD)
