"""Pre-training loop for the teacher, MoE baseline and MoE + distillation modes."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..distill import attention_loss, inner_loss, sample_tokens, total_student_loss, trunk_loss
from ..errors import CompatibilityError, ConfigError
from ..moe import load_balance_loss
from ..transformer import Encoder, geometry_hash
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import read_corpus
from .masking import MLMBatch, make_mlm_batch, pack_sequences
from .optim import AdamState, TrainState, adam_step, lr_at
from .vocab import Vocab, build_vocab

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "l_mlm", "l_b", "l_t", "l_i", "l_a", "total", "val_log_likelihood")


@dataclass
class PreparedData:
    vocab: Vocab
    train: np.ndarray  # [N, T] packed token ids
    val: np.ndarray
    val_lines: list[str]


def split_lines(lines: Sequence[str], val_fraction: float) -> tuple[list[str], list[str]]:
    n_val = max(1, int(round(len(lines) * val_fraction)))
    if n_val >= len(lines):
        raise ConfigError("corpus too small for a train/validation split")
    return list(lines[:-n_val]), list(lines[-n_val:])


def prepare_data(cfg: RunConfig, lines: Sequence[str], vocab: Vocab | None = None) -> PreparedData:
    train_lines, val_lines = split_lines(lines, cfg.train.val_fraction)
    if vocab is None:
        vocab = build_vocab(train_lines, cfg.model.vocab_size)
    seq_len = cfg.train.seq_len
    return PreparedData(vocab, pack_sequences(train_lines, vocab, seq_len),
                        pack_sequences(val_lines, vocab, seq_len), val_lines)


def masked_log_likelihood(model: Encoder, sequences: np.ndarray, seed: int, batch_size: int = 64) -> float:
    """Mean log-probability of the true token over masked positions (higher is better).

    Uses the standard corruption scheme with ``seed`` as the masking seed.
    """
    was_training = model.training
    model.training = False
    total, count = 0.0, 0
    try:
        with ad.no_grad():
            for start in range(0, len(sequences), batch_size):
                chunk = sequences[start:start + batch_size]
                batch = make_mlm_batch(chunk, model.cfg.vocab_size, seed, 0,
                                       range(start, start + len(chunk)))
                if batch.num_masked == 0:
                    continue
                hidden, _ = model(batch.input_ids, batch.valid)
                rows = np.flatnonzero(batch.mask_positions.reshape(-1))
                logits = model.mlm_logits(ad.take_rows(hidden.reshape(-1, model.cfg.hidden_dim), rows))
                logp = ad.log_softmax(logits, axis=-1).data
                total += float(logp[np.arange(rows.size), batch.target_ids.reshape(-1)[rows]].sum())
                count += rows.size
    finally:
        model.training = was_training
    if count == 0:
        raise ValueError("no maskable tokens in evaluation corpus")
    return total / count


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x0DE5]).permutation(n)


def check_teacher(student_cfg, teacher: Encoder) -> None:
    s, t = student_cfg, teacher.cfg
    for name in ("hidden_dim", "num_layers", "num_heads"):
        if getattr(s, name) != getattr(t, name):
            raise CompatibilityError(
                f"teacher {name}={getattr(t, name)} but student {name}={getattr(s, name)}")


def compute_losses(model: Encoder, batch: MLMBatch, cfg: RunConfig, state: TrainState,
                   teacher: Encoder | None = None) -> dict[str, ad.Tensor | None]:
    """Forward pass and every loss component for one batch; ``total`` is differentiable."""
    hidden, taps = model(batch.input_ids, batch.valid)
    parts: dict[str, ad.Tensor | None] = {"l_mlm": model.mlm_loss(hidden, batch.target_ids, batch.mask_positions),
                                         "l_b": None, "l_t": None, "l_i": None, "l_a": None}
    if taps.router_probs:
        rows = np.flatnonzero(batch.valid.reshape(-1))
        per_layer = [load_balance_loss(ad.take_rows(p, rows)) for p in taps.router_probs]
        l_b = per_layer[0]
        for extra in per_layer[1:]:
            l_b = l_b + extra
        parts["l_b"] = l_b * (1.0 / len(per_layer))
    if teacher is not None:
        with ad.no_grad():
            _, teacher_taps = teacher(batch.input_ids, batch.valid)
        sample = sample_tokens(batch.valid, cfg.distill, state.rng)
        how = cfg.distill.aggregate
        parts["l_t"] = trunk_loss(taps, teacher_taps, sample, how)
        parts["l_i"] = inner_loss(taps, teacher_taps, sample, how)
        parts["l_a"] = attention_loss(taps, teacher_taps, how)
    parts["total"] = total_student_loss(parts["l_mlm"], parts["l_b"], parts["l_t"], parts["l_i"], parts["l_a"],
                                        cfg.distill if teacher is not None else None,
                                        cfg.moe if model.moe is not None else None)
    return parts


def _record(step: int, epoch: int, lr: float, parts: dict, val: float | None) -> dict:
    rec = {"step": step, "epoch": epoch, "lr": lr}
    for name in ("l_mlm", "l_b", "l_t", "l_i", "l_a", "total"):
        rec[name] = None if parts[name] is None else parts[name].item()
    rec["val_log_likelihood"] = val
    return rec


class Trainer:
    """Owns model, optimizer state and data for one pre-training run."""

    def __init__(self, cfg: RunConfig, lines: Sequence[str], out_dir: str | Path,
                 teacher_path: str | Path | None = None, resume_from: str | Path | None = None):
        if cfg.uses_teacher and teacher_path is None:
            raise ConfigError("mode moe-tcd needs a teacher checkpoint")
        if not cfg.uses_teacher and teacher_path is not None:
            raise ConfigError(f"mode {cfg.mode} does not take a teacher checkpoint")
        self.out_dir = Path(out_dir)
        self.teacher: Encoder | None = None
        vocab = None
        if teacher_path is not None:
            tck = load_checkpoint(teacher_path)
            check_teacher(cfg.model, tck.model)
            self.teacher = tck.model
            self.teacher.freeze()
            self.teacher.training = False
            vocab = tck.vocab
        self.data = prepare_data(cfg, lines, vocab)
        model_cfg = dataclasses.replace(cfg.model, vocab_size=len(self.data.vocab))
        self.cfg = dataclasses.replace(cfg, model=model_cfg)
        if self.teacher is not None and self.teacher.cfg.vocab_size != model_cfg.vocab_size:
            raise CompatibilityError("teacher vocabulary size differs from the student's")

        t = self.cfg.train
        self.model = Encoder(model_cfg, self.cfg.moe if self.cfg.uses_moe else None, seed=t.seed)
        self.state = TrainState(
            adam=AdamState(beta1=t.beta1, beta2=t.beta2, eps=t.adam_eps, weight_decay=t.weight_decay),
            rng=np.random.default_rng([t.seed, 0x5A4D]))
        if resume_from is not None:
            ck = load_checkpoint(resume_from, expect_geometry=geometry_hash(self.model.cfg, self.model.moe))
            if ck.config.hash() != self.cfg.hash():
                raise CompatibilityError(f"{resume_from}: run config hash {ck.config.hash()} != {self.cfg.hash()}")
            if ck.state is None:
                raise CompatibilityError(f"{resume_from} carries no training state")
            self.model.load_arrays(ck.model.state_arrays())
            self.state = ck.state

        self.steps_per_epoch = math.ceil(len(self.data.train) / t.batch_size)
        total = t.epochs * self.steps_per_epoch
        self.total_steps = min(total, t.max_steps) if t.max_steps else total
        if t.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps {t.warmup_steps} must be below total steps {self.total_steps}")

    def batch_for(self, step: int) -> tuple[int, MLMBatch]:
        t = self.cfg.train
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = epoch_order(t.seed, epoch, len(self.data.train))
        idx = order[pos * t.batch_size:(pos + 1) * t.batch_size]
        return epoch, make_mlm_batch(self.data.train[idx], self.model.cfg.vocab_size, t.seed, epoch, idx)

    def validate(self) -> float:
        return masked_log_likelihood(self.model, self.data.val, self.cfg.train.eval_seed)

    def step(self) -> dict:
        t = self.cfg.train
        epoch, batch = self.batch_for(self.state.step)
        lr = lr_at(self.state.step + 1, t.peak_lr, t.warmup_steps, self.total_steps)
        self.model.training = True
        self.model.zero_grad()
        parts = compute_losses(self.model, batch, self.cfg, self.state, self.teacher)
        ad.backward(parts["total"])
        adam_step(self.model.trainable(), self.state.adam, lr)
        self.state.step += 1
        self.state.epoch = self.state.step // self.steps_per_epoch
        return _record(self.state.step, epoch + 1, lr, parts, None)

    def save(self, name: str) -> Path:
        return save_checkpoint(self.out_dir / name, self.model, self.data.vocab, self.cfg, self.state)

    def run(self) -> Path:
        t = self.cfg.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "val.txt").write_text("".join(line + "\n" for line in self.data.val_lines))
        resumed = self.state.step > 0
        with open(self.out_dir / "metrics.jsonl", "a" if resumed else "w") as fh:
            while self.state.step < self.total_steps:
                rec = self.step()
                step = self.state.step
                epoch_end = step % self.steps_per_epoch == 0 or step == self.total_steps
                if epoch_end:
                    rec["val_log_likelihood"] = self.validate()
                if epoch_end or step % t.log_every == 0:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if epoch_end:
                    log.info("step %d epoch %d val_ll %.5f", step, rec["epoch"], rec["val_log_likelihood"])
                    self.save(f"ckpt-epoch-{rec['epoch']:03d}")
                if t.checkpoint_every and step % t.checkpoint_every == 0:
                    self.save(f"ckpt-step-{step:06d}")
        return self.save("final")


def pretrain(cfg: RunConfig, out_dir: str | Path, lines: Sequence[str] | None = None,
             teacher_path: str | Path | None = None, resume_from: str | Path | None = None) -> Checkpoint:
    """Run (or resume) pre-training and return the loaded final checkpoint."""
    if lines is None:
        if not cfg.train.corpus:
            raise ConfigError("no corpus given ([train] corpus or explicit lines)")
        lines = read_corpus(cfg.train.corpus)
    final = Trainer(cfg, lines, out_dir, teacher_path, resume_from).run()
    return load_checkpoint(final)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
