"""Downstream evaluation: toy tasks, full and adapter fine-tuning, OOD masked-LM scoring."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CompatibilityError, ConfigError, VocabError
from .pipeline.checkpoint import Checkpoint, load_checkpoint
from .pipeline.corpus import Grammar
from .pipeline.masking import pack_sequences
from .pipeline.optim import AdamState, adam_step, lr_at
from .pipeline.pretrain import masked_log_likelihood
from .pipeline.vocab import CLS, PAD, SEP, Vocab
from .transformer import Encoder

TASK_KINDS = ("classification", "regression")
MODES = ("full", "adapter")

# Reference grids for H=128 models, and the factor mapping them to desk scale
# (desk pre-training runs at 30x the reference peak learning rate).
REFERENCE_FULL_LRS = (1e-5, 2e-5, 5e-5)
REFERENCE_ADAPTER_LRS = (1e-4, 2e-4, 3e-4)
REFERENCE_ADAPTER_SIZES = (16, 64, 128)
REFERENCE_HIDDEN = 128
DESK_LR_SCALE = 30.0


@dataclass
class Task:
    name: str
    kind: str
    train: list[tuple[str, float]]
    dev: list[tuple[str, float]]

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}")
        if not self.dev:
            raise ConfigError(f"task {self.name}: empty dev split")
        if self.kind == "classification":
            for _, y in self.train + self.dev:
                if y != int(y) or y < 0:
                    raise ConfigError(f"task {self.name}: classification labels must be non-negative ints")

    @property
    def num_outputs(self) -> int:
        if self.kind == "regression":
            return 1
        return int(max(y for _, y in self.train + self.dev)) + 1


# -- toy task generators -------------------------------------------------

PRESENCE_MARKER = "whale"
PARITY_MARKER = "the"
COUNT_MARKER = "the"


def _text(grammar: Grammar, rng: np.random.Generator, max_sentences: int = 2) -> str:
    n = int(rng.integers(1, max_sentences + 1))
    return " ".join(" ".join(grammar.sentence()) for _ in range(n))


def _count(text: str, marker: str) -> int:
    return text.split().count(marker)


def make_task(name: str, n_train: int = 512, n_dev: int = 256, seed: int = 0) -> Task:
    """Generate one of the shipped toy tasks.

    * ``presence``: does the marker noun appear (balanced classes)?
    * ``parity``: is the number of marker determiners odd?
    * ``count``: how many marker determiners (regression)?
    """
    grammar = Grammar("none", seed=10_000 + seed)
    rng = np.random.default_rng([seed, 77])

    def presence(label: int) -> tuple[str, float]:
        while True:
            text = _text(grammar, rng)
            if (_count(text, PRESENCE_MARKER) > 0) == bool(label):
                return text, float(label)

    examples: list[tuple[str, float]] = []
    for i in range(n_train + n_dev):
        if name == "presence":
            examples.append(presence(i % 2))
        elif name == "parity":
            text = _text(grammar, rng, 3)
            examples.append((text, float(_count(text, PARITY_MARKER) % 2)))
        elif name == "count":
            text = _text(grammar, rng, 3)
            examples.append((text, float(_count(text, COUNT_MARKER))))
        else:
            raise ConfigError(f"unknown task {name!r}; expected presence, parity or count")
    order = rng.permutation(len(examples))
    examples = [examples[i] for i in order]
    kind = "regression" if name == "count" else "classification"
    return Task(name, kind, examples[:n_train], examples[n_train:])


def save_task(task: Task, path: str | Path) -> None:
    """Line-delimited records; the first line is a header with name and kind."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"task": task.name, "kind": task.kind}) + "\n")
        for split, rows in (("train", task.train), ("dev", task.dev)):
            for text, label in rows:
                fh.write(json.dumps({"split": split, "text": text, "label": label}) + "\n")


def load_task(path: str | Path) -> Task:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    split = {"train": [], "dev": []}
    for r in rows:
        split[r["split"]].append((r["text"], float(r["label"])))
    return Task(header["task"], header["kind"], split["train"], split["dev"])


# -- adapters and heads --------------------------------------------------

def attach_adapters(model: Encoder, size: int, seed: int = 0, init_std: float = 0.02) -> Encoder:
    """Insert a bottleneck adapter after every sublayer and freeze the backbone.

    The up-projection starts at zero so the adapted model computes exactly what
    the backbone did.
    """
    if size < 1:
        raise ConfigError("adapter size must be >= 1")
    model.freeze()
    rng = np.random.default_rng([seed, 0xADA])
    h = model.cfg.hidden_dim
    for layer in range(model.cfg.num_layers):
        for site in ("attn_adapter", "ffn_adapter"):
            pre = f"layers.{layer}.{site}"
            model.params[f"{pre}.down"] = Tensor(rng.normal(0.0, init_std, (h, size)), requires_grad=True)
            model.params[f"{pre}.bdown"] = Tensor(np.zeros(size), requires_grad=True)
            model.params[f"{pre}.up"] = Tensor(np.zeros((size, h)), requires_grad=True)
            model.params[f"{pre}.bup"] = Tensor(np.zeros(h), requires_grad=True)
    model.adapter_size = size
    return model


def adapter_param_count(num_layers: int, hidden: int, size: int) -> int:
    return 2 * num_layers * (2 * hidden * size + size + hidden)


def attach_head(model: Encoder, num_outputs: int, seed: int = 0) -> None:
    rng = np.random.default_rng([seed, 0x4EAD])
    model.params["cls_head.w"] = Tensor(rng.normal(0.0, 0.02, (model.cfg.hidden_dim, num_outputs)),
                                        requires_grad=True)
    model.params["cls_head.b"] = Tensor(np.zeros(num_outputs), requires_grad=True)


def head_output(model: Encoder, ids: np.ndarray, valid: np.ndarray) -> Tensor:
    """Head applied to the first-position ([CLS]) representation."""
    hidden, _ = model(ids, valid)
    cls = hidden[:, 0, :]
    return cls @ model.params["cls_head.w"] + model.params["cls_head.b"]


def encode_batch(texts: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [[CLS] + vocab.encode(t)[: max_len - 2] + [SEP] for t in texts]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    return ids, ids != PAD


# -- fine-tuning ---------------------------------------------------------

@dataclass
class FinetuneConfig:
    mode: str = "full"
    lr: float = 5e-5
    epochs: int = 10
    batch_size: int = 32
    warmup_ratio: float = 0.06
    weight_decay: float = 0.01
    adapter_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"fine-tune mode must be one of {MODES}")


@dataclass
class FinetuneResult:
    task: str
    mode: str
    lr: float
    adapter_size: int | None
    seed: int
    dev_metrics: list[float] = field(default_factory=list)
    trainable_params: int = 0

    @property
    def best(self) -> float:
        return max(self.dev_metrics) if self.dev_metrics else float("-inf")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["best"] = self.best
        return rec


def metric(kind: str, preds: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy for classification, Pearson correlation for regression (0 when undefined)."""
    if kind == "classification":
        return float(np.mean(preds == labels))
    if np.std(preds) == 0.0 or np.std(labels) == 0.0:
        return 0.0
    return float(np.corrcoef(preds, labels)[0, 1])


def _predict(model: Encoder, task: Task, vocab: Vocab, rows: list[tuple[str, float]], batch: int) -> np.ndarray:
    out = []
    model.training = False
    with ad.no_grad():
        for start in range(0, len(rows), batch):
            ids, valid = encode_batch([t for t, _ in rows[start:start + batch]], vocab, model.cfg.max_seq_len)
            y = head_output(model, ids, valid).data
            out.append(y.argmax(axis=1) if task.kind == "classification" else y[:, 0])
    model.training = True
    return np.concatenate(out)


def check_task_vocab(task: Task, vocab: Vocab) -> None:
    known = sum(1 for t, _ in task.train for i in vocab.encode(t) if i != 1)
    total = sum(len(vocab.encode(t)) for t, _ in task.train)
    if total == 0 or known / total < 0.5:
        raise VocabError(f"task {task.name}: most tokens are out of the checkpoint's vocabulary")


def finetune(checkpoint: Checkpoint | str | Path, task: Task, hyper: FinetuneConfig) -> FinetuneResult:
    """Train a fresh copy of the checkpoint's model on ``task``; returns per-epoch dev metrics."""
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    check_task_vocab(task, ck.vocab)
    model = copy.deepcopy(ck.model)
    model.training = True
    for t in model.params.values():
        t.requires_grad = True
        t.grad = None
    if hyper.mode == "adapter":
        attach_adapters(model, hyper.adapter_size, seed=hyper.seed)
    attach_head(model, task.num_outputs, seed=hyper.seed)
    trainable = model.trainable()

    steps_per_epoch = math.ceil(len(task.train) / hyper.batch_size)
    total = hyper.epochs * steps_per_epoch
    warmup = max(1, int(round(hyper.warmup_ratio * total)))
    opt = AdamState(weight_decay=hyper.weight_decay)
    labels = np.array([y for _, y in task.dev])
    result = FinetuneResult(task.name, hyper.mode, hyper.lr,
                            hyper.adapter_size if hyper.mode == "adapter" else None, hyper.seed,
                            trainable_params=sum(t.size for t in trainable.values()))
    step = 0
    for epoch in range(hyper.epochs):
        order = np.random.default_rng([hyper.seed, epoch, 0xF1]).permutation(len(task.train))
        for start in range(0, len(order), hyper.batch_size):
            rows = [task.train[i] for i in order[start:start + hyper.batch_size]]
            ids, valid = encode_batch([t for t, _ in rows], ck.vocab, model.cfg.max_seq_len)
            y = np.array([l for _, l in rows])
            model.zero_grad()
            out = head_output(model, ids, valid)
            if task.kind == "classification":
                loss = ad.cross_entropy_masked(out, y.astype(np.intp), np.ones(len(rows), dtype=bool))
            else:
                loss = ad.mse(out.reshape(-1), Tensor(y))
            ad.backward(loss)
            step += 1
            adam_step(trainable, opt, lr_at(step, hyper.lr, warmup, total))
        preds = _predict(model, task, ck.vocab, task.dev, 128)
        result.dev_metrics.append(metric(task.kind, preds, labels))
    return result


# -- grids ---------------------------------------------------------------

def default_grid(hidden_dim: int, seed: int = 0) -> list[FinetuneConfig]:
    """Reference grid mapped to desk scale: learning rates x DESK_LR_SCALE, adapter sizes x H/128."""
    sizes = sorted({max(1, s * hidden_dim // REFERENCE_HIDDEN) for s in REFERENCE_ADAPTER_SIZES})
    grid = [FinetuneConfig(mode="full", lr=lr * DESK_LR_SCALE, seed=seed) for lr in REFERENCE_FULL_LRS]
    grid += [FinetuneConfig(mode="adapter", lr=lr * DESK_LR_SCALE, adapter_size=a, seed=seed)
             for lr in REFERENCE_ADAPTER_LRS for a in sizes]
    return grid


def load_grid(path: str | Path) -> list[FinetuneConfig]:
    """A JSON list of FinetuneConfig field mappings."""
    with open(path) as fh:
        cells = json.load(fh)
    return [FinetuneConfig(**c) for c in cells]


def best_of_modes(full: FinetuneResult | None, adapter: FinetuneResult | None) -> dict:
    """Keep whichever fine-tuning mode scored higher; a missing side is flagged."""
    candidates = [r for r in (full, adapter) if r is not None]
    if not candidates:
        raise ValueError("best_of_modes needs at least one result")
    winner = max(candidates, key=lambda r: r.best)
    return {"metric": winner.best, "mode": winner.mode, "lr": winner.lr, "adapter_size": winner.adapter_size,
            "missing": [m for m, r in (("full", full), ("adapter", adapter)) if r is None]}


def best_per_mode(results: Sequence[FinetuneResult]) -> dict[str, FinetuneResult | None]:
    out: dict[str, FinetuneResult | None] = {}
    for mode in MODES:
        rs = [r for r in results if r.mode == mode]
        out[mode] = max(rs, key=lambda r: r.best) if rs else None
    return out


def run_grid(checkpoint: Checkpoint | str | Path, task: Task, grid: Sequence[FinetuneConfig],
             jobs: int = 1) -> tuple[list[FinetuneResult], dict]:
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(finetune, [ck.path] * len(grid), [task] * len(grid), grid))
    else:
        results = [finetune(ck, task, cell) for cell in grid]
    best = best_per_mode(results)
    return results, best_of_modes(best["full"], best["adapter"])


# -- OOD masked-LM evaluation ---------------------------------------------

EVAL_SEED = 1234


def ood_mlm_eval(checkpoint: Checkpoint | str | Path, lines: Sequence[str], eval_seed: int | None = None,
                 seq_len: int | None = None) -> float:
    """Mean masked-token log-likelihood of a frozen model on a corpus (higher is better).

    Defaults to the masking seed and sequence length the checkpoint was trained
    with, so scoring its own validation split reproduces the logged value.
    """
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    lines = [l for l in lines if l.strip()]
    if not lines:
        raise ValueError("ood_mlm_eval: empty corpus")
    seed = ck.config.train.eval_seed if eval_seed is None else eval_seed
    seqs = pack_sequences(lines, ck.vocab, seq_len or ck.config.train.seq_len)
    if seqs.shape[1] > ck.model.cfg.max_seq_len:
        raise CompatibilityError("evaluation sequence length exceeds the model's max_seq_len")
    return masked_log_likelihood(ck.model, seqs, seed)
