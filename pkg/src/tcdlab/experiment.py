"""Directional comparison: MoE baseline vs MoE student distilled from a dense teacher.

Per seed: pre-train a dense teacher, an MoE baseline and a distilled MoE
student on the same synthetic corpus; pick for each MoE model the earliest
epoch checkpoint reaching a shared validation log-likelihood; fine-tune both on
the toy tasks; compare medians across seeds.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
from pathlib import Path
from typing import Sequence

from .finetune import best_of_modes, best_per_mode, default_grid, finetune, make_task
from .pipeline.config import RunConfig
from .pipeline.corpus import generate_sentences
from .pipeline.pretrain import pretrain, read_metrics

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_TASKS = ("presence", "parity", "count")
CORPUS_TOKENS = 60_000
DISTILL_KEYS = ("l_t", "l_i")


def epoch_curve(run_dir: Path) -> list[tuple[int, float]]:
    return [(r["epoch"], r["val_log_likelihood"]) for r in read_metrics(run_dir / "metrics.jsonl")
            if r["val_log_likelihood"] is not None]


def matched_checkpoint(run_dir: Path, target: float) -> tuple[Path, int, float]:
    """Earliest epoch checkpoint whose validation log-likelihood reaches ``target``."""
    for epoch, ll in epoch_curve(run_dir):
        if ll >= target:
            return run_dir / f"ckpt-epoch-{epoch:03d}", epoch, ll
    raise ValueError(f"{run_dir} never reaches validation log-likelihood {target}")


def distill_drop(run_dir: Path, window: int = 50) -> dict[str, float]:
    """Fractional fall of each distillation loss: first step vs mean of the last ``window`` steps."""
    recs = [r for r in read_metrics(run_dir / "metrics.jsonl")]
    out = {}
    for key in DISTILL_KEYS:
        vals = [r[key] for r in recs if r[key] is not None]
        if not vals:
            continue
        tail = statistics.fmean(vals[-window:])
        out[key] = 1.0 - tail / vals[0] if vals[0] > 0 else 0.0
    return out


def _with(cfg: RunConfig, mode: str, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, mode=mode, train=dataclasses.replace(cfg.train, seed=seed))


def run_seed(cfg: RunConfig, seed: int, out_dir: Path, lines: Sequence[str], tasks: Sequence[str]) -> dict:
    root = out_dir / f"seed-{seed}"
    pretrain(_with(cfg, "teacher", seed), root / "teacher", lines)
    pretrain(_with(cfg, "moe-baseline", seed), root / "moe-baseline", lines)
    pretrain(_with(cfg, "moe-tcd", seed), root / "moe-tcd", lines, teacher_path=root / "teacher" / "final")

    runs = {m: root / m for m in ("moe-baseline", "moe-tcd")}
    target = min(max(ll for _, ll in epoch_curve(d)) for d in runs.values())
    record: dict = {"seed": seed, "target_val_ll": target, "models": {}}
    for mode, run_dir in runs.items():
        ckpt, epoch, ll = matched_checkpoint(run_dir, target)
        scores = {}
        for name in tasks:
            task = make_task(name)
            results = [finetune(ckpt, task, cell) for cell in default_grid(cfg.model.hidden_dim, seed=seed)]
            best = best_per_mode(results)
            scores[name] = best_of_modes(best["full"], best["adapter"])
        record["models"][mode] = {
            "checkpoint": str(ckpt), "epoch": epoch, "val_ll": ll, "tasks": scores,
            "score": statistics.fmean(s["metric"] for s in scores.values()),
        }
    record["distill_drop"] = distill_drop(runs["moe-tcd"])
    (root / "seed.json").write_text(json.dumps(record, indent=1) + "\n")
    log.info("seed %d: baseline %.4f tcd %.4f", seed, record["models"]["moe-baseline"]["score"],
             record["models"]["moe-tcd"]["score"])
    return record


def run_experiment(cfg: RunConfig, out_dir: str | Path, seeds: Sequence[int] = DEFAULT_SEEDS,
                   tasks: Sequence[str] = DEFAULT_TASKS, corpus_tokens: int = CORPUS_TOKENS) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = generate_sentences(corpus_tokens, seed=0)
    per_seed = [run_seed(cfg, s, out_dir, lines, tasks) for s in seeds]
    med = {m: statistics.median(r["models"][m]["score"] for r in per_seed) for m in ("moe-baseline", "moe-tcd")}
    drops = [min(r["distill_drop"].values()) for r in per_seed]
    summary = {
        "seeds": list(seeds), "tasks": list(tasks), "per_seed": per_seed,
        "median_score": med,
        "min_distill_drop": min(drops),
        "tcd_not_worse": med["moe-tcd"] >= med["moe-baseline"],
        "distill_losses_halved": min(drops) >= 0.5,
    }
    summary["passed"] = summary["tcd_not_worse"] and summary["distill_losses_halved"]
    (out_dir / "experiment.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary
