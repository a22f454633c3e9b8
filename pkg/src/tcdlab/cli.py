"""Command-line entry point.

Exit codes: 0 ok, 1 nothing to do, 2 usage error, 3 configuration or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .errors import CompatibilityError, ConfigError, CorruptCheckpointError, VocabError

log = logging.getLogger("tcdlab")

WORKDIR_ENV = "TCDLAB_WORKDIR"
EXIT_OK, EXIT_EMPTY, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
REPORT_COLUMNS = ("run", "model", "epoch", "step", "val_log_likelihood", "task_metrics", "ood_log_likelihood")


class Workdir:
    def __init__(self, root: str | None):
        self.root = Path(root or os.environ.get(WORKDIR_ENV) or ".").resolve()

    def __call__(self, p: str | Path | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.root / p


def content_hash(paths: list[Path]) -> str:
    """sha256 over file bytes (directories are walked in sorted order)."""
    h = hashlib.sha256()
    for p in paths:
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int | None, inputs: list[Path], outputs: list[Path],
                   config_hash: str | None = None, started: float | None = None) -> None:
    manifest = {
        "command": command, "config_hash": config_hash, "seed": seed,
        "input_hash": content_hash([p for p in inputs if p.exists()]),
        "outputs": [str(p) for p in outputs],
        "started": started, "finished": time.time(),
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=1) + "\n")


# -- commands -------------------------------------------------------------

def cmd_gen_corpus(args, wd: Workdir) -> int:
    from .pipeline.corpus import generate_sentences, unigram_shift, write_corpus

    out = wd(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = generate_sentences(args.tokens, seed=args.seed, shift=args.shift)
    write_corpus(out, lines)
    summary = {"out": str(out), "lines": len(lines), "tokens": sum(len(l.split()) for l in lines),
               "shift": args.shift}
    if args.shift != "none":
        summary["unigram_shift"] = unigram_shift(generate_sentences(args.tokens, seed=args.seed), lines)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_pretrain(args, wd: Workdir) -> int:
    from .pipeline.config import load_run_config
    from .pipeline.corpus import read_corpus
    from .pipeline.pretrain import pretrain

    if args.mode == "moe-tcd" and not args.teacher_ckpt:
        raise UsageError("--mode moe-tcd requires --teacher-ckpt")
    if args.mode != "moe-tcd" and args.teacher_ckpt:
        raise UsageError(f"--mode {args.mode} does not take --teacher-ckpt")
    started = time.time()
    cfg = load_run_config(wd(args.config))
    train = cfg.train
    if args.seed is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if args.epochs is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    if args.max_steps is not None:
        train = dataclasses.replace(train, max_steps=args.max_steps)
    corpus = wd(args.corpus or train.corpus or None)
    if corpus is None:
        raise ConfigError("no corpus: pass --corpus or set [train] corpus")
    cfg = dataclasses.replace(cfg, mode=args.mode or cfg.mode, train=dataclasses.replace(train, corpus=str(corpus)))
    out = wd(args.out)
    teacher = wd(args.teacher_ckpt)
    ck = pretrain(cfg, out, read_corpus(corpus), teacher_path=teacher)
    write_manifest(out, "pretrain", cfg.train.seed, [corpus] + ([teacher] if teacher else []),
                   [ck.path, out / "metrics.jsonl"], ck.config.hash(), started)
    print(json.dumps({"checkpoint": str(ck.path), "metrics": str(out / "metrics.jsonl")}))
    return EXIT_OK


def _next_run_dir(root: Path, stem: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    n = 0
    while True:
        cand = root / f"{stem}-{n:03d}"
        try:
            cand.mkdir()
            return cand
        except FileExistsError:
            n += 1


def cmd_finetune(args, wd: Workdir) -> int:
    from .finetune import default_grid, load_grid, load_task, make_task, run_grid
    from .pipeline.checkpoint import load_checkpoint

    started = time.time()
    ckpt_path = wd(args.ckpt)
    if not (ckpt_path / "manifest.json").exists():
        raise CompatibilityError(f"no checkpoint at {ckpt_path}")
    ck = load_checkpoint(ckpt_path)
    task_file = wd(args.task)
    task = load_task(task_file) if task_file.suffix == ".jsonl" else make_task(args.task, seed=args.task_seed)
    if args.grid == "default":
        grid = default_grid(ck.model.cfg.hidden_dim, seed=args.seed)
    else:
        grid = [dataclasses.replace(c, seed=args.seed) for c in load_grid(wd(args.grid))]
    if not grid:
        log.warning("empty grid, nothing to run")
        return EXIT_EMPTY
    results, best = run_grid(ck, task, grid, jobs=args.jobs)
    out = _next_run_dir(wd(args.out), f"ft-{task.name}-s{args.seed}")
    with open(out / "results.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record()) + "\n")
    best = {"task": task.name, "checkpoint": str(ckpt_path), **best}
    (out / "best.json").write_text(json.dumps(best, indent=1) + "\n")
    inputs = [ckpt_path] + ([task_file] if task_file.exists() else [])
    write_manifest(out, "finetune", args.seed, inputs, [out / "results.jsonl", out / "best.json"],
                   ck.config.hash(), started)
    print(json.dumps({"run": str(out), **best}))
    return EXIT_OK


def cmd_ood_eval(args, wd: Workdir) -> int:
    from .finetune import ood_mlm_eval
    from .pipeline.corpus import read_corpus

    ckpt = wd(args.ckpt)
    if not (ckpt / "manifest.json").exists():
        raise CompatibilityError(f"no checkpoint at {ckpt}")
    corpus = wd(args.corpus)
    ll = ood_mlm_eval(ckpt, read_corpus(corpus), eval_seed=args.eval_seed)
    rec = {"checkpoint": str(ckpt), "corpus": str(corpus), "log_likelihood": ll}
    if args.out:
        out = wd(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rec, indent=1) + "\n")
    print(json.dumps(rec))
    return EXIT_OK


def _inside(path: str, run_dir: Path) -> bool:
    try:
        Path(path).resolve().relative_to(run_dir.resolve())
        return True
    except ValueError:
        return False


def collect_report(runs: Path) -> list[dict]:
    """One row per pre-training run below ``runs`` (directories holding metrics.jsonl)."""
    run_dirs = sorted(p.parent for p in runs.rglob("metrics.jsonl"))
    extras = []
    for name in ("best.json", "ood.json"):
        for f in sorted(runs.rglob(name)):
            try:
                extras.append(json.loads(f.read_text()))
            except json.JSONDecodeError:
                log.warning("skipping unreadable %s", f)
    rows = []
    for d in run_dirs:
        try:
            recs = [json.loads(l) for l in (d / "metrics.jsonl").read_text().splitlines() if l.strip()]
            last = [r for r in recs if r.get("val_log_likelihood") is not None][-1]
            mode = json.loads((d / "final" / "manifest.json").read_text())["config"]["mode"] \
                if (d / "final" / "manifest.json").exists() else ""
        except (json.JSONDecodeError, IndexError, KeyError, TypeError) as exc:
            log.warning("skipping %s: malformed metrics (%s)", d, exc)
            continue
        tasks = [f"{e['task']}={e['metric']:.6g}" for e in extras if "task" in e and _inside(e["checkpoint"], d)]
        oods = [f"{Path(e['corpus']).name}={e['log_likelihood']:.6g}" for e in extras
                if "log_likelihood" in e and _inside(e["checkpoint"], d)]
        rows.append({"run": str(d.relative_to(runs)), "model": mode, "epoch": last["epoch"], "step": last["step"],
                     "val_log_likelihood": last["val_log_likelihood"],
                     "task_metrics": ";".join(tasks), "ood_log_likelihood": ";".join(oods)})
    return rows


def cmd_report(args, wd: Workdir) -> int:
    runs = wd(args.runs)
    if not runs.is_dir() or not any(runs.rglob("metrics.jsonl")):
        log.error("no runs under %s", runs)
        return EXIT_EMPTY
    rows = collect_report(runs)
    out = wd(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return EXIT_OK


def cmd_experiment(args, wd: Workdir) -> int:
    from .experiment import run_experiment
    from .pipeline.config import load_run_config

    cfg = load_run_config(wd(args.config))
    summary = run_experiment(cfg, wd(args.out), seeds=args.seeds)
    print(json.dumps({k: v for k, v in summary.items() if k != "per_seed"}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcdlab", description="MoE pre-training with transfer-capability distillation")
    p.add_argument("--workdir", help=f"root for relative paths (default ${WORKDIR_ENV} or cwd)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tokens", type=int, default=60_000)
    g.add_argument("--shift", choices=("none", "ood1", "ood2"), default="none")
    g.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="pre-train a teacher, MoE baseline or distilled MoE student")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=("teacher", "moe-baseline", "moe-tcd"))
    t.add_argument("--teacher-ckpt")
    t.add_argument("--corpus")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="run a fine-tuning grid on a toy task")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--task", required=True, help="presence, parity, count, or a task .jsonl file")
    f.add_argument("--task-seed", type=int, default=0)
    f.add_argument("--grid", default="default", help="'default' or a JSON grid file")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(fn=cmd_finetune)

    o = sub.add_parser("ood-eval", help="masked-token log-likelihood of a checkpoint on a corpus")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--corpus", required=True)
    o.add_argument("--eval-seed", type=int)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_ood_eval)

    r = sub.add_parser("report", help="CSV summary of the runs below a directory")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    e = sub.add_parser("experiment", help="baseline vs distilled student over several seeds")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    e.set_defaults(fn=cmd_experiment)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args, Workdir(args.workdir))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CompatibilityError, CorruptCheckpointError, VocabError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"{parser.prog}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
