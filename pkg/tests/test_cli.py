import csv
import json

import pytest

from tcdlab.cli import REPORT_COLUMNS, WORKDIR_ENV, main

TINY = """
mode = "teacher"
[model]
vocab_size = 200
hidden_dim = {hidden}
num_layers = 2
num_heads = 2
max_seq_len = 16
[moe]
num_experts = 2
[distill]
sample_total = 64
num_groups = 4
group_size = 16
[train]
seed = 0
epochs = 2
batch_size = 8
seq_len = 16
peak_lr = 3e-3
warmup_steps = 5
val_fraction = 0.1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY.format(hidden=16))
    (root / "wide.toml").write_text(TINY.format(hidden=32))
    assert run("gen-corpus", "--out", root / "corpus.txt", "--tokens", 4000) == 0
    assert run("pretrain", "--config", root / "tiny.toml", "--corpus", root / "corpus.txt",
               "--out", root / "runs" / "teacher") == 0
    return root


def test_gen_corpus_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("gen-corpus", "--out", tmp_path / f"{name}.txt", "--seed", 3, "--tokens", 5000) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    tokens = sum(len(l.split()) for l in (tmp_path / "a.txt").read_text().splitlines())
    assert 5000 <= tokens < 5000 + 40
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["tokens"] == tokens


def test_gen_corpus_reports_shift(tmp_path, capsys):
    assert run("gen-corpus", "--out", tmp_path / "o.txt", "--tokens", 20000, "--shift", "ood2") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["shift"] == "ood2" and summary["unigram_shift"]["shifted"]


def test_pretrain_writes_metrics_and_manifest(work):
    run_dir = work / "runs" / "teacher"
    recs = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs if r["val_log_likelihood"] is not None] == [1, 2]
    manifest = json.loads((run_dir / "run.json").read_text())
    assert manifest["command"] == "pretrain" and manifest["seed"] == 0 and len(manifest["input_hash"]) == 64
    assert (run_dir / "final" / "manifest.json").exists()


def test_pretrain_teacher_flag_mismatch_is_usage_error(work, tmp_path):
    code = run("pretrain", "--config", work / "tiny.toml", "--corpus", work / "corpus.txt", "--mode", "teacher",
               "--teacher-ckpt", work / "runs" / "teacher" / "final", "--out", tmp_path / "x")
    assert code == 2
    assert run("pretrain", "--config", work / "tiny.toml", "--corpus", work / "corpus.txt", "--mode", "moe-tcd",
               "--out", tmp_path / "y") == 2


def test_pretrain_student_geometry_mismatch(work, tmp_path):
    code = run("pretrain", "--config", work / "wide.toml", "--corpus", work / "corpus.txt", "--mode", "moe-tcd",
               "--teacher-ckpt", work / "runs" / "teacher" / "final", "--out", tmp_path / "s", "--max-steps", 6)
    assert code == 3


def test_pretrain_missing_config(tmp_path):
    assert run("pretrain", "--config", tmp_path / "nope.toml", "--out", tmp_path / "o") == 3


def test_finetune_one_cell_grid_and_fresh_run_ids(work, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{"mode": "adapter", "lr": 3e-3, "adapter_size": 4, "epochs": 1}]))
    args = ("finetune", "--ckpt", work / "runs" / "teacher" / "final", "--task", "presence",
            "--grid", grid, "--out", tmp_path / "ft")
    assert run(*args) == 0 and run(*args) == 0
    runs = sorted(p.name for p in (tmp_path / "ft").iterdir())
    assert runs == ["ft-presence-s0-000", "ft-presence-s0-001"]
    first = tmp_path / "ft" / runs[0]
    assert len((first / "results.jsonl").read_text().splitlines()) == 1
    assert (first / "results.jsonl").read_bytes() == (tmp_path / "ft" / runs[1] / "results.jsonl").read_bytes()
    best = json.loads((first / "best.json").read_text())
    assert best["mode"] == "adapter" and best["missing"] == ["full"]


def test_finetune_missing_checkpoint(tmp_path):
    assert run("finetune", "--ckpt", tmp_path / "nothing", "--task", "presence", "--out", tmp_path / "ft") == 3


def test_ood_eval_command(work, tmp_path, capsys):
    assert run("gen-corpus", "--out", tmp_path / "ood.txt", "--tokens", 2000, "--shift", "ood1", "--seed", 5) == 0
    capsys.readouterr()
    assert run("ood-eval", "--ckpt", work / "runs" / "teacher" / "final", "--corpus", tmp_path / "ood.txt",
               "--out", tmp_path / "ood.json") == 0
    rec = json.loads((tmp_path / "ood.json").read_text())
    assert rec["log_likelihood"] < 0 and json.loads(capsys.readouterr().out) == rec


def _fake_run(d, val=-3.0, epoch=1):
    d.mkdir(parents=True)
    rec = {"step": 10, "epoch": epoch, "val_log_likelihood": val}
    (d / "metrics.jsonl").write_text(json.dumps({"step": 9, "epoch": epoch, "val_log_likelihood": None}) + "\n"
                                     + json.dumps(rec) + "\n")


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def test_report_one_row_per_run(tmp_path):
    for i in range(3):
        _fake_run(tmp_path / "runs" / f"r{i}", val=-3.0 - i)
    (tmp_path / "runs" / "r1" / "best.json").write_text(json.dumps(
        {"task": "presence", "metric": 0.9, "checkpoint": str(tmp_path / "runs" / "r1" / "final")}))
    assert run("report", "--runs", tmp_path / "runs", "--out", tmp_path / "report.csv") == 0
    header, rows = read_csv(tmp_path / "report.csv")
    assert tuple(header) == REPORT_COLUMNS
    assert len(rows) == 3
    assert rows[1][header.index("task_metrics")] == "presence=0.9"
    assert [float(r[header.index("val_log_likelihood")]) for r in rows] == [-3.0, -4.0, -5.0]


def test_report_skips_malformed_run(tmp_path):
    _fake_run(tmp_path / "runs" / "good")
    (tmp_path / "runs" / "bad").mkdir()
    (tmp_path / "runs" / "bad" / "metrics.jsonl").write_text("{not json\n")
    assert run("report", "--runs", tmp_path / "runs", "--out", tmp_path / "r.csv") == 0
    _, rows = read_csv(tmp_path / "r.csv")
    assert [r[0] for r in rows] == ["good"]


def test_report_on_empty_directory(tmp_path):
    (tmp_path / "runs").mkdir()
    assert run("report", "--runs", tmp_path / "runs", "--out", tmp_path / "r.csv") == 1
    assert not (tmp_path / "r.csv").exists()


def test_report_includes_real_run(work):
    assert run("report", "--runs", work / "runs", "--out", work / "report.csv") == 0
    header, rows = read_csv(work / "report.csv")
    assert rows[0][header.index("model")] == "teacher" and rows[0][header.index("epoch")] == "2"


def test_workdir_env_resolves_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(WORKDIR_ENV, str(tmp_path))
    assert run("gen-corpus", "--out", "data/c.txt", "--tokens", 500) == 0
    assert (tmp_path / "data" / "c.txt").exists()
    assert run("--workdir", tmp_path / "w", "gen-corpus", "--out", "c.txt", "--tokens", 500) == 0
    assert (tmp_path / "w" / "c.txt").exists()


def test_bad_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
