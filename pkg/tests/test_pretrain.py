import dataclasses
import statistics

import numpy as np
import pytest

from tcdlab.errors import CompatibilityError, ConfigError
from tcdlab.moe import MoEConfig
from tcdlab.pipeline.checkpoint import load_checkpoint
from tcdlab.pipeline.corpus import generate_sentences
from tcdlab.pipeline.pretrain import METRIC_FIELDS, Trainer, pretrain, read_metrics

from conftest import small_run

LINES = generate_sentences(4000, seed=0)


@pytest.fixture(scope="module")
def teacher_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    return pretrain(small_run(), out, LINES).path


def test_teacher_logs_only_mlm(teacher_ckpt):
    recs = read_metrics(teacher_ckpt.parent / "metrics.jsonl")
    assert all(set(r) == set(METRIC_FIELDS) for r in recs)
    assert all(r[k] is None for r in recs for k in ("l_b", "l_t", "l_i", "l_a"))
    assert all(r["total"] == r["l_mlm"] for r in recs)
    epochs = [r for r in recs if r["val_log_likelihood"] is not None]
    assert [r["epoch"] for r in epochs] == [1, 2]
    assert (teacher_ckpt.parent / "ckpt-epoch-001" / "manifest.json").exists()


def test_loss_accounting(teacher_ckpt, tmp_path):
    cfg = small_run("moe-tcd", max_steps=15)
    pretrain(cfg, tmp_path, LINES, teacher_path=teacher_ckpt)
    for r in read_metrics(tmp_path / "metrics.jsonl"):
        expected = r["l_mlm"] + 1000.0 * r["l_b"] + r["l_t"] + r["l_i"] + 1.0 * r["l_a"]
        assert abs(r["total"] - expected) < 1e-10


def test_baseline_logs_balance_loss(tmp_path):
    pretrain(small_run("moe-baseline", max_steps=6), tmp_path, LINES)
    recs = read_metrics(tmp_path / "metrics.jsonl")
    assert all(r["l_b"] is not None and r["l_t"] is None for r in recs)


def test_teacher_files_untouched(teacher_ckpt, tmp_path):
    before = {f.name: f.read_bytes() for f in teacher_ckpt.iterdir()}
    pretrain(small_run("moe-tcd", max_steps=6), tmp_path, LINES, teacher_path=teacher_ckpt)
    assert {f.name: f.read_bytes() for f in teacher_ckpt.iterdir()} == before


def test_mode_and_teacher_must_agree(teacher_ckpt, tmp_path):
    with pytest.raises(ConfigError):
        Trainer(small_run("moe-tcd"), LINES, tmp_path)
    with pytest.raises(ConfigError):
        Trainer(small_run("moe-baseline"), LINES, tmp_path, teacher_path=teacher_ckpt)


def test_teacher_geometry_mismatch(teacher_ckpt, tmp_path):
    with pytest.raises(CompatibilityError):
        Trainer(small_run("moe-tcd", hidden=32), LINES, tmp_path, teacher_path=teacher_ckpt)


def test_warmup_must_fit(tmp_path):
    with pytest.raises(ConfigError):
        Trainer(small_run(max_steps=4), LINES, tmp_path)


def test_resume_reproduces_uninterrupted_run(teacher_ckpt, tmp_path):
    cfg = small_run("moe-tcd", max_steps=12, checkpoint_every=7)
    full = pretrain(cfg, tmp_path / "full", LINES, teacher_path=teacher_ckpt)
    resumed = pretrain(cfg, tmp_path / "resumed", LINES, teacher_path=teacher_ckpt,
                       resume_from=tmp_path / "full" / "ckpt-step-000007")
    for name, arr in full.model.state_arrays().items():
        assert np.array_equal(arr, resumed.model.params[name].data), name
    a = read_metrics(tmp_path / "full" / "metrics.jsonl")[7:]
    b = read_metrics(tmp_path / "resumed" / "metrics.jsonl")
    assert a == b


def test_resume_rejects_changed_config(tmp_path):
    cfg = small_run("moe-baseline", max_steps=8, checkpoint_every=4)
    pretrain(cfg, tmp_path / "a", LINES)
    changed = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, peak_lr=1e-2))
    with pytest.raises(CompatibilityError):
        Trainer(changed, LINES, tmp_path / "b", resume_from=tmp_path / "a" / "ckpt-step-000004")


def test_run_is_deterministic(tmp_path):
    cfg = small_run("moe-baseline", max_steps=10)
    a = pretrain(cfg, tmp_path / "a", LINES)
    b = pretrain(cfg, tmp_path / "b", LINES)
    assert (a.path / "params.bin").read_bytes() == (b.path / "params.bin").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_validation_split_written(teacher_ckpt):
    val = (teacher_ckpt.parent / "val.txt").read_text().splitlines()
    assert val == LINES[-len(val):] and len(val) == round(0.1 * len(LINES))
    assert load_checkpoint(teacher_ckpt).config.model.vocab_size == len(load_checkpoint(teacher_ckpt).vocab)


@pytest.mark.slow
def test_distillation_losses_fall_over_first_200_steps(tmp_path):
    """Toy H=32 student against a briefly trained teacher, all three sites weighted; median over seeds 0-2."""
    ratios = {"l_t": [], "l_i": [], "l_a": []}
    lines = generate_sentences(20_000, seed=0)
    for seed in (0, 1, 2):
        base = dict(hidden=32, seq_len=32, batch_size=16, seed=seed, warmup_steps=20, peak_lr=3e-3)
        tcfg = small_run("teacher", max_steps=200, **base)
        tcfg = dataclasses.replace(tcfg, model=dataclasses.replace(tcfg.model, max_seq_len=32))
        teacher = pretrain(tcfg, tmp_path / f"t{seed}", lines)
        scfg = dataclasses.replace(tcfg, mode="moe-tcd", moe=MoEConfig(num_experts=4))
        pretrain(scfg, tmp_path / f"s{seed}", lines, teacher_path=teacher.path)
        recs = read_metrics(tmp_path / f"s{seed}" / "metrics.jsonl")
        for k in ratios:
            vals = [r[k] for r in recs]
            ratios[k].append(statistics.fmean(vals[-20:]) / statistics.fmean(vals[:20]))
    for k, rs in ratios.items():
        assert statistics.median(rs) < 1.0, (k, rs)
