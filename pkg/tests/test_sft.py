import json

import numpy as np
import pytest

from hybridvla import tensor as T
from hybridvla.data import build_dataset, demo_to_records, load_records
from hybridvla.env import default_suite, record_expert_demo
from hybridvla.model import ModelConfig, init_snapshot
from hybridvla.sft import (
    SftConfig,
    TruncationError,
    build_training_example,
    fit_snapshot,
    mask_cot,
    sft_loss,
    sft_step,
    train_sft,
)
from hybridvla.vocab import ACT_QUERY, THINK_CLOSE, THINK_OPEN, build_vocab

SUITE = default_suite()
VOCAB = build_vocab(SUITE)
TINY = ModelConfig(layers=1, heads=2, model_dim=16)


@pytest.fixture(scope="module")
def records():
    out = []
    for k in range(6):
        out += demo_to_records(record_expert_demo(SUITE.tasks[k], 40 + k))[0]
    return out


def test_training_example_layout(records):
    rec = records[0]
    ex = build_training_example(rec, VOCAB, TINY)
    lay = ex.layout
    assert lay.prefix_len == 1 + len(rec.obs_tokens) + len(rec.instr_tokens)
    assert ex.tokens[lay.action_start:] == [ACT_QUERY] * 15
    cot_ids = VOCAB.encode(rec.cot_tokens)
    pos = np.flatnonzero(ex.is_cot)
    assert ex.targets[pos].tolist() == cot_ids[1:]
    assert pos.tolist() == list(range(lay.prefix_len, lay.prefix_len + lay.cot_len - 1))
    assert ex.targets[lay.action_start:].tolist() == VOCAB.action_ids(rec.action_tokens)
    assert ex.loss_mask.sum() == lay.cot_len - 1 + 15
    assert not ex.loss_mask[:lay.prefix_len].any()


def test_mask_cot_keeps_actions(records):
    m = mask_cot(records[3])
    assert m.cot_tokens == ["<think>", "</think>"] and m.action_tokens == records[3].action_tokens
    ex = build_training_example(m, VOCAB, TINY)
    assert ex.tokens[ex.layout.prefix_len:ex.layout.action_start] == [THINK_OPEN, THINK_CLOSE]


def test_truncation_errors(records):
    with pytest.raises(TruncationError):
        build_training_example(records[0], VOCAB, ModelConfig(layers=1, heads=2, model_dim=16, max_cot_len=5))
    with pytest.raises(TruncationError):
        build_training_example(records[0], VOCAB, ModelConfig(layers=1, heads=2, model_dim=16, max_len=30))


def test_zero_model_loss_is_log_v(records):
    snap = init_snapshot(TINY, VOCAB, zero=True)
    exs = [build_training_example(r, VOCAB, TINY) for r in records[:4]]
    loss, stats = sft_loss(snap, exs)
    assert loss.item() == pytest.approx(np.log(VOCAB.size), abs=1e-12)
    assert stats["cot_loss"] == pytest.approx(np.log(VOCAB.size))


def test_loss_decreases_when_overfitting(records):
    cfg = SftConfig(steps=60, batch_size=8, learning_rate=3e-3, model=TINY, warmup_steps=0, log_every=20,
                    cot_dropout=0.0)
    _, metrics = fit_snapshot(records[:8], VOCAB, cfg)
    assert metrics[-1]["loss"] < 0.5 * metrics[0]["loss"]


def test_nonfinite_loss_aborts_with_diagnostics(records, tmp_path):
    snap = init_snapshot(TINY, VOCAB)
    snap.params["head.b"].data[0] = np.nan
    opt = T.Adam(snap.params)
    ex = [build_training_example(records[0], VOCAB, TINY)]
    with pytest.raises(FloatingPointError):
        sft_step(ex, snap, opt, SftConfig(model=TINY), diagnostics_dir=tmp_path)
    assert "loss" in json.loads((tmp_path / "diagnostics.json").read_text())


def test_train_sft_outputs_are_reproducible(tmp_path):
    path, _ = build_dataset(SUITE, 4, 0, tmp_path / "data")
    cfg = SftConfig(steps=6, batch_size=4, model=TINY, dataset=str(path), log_every=3)
    train_sft(cfg, tmp_path / "a")
    train_sft(cfg, tmp_path / "b")
    rows = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [3, 6]
    assert set(rows[0]) == {"step", "loss", "cot_loss", "action_loss"}
    for name in ("metrics.jsonl", "final.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(load_records(path)) > 0


def test_config_validation():
    with pytest.raises(ValueError):
        SftConfig(cot_dropout=1.0)
    with pytest.raises(ValueError):
        SftConfig(learning_rate=0.0)
    assert SftConfig(model={"layers": 3}).model.layers == 3
