import json

import numpy as np
import pytest

from hybridvla.data import validate_schema
from hybridvla.env import default_suite
from hybridvla.eval import (
    EvalConfig,
    evaluate,
    expert_policy,
    intervene_cot,
    measure_latency,
    run_ablation_suite,
)
from hybridvla.model import ModelConfig, init_snapshot
from hybridvla.rollout import ModelPolicy, run_episodes
from hybridvla.vocab import THINK_CLOSE, THINK_OPEN, build_vocab

SUITE = default_suite()
VOCAB = build_vocab(SUITE)
TINY = ModelConfig(layers=1, heads=2, model_dim=16, max_cot_len=6)


@pytest.fixture(scope="module")
def snap():
    return init_snapshot(TINY, VOCAB, seed=3, scale=0.3)


def test_expert_through_harness_is_perfect():
    rep = evaluate(expert_policy(VOCAB), EvalConfig(n_conditions=10))
    assert rep.suite_sr == 1.0
    assert set(rep.per_task) == {t.id for t in SUITE.tasks}


def test_untrained_snapshot_fails(snap):
    rep = evaluate(snap, EvalConfig(n_conditions=5))
    assert rep.suite_sr < 0.1
    assert rep.suite_sr == pytest.approx(np.mean(list(rep.per_task.values())))


def test_reports_are_reproducible(snap):
    cfg = EvalConfig(n_conditions=2, seed=4)
    assert evaluate(snap, cfg).to_json() == evaluate(snap, cfg).to_json()


def test_report_hash_depends_on_config(snap):
    a = evaluate(snap, EvalConfig(n_conditions=1, seed=0, cot_mode="mask"))
    b = evaluate(snap, EvalConfig(n_conditions=1, seed=1, cot_mode="mask"))
    assert a.config_hash != b.config_hash


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(n_conditions=0)
    with pytest.raises(ValueError):
        EvalConfig(cot_mode="shuffle")


def test_mask_intervention():
    assert intervene_cot([2, 9, 9, 3], "mask") == [THINK_OPEN, THINK_CLOSE]
    assert intervene_cot(None, "mask") == [THINK_OPEN, THINK_CLOSE]


def test_random_intervention_seeded_and_well_formed():
    a = intervene_cot(None, "random", np.random.default_rng(1), 12, VOCAB)
    b = intervene_cot(None, "random", np.random.default_rng(1), 12, VOCAB)
    assert a == b and len(a) == 14
    assert validate_schema(a)[0]
    assert all(VOCAB.word_offset <= t < VOCAB.action_offset for t in a[1:-1])
    with pytest.raises(ValueError):
        intervene_cot(None, "random")
    with pytest.raises(ValueError):
        intervene_cot(None, "other")


def test_mask_mode_ignores_policy_seed(snap):
    tasks = list(SUITE.tasks[:3])
    seeds = [11, 12, 13]
    runs = []
    for s in (0, 99):
        eps = run_episodes(ModelPolicy(snap, cot_mode="mask", seed=s), tasks, seeds)
        runs.append([[st.actions for st in e.steps] for e in eps])
    assert runs[0] == runs[1]


def test_latency_pass_counts(snap):
    hyb = measure_latency(snap, "hybrid", n_chunks=5)
    ar = measure_latency(snap, "ar_emulation", n_chunks=5)
    assert hyb["passes_per_chunk"] == 1
    assert ar["passes_per_chunk"] == TINY.h * TINY.d == 15
    assert hyb["n_chunks"] == ar["n_chunks"] == 5


def test_ablation_table(snap, tmp_path):
    rows = run_ablation_suite(snap, snap, EvalConfig(n_conditions=1), tmp_path, n_latency_chunks=3)
    assert len(rows) == 8
    assert sum(r["sr"] is not None for r in rows) == 6
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert table["rows"] == rows
    for name in ("ablation.md", "ablation_sr.png", "latency.png", "timing.json"):
        assert (tmp_path / name).exists()


def test_trace_logging(snap):
    rep = evaluate(snap, EvalConfig(n_conditions=1, cot_mode="mask"))
    assert len(rep.traces) == 10
    assert all(c == [THINK_OPEN, THINK_CLOSE] for tr in rep.traces for c in tr["cots"])
