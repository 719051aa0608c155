import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridvla import tensor as T
from hybridvla.env import default_suite
from hybridvla.model import (
    FORWARD_PASSES,
    LayoutError,
    ModelConfig,
    PolicySnapshot,
    SequenceLayout,
    build_hybrid_mask,
    decode_actions_ar,
    decode_actions_parallel,
    forward,
    generate_cot,
    init_snapshot,
    score_sequences,
    sequence_logprobs,
    tokens_to_chunk,
)
from hybridvla.vocab import ACT_QUERY, THINK_CLOSE, THINK_OPEN, build_vocab
from oracles import mask_rule

VOCAB = build_vocab(default_suite())
SMALL = ModelConfig(layers=2, heads=2, model_dim=16, h=2, d=3, max_cot_len=8, max_len=64)


@pytest.fixture(scope="module")
def snap():
    return init_snapshot(SMALL, VOCAB, seed=0, scale=0.5)


def random_sequence(rng, layout):
    words = VOCAB.text_ids
    prefix = [1] + [int(w) for w in rng.choice(words, layout.prefix_len - 1)]
    cot = [THINK_OPEN] + [int(w) for w in rng.choice(words, layout.cot_len - 2)] + [THINK_CLOSE]
    return prefix + cot + [ACT_QUERY] * layout.action_len


layouts = st.builds(SequenceLayout, st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))


@settings(max_examples=200, deadline=None)
@given(layouts, st.sampled_from(["bidirectional", "causal"]), st.sampled_from(["bidirectional", "causal"]))
def test_mask_matches_cell_rule(layout, pa, aa):
    if layout.total == 0:
        return
    m = build_hybrid_mask(layout, pa, aa)
    n = layout.total
    expected = np.array([[mask_rule(layout, q, k, pa, aa) for k in range(n)] for q in range(n)])
    np.testing.assert_array_equal(m, expected)


def test_reference_mask_prefix3_cot2_action2():
    m = build_hybrid_mask(SequenceLayout(3, 2, 2)).astype(int)
    expected = np.array([
        [1, 1, 1, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0, 0],
        [1, 1, 1, 1, 0, 0, 0],
        [1, 1, 1, 1, 1, 0, 0],
        [1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1],
    ])
    np.testing.assert_array_equal(m, expected)


def test_mask_is_read_only():
    m = build_hybrid_mask(SequenceLayout(2, 2, 2))
    with pytest.raises(ValueError):
        m[0, 0] = False


def test_negative_layout_rejected():
    with pytest.raises(LayoutError):
        build_hybrid_mask(SequenceLayout(-1, 2, 2))


def test_action_perturbation_leaves_prefix_and_cot_logits_identical(snap):
    rng = np.random.default_rng(0)
    lay = SequenceLayout(5, 4, 6)
    seq = random_sequence(rng, lay)
    base = forward(seq, lay, snap).data
    alt = list(seq)
    for j in range(lay.action_start, lay.total):
        alt[j] = int(rng.choice(VOCAB.text_ids))
    out = forward(alt, lay, snap).data
    assert np.array_equal(base[:lay.action_start], out[:lay.action_start])
    assert not np.array_equal(base[lay.action_start:], out[lay.action_start:])


def test_cot_perturbation_is_causal(snap):
    rng = np.random.default_rng(1)
    lay = SequenceLayout(4, 6, 3)
    seq = random_sequence(rng, lay)
    base = forward(seq, lay, snap).data
    t = lay.prefix_len + 3
    alt = list(seq)
    alt[t] = int(rng.choice([w for w in VOCAB.text_ids if w != seq[t]]))
    out = forward(alt, lay, snap).data
    assert np.array_equal(base[:t], out[:t])
    assert not np.array_equal(base[t:], out[t:])


def test_single_action_slot_perturbation_reaches_other_slots(snap):
    rng = np.random.default_rng(2)
    lay = SequenceLayout(4, 3, 6)
    seq = random_sequence(rng, lay)
    base = forward(seq, lay, snap).data
    alt = list(seq)
    alt[lay.action_start] = int(VOCAB.text_ids[0])
    out = forward(alt, lay, snap).data
    assert not np.array_equal(base[lay.action_start + 1:], out[lay.action_start + 1:])


def test_padding_does_not_change_logits(snap):
    rng = np.random.default_rng(3)
    short, long_ = SequenceLayout(3, 3, 6), SequenceLayout(6, 5, 6)
    s1, s2 = random_sequence(rng, short), random_sequence(rng, long_)
    alone = forward(s1, short, snap).data
    _, rows, counts = score_sequences(snap, [s1, s2], [short, long_])
    _, rows_alone, _ = score_sequences(snap, [s1], [short])
    np.testing.assert_allclose(rows.data[:counts[0]], rows_alone.data, rtol=0, atol=1e-12)
    assert alone.shape == (short.total, VOCAB.size)


def test_parallel_decode_is_one_pass_and_ar_is_hd(snap):
    rng = np.random.default_rng(4)
    lay = SequenceLayout(5, 4, 0)
    seq = random_sequence(rng, lay)
    before = FORWARD_PASSES.count
    chunk = decode_actions_parallel(seq, snap)
    assert FORWARD_PASSES.count - before == 1
    assert chunk.values.shape == (SMALL.h, SMALL.d)
    before = FORWARD_PASSES.count
    decode_actions_ar(seq, snap)
    assert FORWARD_PASSES.count - before == SMALL.h * SMALL.d


def test_decode_requires_closed_cot(snap):
    with pytest.raises(LayoutError):
        decode_actions_parallel([1, 10, THINK_OPEN, 12], snap)


def test_generate_cot_forces_close_when_truncated():
    # zero weights except a head bias that never prefers THINK_CLOSE
    s = init_snapshot(SMALL, VOCAB, zero=True)
    s.params["head.b"].data[VOCAB.text_ids[0]] = 5.0
    res = generate_cot([1, 10, 11], s, max_cot_len=6)
    assert res.truncated and res.tokens[-1] == THINK_CLOSE and len(res.tokens) == 6


def test_uniform_model_scores_log_uniform():
    s = init_snapshot(SMALL, VOCAB, zero=True)
    rng = np.random.default_rng(5)
    lay = SequenceLayout(4, 5, SMALL.action_len)
    seq = random_sequence(rng, lay)
    seq[lay.action_start:] = VOCAB.action_ids(rng.integers(0, 256, lay.action_len))
    lp = sequence_logprobs(seq, lay, s)
    assert len(lp) == lay.cot_len - 1 + lay.action_len
    np.testing.assert_allclose(lp, -np.log(VOCAB.size), atol=1e-12)


def test_rescoring_matches_generation_logprobs(snap):
    prefix = [1] + [int(w) for w in VOCAB.text_ids[:6]]
    res = generate_cot(prefix, snap)
    lay = SequenceLayout(len(prefix), len(res.tokens), 0)
    lp = sequence_logprobs(prefix + res.tokens, lay, snap)
    np.testing.assert_allclose(lp, res.logprobs, atol=1e-10)


def test_score_sequences_is_differentiable(snap):
    rng = np.random.default_rng(6)
    lay = SequenceLayout(4, 4, SMALL.action_len)
    seq = random_sequence(rng, lay)
    s = snap.copy("current")
    lp, _, _ = score_sequences(s, [seq], [lay])
    T.backward(T.tsum(lp))
    assert s.params["head.w"].grad is not None and np.any(s.params["head.w"].grad != 0)


def test_snapshot_roundtrip_and_fingerprint(snap, tmp_path):
    snap.save(tmp_path / "m.ckpt")
    back = PolicySnapshot.load(tmp_path / "m.ckpt")
    assert back.fingerprint() == snap.fingerprint()
    assert back.config == snap.config and back.vocab == snap.vocab


def test_snapshot_mismatch_raises(snap, tmp_path):
    snap.save(tmp_path / "m.ckpt")
    arrays, meta = T.load_checkpoint(tmp_path / "m.ckpt")
    arrays["head.b"] = arrays["head.b"][:-1]
    T.save_checkpoint(tmp_path / "bad.ckpt", arrays, meta)
    with pytest.raises(ValueError, match="mismatch"):
        PolicySnapshot.load(tmp_path / "bad.ckpt")


def test_copy_roles_are_independent(snap):
    ref = snap.copy("reference")
    ref.params["head.b"].data[0] += 1.0
    assert ref.fingerprint() != snap.fingerprint()
    assert not ref.params["head.b"].requires_grad


def test_tokens_to_chunk_non_action_ids_are_noop():
    ids = [VOCAB.action_offset + 255] + [THINK_CLOSE] * 5
    chunk = tokens_to_chunk(ids, VOCAB, 2, 3)
    assert chunk.values[0, 0] == pytest.approx(1 - 1 / 256)
    assert np.all(chunk.values.ravel()[1:] == 0.0)


def test_model_config_rejects_unknown_keys_and_accepts_bin_alias():
    assert ModelConfig.from_dict({"B": 128}).n_bins == 128
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"depth": 3})
    with pytest.raises(ValueError):
        ModelConfig(model_dim=10, heads=3)
