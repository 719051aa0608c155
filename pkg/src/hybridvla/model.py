"""Hybrid-attention decoder policy.

One decoder serves both halves of the factorised policy: chain-of-thought
tokens attend causally, and the ``h*d`` action query slots that follow them
attend bidirectionally to each other and to everything before them, so an
entire action chunk is read off a single forward pass.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .vocab import ACT_QUERY, BOS, PAD, THINK_CLOSE, THINK_OPEN, VocabSpec, detokenize_actions

PREFIX_MODES = ("bidirectional", "causal")
ROLES = ("current", "behavior", "reference")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    h: int = 5
    d: int = 3
    n_bins: int = 256
    max_cot_len: int = 24
    max_len: int = 96
    prefix_attention: str = "bidirectional"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.prefix_attention not in PREFIX_MODES:
            raise ValueError(f"prefix_attention must be one of {PREFIX_MODES}")
        if self.h < 1 or self.d < 1 or self.n_bins < 2 or self.max_cot_len < 2:
            raise ValueError("need h >= 1, d >= 1, n_bins >= 2, max_cot_len >= 2")

    @property
    def action_len(self):
        return self.h * self.d

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        if "B" in obj:  # config-file alias for the bin count
            obj["n_bins"] = obj.pop("B")
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class SequenceLayout:
    prefix_len: int
    cot_len: int
    action_len: int

    @property
    def total(self):
        return self.prefix_len + self.cot_len + self.action_len

    @property
    def action_start(self):
        return self.prefix_len + self.cot_len


@dataclass
class ActionChunk:
    values: np.ndarray  # h x d
    tokens: list  # vocab ids


@dataclass
class CotResult:
    tokens: list
    truncated: bool
    logprobs: list = field(default_factory=list)


class ForwardCounter:
    """Counts decoder invocations; a batched call counts once."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


FORWARD_PASSES = ForwardCounter()


# ---------------------------------------------------------------- masks


def _mask(layout, prefix_attention, action_attention):
    n = layout.total
    p, a0 = layout.prefix_len, layout.action_start
    idx = np.arange(n)
    q, k = idx[:, None], idx[None, :]
    causal = k <= q
    if prefix_attention == "bidirectional":
        allow = np.where(q < p, k < p, causal)
    else:
        allow = causal.copy()
    if action_attention == "bidirectional":
        allow = np.where(q >= a0, True, allow)
    allow.flags.writeable = False
    return allow


@lru_cache(maxsize=4096)
def _cached_mask(layout, prefix_attention, action_attention):
    return _mask(layout, prefix_attention, action_attention)


def build_hybrid_mask(layout, prefix_attention="bidirectional", action_attention="bidirectional"):
    """Boolean ``total x total`` matrix (row = query, column = key).

    Prefix rows see the prefix (bidirectionally by default); CoT rows see the
    prefix and earlier CoT; action rows see everything, including every other
    action slot. ``action_attention="causal"`` gives the AR-emulation variant.
    """
    if min(layout.prefix_len, layout.cot_len, layout.action_len) < 0:
        raise LayoutError(f"negative layout counts: {layout}")
    return _cached_mask(layout, prefix_attention, action_attention)


# ---------------------------------------------------------------- parameters


class PolicySnapshot:
    """Named parameter set plus the config and vocabulary it was built for."""

    def __init__(self, params, config, vocab, role="current"):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.params = params
        self.config = config
        self.vocab = vocab
        self.role = role

    def copy(self, role=None):
        role = role or self.role
        params = {k: Tensor(v.data.copy(), requires_grad=(role == "current")) for k, v in self.params.items()}
        return PolicySnapshot(params, self.config, self.vocab, role)

    def fingerprint(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def save(self, path):
        T.save_checkpoint(
            path,
            {k: v.data for k, v in sorted(self.params.items())},
            {"config": self.config.to_dict(), "vocab": self.vocab.to_json(), "role": self.role},
        )

    @classmethod
    def load(cls, path, role="current"):
        arrays, meta = T.load_checkpoint(path)
        config = ModelConfig.from_dict(meta["config"])
        vocab = VocabSpec.from_json(meta["vocab"])
        params = {k: Tensor(v, requires_grad=(role == "current")) for k, v in arrays.items()}
        snap = cls(params, config, vocab, role)
        check_snapshot(snap)
        return snap


def param_shapes(config, vocab_size):
    D, F = config.model_dim, config.model_dim * config.ffn_mult
    shapes = {
        "tok_emb": (vocab_size, D),
        "pos_emb": (config.max_len, D),
        "slot_emb": (config.action_len + 1, D),
        "ln_f.g": (D,),
        "ln_f.b": (D,),
        "head.w": (D, vocab_size),
        "head.b": (vocab_size,),
    }
    for l in range(config.layers):
        p = f"block{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "wq": (D, D), p + "bq": (D,),
            p + "wk": (D, D), p + "bk": (D,),
            p + "wv": (D, D), p + "bv": (D,),
            p + "wo": (D, D), p + "bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "w1": (D, F), p + "b1": (F,),
            p + "w2": (F, D), p + "b2": (D,),
        })
    return shapes


def check_snapshot(snap):
    expected = param_shapes(snap.config, snap.vocab.size)
    if set(expected) != set(snap.params):
        missing = sorted(set(expected) - set(snap.params))
        extra = sorted(set(snap.params) - set(expected))
        raise ValueError(f"checkpoint/config mismatch: missing={missing[:4]} extra={extra[:4]}")
    for k, shape in expected.items():
        if snap.params[k].shape != shape:
            raise ValueError(f"checkpoint/vocab mismatch for {k}: {snap.params[k].shape} != {shape}")
    if snap.config.n_bins != snap.vocab.n_bins:
        raise ValueError("config.n_bins disagrees with vocabulary")


def init_snapshot(config, vocab, seed=0, scale=0.02, zero=False):
    if config.n_bins != vocab.n_bins:
        raise ValueError("config.n_bins disagrees with vocabulary")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, vocab.size).items():
        leaf = name.rsplit(".", 1)[-1]
        if zero:
            data = np.zeros(shape)
        elif leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, scale, size=shape)
            if leaf in ("wo", "w2"):
                data /= np.sqrt(2 * config.layers)
        params[name] = Tensor(data, requires_grad=True)
    return PolicySnapshot(params, config, vocab, "current")


# ---------------------------------------------------------------- forward


def batch_inputs(seqs, layouts, config, action_attention="bidirectional"):
    """Pad sequences into ``tokens [B,T]``, ``masks [B,T,T]`` and slot ids ``[B,T]``."""
    B = len(seqs)
    Tn = max(l.total for l in layouts)
    tokens = np.full((B, Tn), PAD, dtype=np.int64)
    masks = np.zeros((B, Tn, Tn), dtype=bool)
    slots = np.zeros((B, Tn), dtype=np.int64)
    for b, (seq, lay) in enumerate(zip(seqs, layouts)):
        n = lay.total
        if len(seq) != n:
            raise LayoutError(f"sequence length {len(seq)} != layout total {n}")
        tokens[b, :n] = seq
        masks[b, :n, :n] = build_hybrid_mask(lay, config.prefix_attention, action_attention)
        pad = np.arange(n, Tn)
        masks[b, pad, pad] = True
        slots[b, lay.action_start:n] = np.arange(1, lay.action_len + 1)
    return tokens, masks, slots


def forward_batch(snapshot, tokens, masks, slots):
    """Logits ``[B, T, V]`` for a padded batch."""
    cfg = snapshot.config
    P = snapshot.params
    B, Tn = tokens.shape
    if Tn > cfg.max_len:
        raise LayoutError(f"sequence length {Tn} exceeds max_len {cfg.max_len}")
    FORWARD_PASSES.count += 1
    H, D = cfg.heads, cfg.model_dim
    dh = D // H
    x = T.embedding(tokens, P["tok_emb"]) + T.embedding(np.arange(Tn), P["pos_emb"]) + T.embedding(slots, P["slot_emb"])
    attn_mask = masks[:, None, :, :]
    scale = 1.0 / np.sqrt(dh)
    for l in range(cfg.layers):
        p = f"block{l}."
        hdn = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b):
            return ((hdn @ P[p + w]) + P[p + b]).reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        att = T.masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, attn_mask)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tn, D)
        x = x + (o @ P[p + "wo"]) + P[p + "bo"]
        hdn = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        x = x + (T.gelu((hdn @ P[p + "w1"]) + P[p + "b1"]) @ P[p + "w2"]) + P[p + "b2"]
    x = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    return (x @ P["head.w"]) + P["head.b"]


def forward(tokens, layout, snapshot, action_attention="bidirectional"):
    """Logits ``[total, V]`` for one assembled sequence."""
    if len(tokens) != layout.total:
        raise LayoutError(f"token count {len(tokens)} != layout total {layout.total}")
    tok, masks, slots = batch_inputs([list(tokens)], [layout], snapshot.config, action_attention)
    out = forward_batch(snapshot, tok, masks, slots)
    return out.reshape(layout.total, out.shape[-1])


def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _choose(logit_row, temperature, rng):
    if temperature <= 0:
        return int(np.argmax(logit_row))
    z = logit_row / temperature
    p = np.exp(z - z.max())
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(c) - 1))


# ---------------------------------------------------------------- decoding


def generate_cot_batch(snapshot, prefixes, max_cot_len=None, temperature=0.0, rng=None):
    """Lock-step autoregressive CoT decoding for several prefixes."""
    max_cot_len = max_cot_len or snapshot.config.max_cot_len
    if max_cot_len < 2:
        raise ValueError("max_cot_len must be >= 2")
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    results = [CotResult([THINK_OPEN], False, []) for _ in prefixes]
    active = list(range(len(prefixes)))
    with no_grad():
        while active:
            seqs = [list(prefixes[i]) + results[i].tokens for i in active]
            lays = [SequenceLayout(len(prefixes[i]), len(results[i].tokens), 0) for i in active]
            tok, masks, slots = batch_inputs(seqs, lays, snapshot.config)
            logits = forward_batch(snapshot, tok, masks, slots).data
            still = []
            for r, i in enumerate(active):
                row = logits[r, lays[r].total - 1]
                tok_id = _choose(row, temperature, rng)
                res = results[i]
                if len(res.tokens) == max_cot_len - 1 and tok_id != THINK_CLOSE:
                    tok_id = THINK_CLOSE
                    res.truncated = True
                res.logprobs.append(float(_log_softmax_np(row)[tok_id]))
                res.tokens.append(tok_id)
                if tok_id != THINK_CLOSE:
                    still.append(i)
            active = still
    return results


def generate_cot(prefix, snapshot, max_cot_len=None, temperature=0.0, rng=None):
    """Greedy (or sampled) CoT from ``THINK_OPEN`` to ``THINK_CLOSE``.

    If ``max_cot_len`` is reached first, ``THINK_CLOSE`` is forced and
    ``truncated`` is set.
    """
    return generate_cot_batch(snapshot, [list(prefix)], max_cot_len, temperature, rng)[0]


def tokens_to_chunk(ids, vocab, h, d):
    """Action ids to an :class:`ActionChunk`; non-action ids act as a zero (no-op) command."""
    ids = [int(i) for i in ids]
    vals = np.array(
        [detokenize_actions(i - vocab.action_offset, vocab.n_bins) if vocab.is_action(i) else 0.0 for i in ids],
        dtype=np.float64,
    )
    return ActionChunk(vals.reshape(h, d), ids)


def decode_actions_batch(snapshot, prefixes, cots, temperature=0.0, rng=None):
    """One forward pass over all rows; every action slot is read in parallel.

    Returns ``(action_ids [B, h*d], logprobs [B, h*d])``.
    """
    cfg = snapshot.config
    n = cfg.action_len
    seqs, lays = [], []
    for prefix, cot in zip(prefixes, cots):
        if not cot or cot[-1] != THINK_CLOSE:
            raise LayoutError("CoT must end with THINK_CLOSE before action decoding")
        seqs.append(list(prefix) + list(cot) + [ACT_QUERY] * n)
        lays.append(SequenceLayout(len(prefix), len(cot), n))
    with no_grad():
        tok, masks, slots = batch_inputs(seqs, lays, cfg)
        logits = forward_batch(snapshot, tok, masks, slots).data
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    lps = np.zeros((len(seqs), n))
    for b, lay in enumerate(lays):
        rows = logits[b, lay.action_start:lay.total]
        logp = _log_softmax_np(rows)
        for j in range(n):
            ids[b, j] = _choose(rows[j], temperature, rng)
            lps[b, j] = logp[j, ids[b, j]]
    return ids, lps


def split_prefix(seq):
    seq = list(seq)
    if THINK_OPEN not in seq:
        raise LayoutError("sequence has no THINK_OPEN")
    p = seq.index(THINK_OPEN)
    return seq[:p], seq[p:]


def decode_actions_parallel(seq, snapshot):
    """Greedy action chunk for ``prefix + CoT`` in exactly one forward pass."""
    prefix, cot = split_prefix(seq)
    ids, _ = decode_actions_batch(snapshot, [prefix], [cot])
    cfg = snapshot.config
    return tokens_to_chunk(ids[0], snapshot.vocab, cfg.h, cfg.d)


def decode_actions_ar(seq, snapshot):
    """Baseline: ``h*d`` sequential passes with a causal action block."""
    prefix, cot = split_prefix(seq)
    if cot[-1] != THINK_CLOSE:
        raise LayoutError("CoT must end with THINK_CLOSE before action decoding")
    cfg = snapshot.config
    out = []
    with no_grad():
        for _ in range(cfg.action_len):
            seq_i = prefix + cot + out + [ACT_QUERY]
            lay = SequenceLayout(len(prefix), len(cot), len(out) + 1)
            tok, masks, slots = batch_inputs([seq_i], [lay], cfg, action_attention="causal")
            logits = forward_batch(snapshot, tok, masks, slots).data
            out.append(int(np.argmax(logits[0, lay.total - 1])))
    return tokens_to_chunk(out, snapshot.vocab, cfg.h, cfg.d)


# ---------------------------------------------------------------- scoring


def scored_positions(layout):
    """Positions that emit a generated token, and the index of the token they emit.

    CoT position ``t`` predicts CoT token ``t+1`` (THINK_OPEN itself is given);
    action slot ``i`` predicts action token ``i`` directly.
    """
    p, c, a0 = layout.prefix_len, layout.cot_len, layout.action_start
    cot_pos = np.arange(p, p + max(c - 1, 0))
    act_pos = np.arange(a0, layout.total)
    return np.concatenate([cot_pos, act_pos]), np.concatenate([cot_pos + 1, act_pos])


def model_inputs(seq, layout):
    """Replace realised action tokens with query slots."""
    seq = list(seq)
    seq[layout.action_start:layout.total] = [ACT_QUERY] * layout.action_len
    return seq


def score_sequences(snapshot, seqs, layouts):
    """Per-token log-probabilities at generated positions, differentiably.

    Returns ``(token_logprobs [N], logprob_rows [N, V], counts)`` where rows are
    concatenated sequence by sequence and ``counts[b]`` is the number of scored
    tokens in sequence ``b``.
    """
    inputs = [model_inputs(s, l) for s, l in zip(seqs, layouts)]
    tok, masks, slots = batch_inputs(inputs, layouts, snapshot.config)
    logits = forward_batch(snapshot, tok, masks, slots)
    B, Tn, V = logits.shape
    flat, targets, counts = [], [], []
    for b, (seq, lay) in enumerate(zip(seqs, layouts)):
        pos, tgt = scored_positions(lay)
        flat.append(b * Tn + pos)
        targets.append(np.asarray(seq, dtype=np.int64)[tgt])
        counts.append(len(pos))
    flat = np.concatenate(flat)
    rows = T.log_softmax(T.take_rows(logits.reshape(B * Tn, V), flat))
    return T.pick(rows, np.concatenate(targets)), rows, counts


def sequence_logprobs(tokens, layout, snapshot):
    """Log-probability of each realised CoT and action token (prefix excluded)."""
    if len(tokens) != layout.total:
        raise LayoutError(f"token count {len(tokens)} != layout total {layout.total}")
    with no_grad():
        lp, _, _ = score_sequences(snapshot, [list(tokens)], [layout])
    return lp.data.copy()


def encode_prefix(vocab, obs_tokens, instr_tokens):
    return [BOS] + vocab.encode(obs_tokens) + vocab.encode(instr_tokens)


def load_snapshot(path, role="current"):
    return PolicySnapshot.load(Path(path), role)
