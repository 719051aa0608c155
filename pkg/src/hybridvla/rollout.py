"""Lock-step episode runner shared by evaluation and RL rollout collection."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import validate_schema
from .env import expert_chunk, is_success, observe, reset, step_chunk
from .model import (
    THINK_CLOSE,
    THINK_OPEN,
    decode_actions_ar,
    decode_actions_batch,
    encode_prefix,
    generate_cot_batch,
    tokens_to_chunk,
)
from .vocab import tokenize_actions

COT_MODES = ("full", "mask", "random")
DECODE_MODES = ("hybrid", "ar_emulation")


@dataclass
class StepRecord:
    prefix: list
    cot: list
    actions: list
    logprobs: np.ndarray  # CoT tokens after THINK_OPEN, then action tokens
    format_ok: bool
    truncated: bool = False


@dataclass
class Episode:
    task_id: str
    seed: int
    steps: list = field(default_factory=list)
    success: bool = False
    n_primitive: int = 0
    wall_clock: float = 0.0

    @property
    def format_ok(self):
        return all(s.format_ok for s in self.steps)


def intervene_cot(cot, mode, rng=None, length=None, vocab=None):
    """Replace a generated CoT: ``mask`` empties it, ``random`` fills it with noise words."""
    if mode == "mask":
        return [THINK_OPEN, THINK_CLOSE]
    if mode == "random":
        if rng is None or vocab is None or length is None:
            raise ValueError("random intervention needs rng, vocab and length")
        words = vocab.text_ids
        return [THINK_OPEN] + [int(w) for w in rng.choice(words, size=int(length))] + [THINK_CLOSE]
    raise ValueError(f"unknown intervention mode {mode!r}")


class ModelPolicy:
    """Decodes ``CoT -> action chunk`` per state with a fixed snapshot."""

    def __init__(self, snapshot, temperature=0.0, cot_mode="full", decode_mode="hybrid",
                 random_cot_len=None, seed=0):
        if cot_mode not in COT_MODES:
            raise ValueError(f"cot_mode must be one of {COT_MODES}")
        if decode_mode not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
        if cot_mode == "random" and random_cot_len is None:
            raise ValueError("random CoT mode needs random_cot_len")
        self.snapshot = snapshot
        self.temperature = temperature
        self.cot_mode = cot_mode
        self.decode_mode = decode_mode
        self.random_cot_len = random_cot_len
        self.rng = np.random.default_rng(seed)
        self.cot_rng = np.random.default_rng([seed, 1])

    def act(self, states, tasks):
        snap = self.snapshot
        cfg, vocab = snap.config, snap.vocab
        prefixes = [encode_prefix(vocab, observe(s), t.instruction) for s, t in zip(states, tasks)]
        if self.cot_mode == "full":
            results = generate_cot_batch(snap, prefixes, cfg.max_cot_len, self.temperature, self.rng)
            cots = [r.tokens for r in results]
            cot_lps = [r.logprobs for r in results]
            truncated = [r.truncated for r in results]
        else:
            cots = [intervene_cot(None, self.cot_mode, self.cot_rng, self.random_cot_len, vocab) for _ in prefixes]
            cot_lps = [[np.nan] * (len(c) - 1) for c in cots]
            truncated = [False] * len(cots)
        if self.decode_mode == "hybrid":
            ids, act_lps = decode_actions_batch(snap, prefixes, cots, self.temperature, self.rng)
        else:
            ids = np.array([decode_actions_ar(p + c, snap).tokens for p, c in zip(prefixes, cots)])
            act_lps = np.full(ids.shape, np.nan)
        out = []
        for b in range(len(states)):
            chunk = tokens_to_chunk(ids[b], vocab, cfg.h, cfg.d)
            ok, _ = validate_schema(cots[b], cfg.max_cot_len)
            ok = ok and not truncated[b]
            rec = StepRecord(prefixes[b], list(cots[b]), [int(i) for i in ids[b]],
                             np.concatenate([np.asarray(cot_lps[b], dtype=np.float64), act_lps[b]]), ok, truncated[b])
            out.append((rec, chunk.values))
        return out


class ExpertPolicy:
    """The scripted expert behind the same interface (CoT left empty)."""

    def __init__(self, h=5, vocab=None):
        self.h = h
        self.vocab = vocab

    def act(self, states, tasks):
        out = []
        for s in states:
            values = expert_chunk(s, self.h)
            actions = []
            if self.vocab is not None:
                actions = self.vocab.action_ids(tokenize_actions(values, self.vocab.n_bins).reshape(-1))
            out.append((StepRecord([], [THINK_OPEN, THINK_CLOSE], actions, np.zeros(0), True), values))
        return out


def run_episodes(policy, tasks, seeds, keep_steps=True):
    """Run one episode per ``(task, seed)`` pair, batching policy calls across episodes."""
    episodes = [Episode(t.id, int(s)) for t, s in zip(tasks, seeds)]
    states = [reset(t, s)[0] for t, s in zip(tasks, seeds)]
    active = [i for i in range(len(tasks)) if not is_success(states[i])]
    for i in range(len(tasks)):
        episodes[i].success = is_success(states[i])
    clock = {i: 0.0 for i in range(len(tasks))}
    while active:
        t0 = time.perf_counter()
        decisions = policy.act([states[i] for i in active], [tasks[i] for i in active])
        share = (time.perf_counter() - t0) / len(active)
        still = []
        for i, (rec, values) in zip(active, decisions):
            clock[i] += share
            result = step_chunk(states[i], values)
            states[i] = result.state
            ep = episodes[i]
            if keep_steps:
                ep.steps.append(rec)
            else:
                ep.steps.append(StepRecord([], [], [], np.zeros(0), rec.format_ok, rec.truncated))
            ep.success = result.success
            ep.n_primitive = result.state.step_count
            if not result.done:
                still.append(i)
        active = still
    for i, ep in enumerate(episodes):
        ep.wall_clock = clock[i]
    return episodes

