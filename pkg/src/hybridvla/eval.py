"""Suite evaluation, CoT interventions, decode latency and the ablation table."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import config_hash
from .env import default_suite, observe, reset
from .model import (
    FORWARD_PASSES,
    PolicySnapshot,
    decode_actions_ar,
    decode_actions_parallel,
    encode_prefix,
    generate_cot_batch,
)
from .rollout import COT_MODES, DECODE_MODES, ExpertPolicy, ModelPolicy, intervene_cot, run_episodes

__all__ = [
    "EvalConfig",
    "EvalReport",
    "evaluate",
    "intervene_cot",
    "measure_latency",
    "median_cot_length",
    "run_ablation_suite",
]


@dataclass
class EvalConfig:
    n_conditions: int = 20
    seed: int = 0
    cot_mode: str = "full"
    decode_mode: str = "hybrid"
    random_cot_len: int | None = None
    suite: object = None

    def __post_init__(self):
        if self.n_conditions < 1:
            raise ValueError("n_conditions must be >= 1")
        if self.cot_mode not in COT_MODES:
            raise ValueError(f"cot_mode must be one of {COT_MODES}")
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
        if self.suite is None:
            self.suite = default_suite()

    def to_dict(self):
        return {
            "n_conditions": self.n_conditions,
            "seed": self.seed,
            "cot_mode": self.cot_mode,
            "decode_mode": self.decode_mode,
            "random_cot_len": self.random_cot_len,
            "suite": self.suite.to_dict(),
        }


@dataclass
class EvalReport:
    per_task: dict
    suite_sr: float
    forward_passes: int
    n_conditions: int
    cot_mode: str
    decode_mode: str
    config_hash: str
    random_cot_len: int | None = None
    format_rate: float = 1.0
    wall_clock_per_episode: float = 0.0
    traces: list = field(default_factory=list)

    def to_dict(self, timing=False):
        out = {
            "per_task": self.per_task,
            "suite_sr": self.suite_sr,
            "forward_passes": self.forward_passes,
            "n_conditions": self.n_conditions,
            "cot_mode": self.cot_mode,
            "decode_mode": self.decode_mode,
            "config_hash": self.config_hash,
            "random_cot_len": self.random_cot_len,
            "format_rate": self.format_rate,
        }
        if timing:
            out["wall_clock_per_episode"] = self.wall_clock_per_episode
        return out

    def to_json(self):
        # wall-clock is excluded so reruns are byte-identical
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def eval_seed(seed, task_index, condition):
    return int(np.random.SeedSequence([int(seed), 7, int(task_index), int(condition)]).generate_state(1)[0])


def _conditions(suite, n, seed):
    tasks, seeds = [], []
    for ti, task in enumerate(suite.tasks):
        for c in range(n):
            tasks.append(task)
            seeds.append(eval_seed(seed, ti, c))
    return tasks, seeds


def median_cot_length(snapshot, suite=None, seed=0, n_conditions=2):
    """Median interior length of greedy CoTs on initial states of the suite."""
    suite = suite or default_suite()
    tasks, seeds = _conditions(suite, n_conditions, seed)
    prefixes = [encode_prefix(snapshot.vocab, observe(reset(t, s)[0]), t.instruction) for t, s in zip(tasks, seeds)]
    results = generate_cot_batch(snapshot, prefixes)
    return int(np.median([len(r.tokens) - 2 for r in results]))


def evaluate(policy, cfg):
    """Greedy success rate per task over ``cfg.n_conditions`` seeded initial states.

    ``policy`` is a :class:`PolicySnapshot` or any object with an ``act`` method.
    """
    suite = cfg.suite
    random_len = cfg.random_cot_len
    if isinstance(policy, PolicySnapshot):
        if cfg.cot_mode == "random" and random_len is None:
            random_len = median_cot_length(policy, suite, cfg.seed)
        policy = ModelPolicy(policy, 0.0, cfg.cot_mode, cfg.decode_mode, random_len, seed=cfg.seed)
    tasks, seeds = _conditions(suite, cfg.n_conditions, cfg.seed)
    before = FORWARD_PASSES.count
    episodes = run_episodes(policy, tasks, seeds)
    passes = FORWARD_PASSES.count - before
    per_task = {}
    for ti, task in enumerate(suite.tasks):
        eps = episodes[ti * cfg.n_conditions:(ti + 1) * cfg.n_conditions]
        per_task[task.id] = float(np.mean([e.success for e in eps]))
    traces = [
        {"task_id": e.task_id, "seed": e.seed, "success": bool(e.success),
         "cots": [[int(t) for t in s.cot] for s in e.steps]}
        for e in episodes
    ]
    hashed = cfg.to_dict() | {"random_cot_len": random_len}
    return EvalReport(
        per_task=per_task,
        suite_sr=float(np.mean(list(per_task.values()))),
        forward_passes=int(passes),
        n_conditions=cfg.n_conditions,
        cot_mode=cfg.cot_mode,
        decode_mode=cfg.decode_mode,
        config_hash=config_hash(hashed),
        random_cot_len=random_len,
        format_rate=float(np.mean([e.format_ok for e in episodes])),
        wall_clock_per_episode=float(np.mean([e.wall_clock for e in episodes])),
        traces=traces,
    )


def expert_policy(snapshot_or_vocab=None, h=5):
    vocab = getattr(snapshot_or_vocab, "vocab", snapshot_or_vocab)
    return ExpertPolicy(h, vocab)


def measure_latency(snapshot, decode_mode="hybrid", n_chunks=50, seed=0, suite=None):
    """Action-block forward passes (exact count) and mean wall-clock per chunk.

    CoTs are generated greedily once up front; only the action block is timed.
    """
    if decode_mode not in DECODE_MODES:
        raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    suite = suite or default_suite()
    per_task = -(-n_chunks // len(suite.tasks))
    tasks, seeds = _conditions(suite, per_task, seed)
    tasks, seeds = tasks[:n_chunks], seeds[:n_chunks]
    prefixes = [encode_prefix(snapshot.vocab, observe(reset(t, s)[0]), t.instruction) for t, s in zip(tasks, seeds)]
    cots = [r.tokens for r in generate_cot_batch(snapshot, prefixes)]
    decode = decode_actions_parallel if decode_mode == "hybrid" else decode_actions_ar
    counts, times = [], []
    for prefix, cot in zip(prefixes, cots):
        before = FORWARD_PASSES.count
        t0 = time.perf_counter()
        decode(prefix + cot, snapshot)
        times.append(time.perf_counter() - t0)
        counts.append(FORWARD_PASSES.count - before)
    if len(set(counts)) != 1:
        raise RuntimeError(f"pass count varied across chunks: {sorted(set(counts))}")
    return {"decode_mode": decode_mode, "passes_per_chunk": int(counts[0]), "n_chunks": len(counts),
            "wall_clock_per_chunk": float(np.mean(times))}


def _markdown(rows):
    lines = ["| row | checkpoint | cot_mode | decode_mode | sr | passes_per_chunk |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        sr = "" if r.get("sr") is None else f"{r['sr']:.3f}"
        pc = "" if r.get("passes_per_chunk") is None else str(r["passes_per_chunk"])
        lines.append(f"| {r['row']} | {r['checkpoint']} | {r['cot_mode']} | {r['decode_mode']} | {sr} | {pc} |")
    return "\n".join(lines) + "\n"


def _plots(rows, latency, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sr_rows = [r for r in rows if r["sr"] is not None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    modes = list(COT_MODES)
    x = np.arange(len(modes))
    for k, ckpt in enumerate(("sft", "rl")):
        vals = [next(r["sr"] for r in sr_rows if r["checkpoint"] == ckpt and r["cot_mode"] == m) for m in modes]
        ax.bar(x + (k - 0.5) * 0.35, vals, 0.35, label=ckpt)
    ax.set_xticks(x, modes)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "ablation_sr.png", metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 3.5))
    names = [r["decode_mode"] for r in latency]
    ax.bar(names, [r["passes_per_chunk"] for r in latency])
    ax.set_ylabel("forward passes per action chunk")
    fig.tight_layout()
    fig.savefig(out_dir / "latency.png", metadata={"Software": None})
    plt.close(fig)


def run_ablation_suite(sft, rl, cfg, out_dir=None, n_latency_chunks=50):
    """{full, mask, random} x {sft, rl} success rates plus the two latency rows.

    The random-CoT length is the median greedy CoT length of the SFT model and
    is shared by both checkpoints.
    """
    random_len = cfg.random_cot_len or median_cot_length(sft, cfg.suite, cfg.seed)
    rows = []
    for name, snap in (("sft", sft), ("rl", rl)):
        for mode in COT_MODES:
            sub = EvalConfig(cfg.n_conditions, cfg.seed, mode, "hybrid", random_len, cfg.suite)
            rep = evaluate(snap, sub)
            rows.append({"row": len(rows) + 1, "checkpoint": name, "cot_mode": mode, "decode_mode": "hybrid",
                         "sr": rep.suite_sr, "passes_per_chunk": None})
    latency = []
    timing = {}
    for mode in DECODE_MODES:
        lat = measure_latency(rl, mode, n_latency_chunks, cfg.seed, cfg.suite)
        latency.append(lat)
        timing[mode] = lat["wall_clock_per_chunk"]
        rows.append({"row": len(rows) + 1, "checkpoint": "rl", "cot_mode": "full", "decode_mode": mode,
                     "sr": None, "passes_per_chunk": lat["passes_per_chunk"]})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = {"random_cot_len": random_len, "n_conditions": cfg.n_conditions, "seed": cfg.seed, "rows": rows}
        (out_dir / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        (out_dir / "ablation.md").write_text(_markdown(rows))
        (out_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
        _plots(rows, latency, out_dir)
    return rows
