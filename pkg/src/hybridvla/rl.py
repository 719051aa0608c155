"""Grouped policy optimisation on top of an SFT checkpoint.

Each task prompt gets ``G`` sampled episodes. Their sparse rewards are
standardised within the group, and that one advantage value is shared by every
CoT and action token of the episode. The update maximises a token-level
clipped surrogate (asymmetric clip range) minus an exact KL penalty to the
frozen SFT reference.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import FORWARD_PASSES, PolicySnapshot, SequenceLayout, score_sequences
from .rollout import ModelPolicy, run_episodes
from .tensor import no_grad

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class RewardConfig:
    alpha_s: float = 1.0
    alpha_f: float = 0.1

    def __post_init__(self):
        if not self.alpha_s > 0 or self.alpha_f < 0:
            raise ValueError("need alpha_s > 0 and alpha_f >= 0")


@dataclass
class GrpoConfig:
    G: int = 8
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.01
    temperature: float = 1.0
    minibatch_size: int = 40  # trajectories per gradient step
    epochs: int = 2
    iterations: int = 20
    learning_rate: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval_conditions: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        if not 0 < self.eps_low <= self.eps_high < 1:
            raise ValueError("need 0 < eps_low <= eps_high < 1")
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Trajectory:
    task_id: str
    seed: int
    steps: list
    success: bool
    format_ok: bool
    reward: float = 0.0

    @property
    def n_tokens(self):
        return int(sum(len(s.logprobs) for s in self.steps))


@dataclass
class RolloutGroup:
    task_id: str
    trajectories: list
    advantages: np.ndarray = None


def compute_reward(traj, cfg):
    return cfg.alpha_s * float(traj.success) + cfg.alpha_f * float(traj.format_ok)


def compute_group_advantage(rewards):
    """``(r - mean) / std`` with the population std; all zeros when std < 1e-6."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group needs at least two rewards")
    std = r.std()
    if std < STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def rollout_seed(seed, task_index, member):
    return int(np.random.SeedSequence([int(seed), int(task_index), int(member)]).generate_state(1)[0])


def _to_trajectory(ep, reward_cfg):
    traj = Trajectory(ep.task_id, ep.seed, ep.steps, ep.success, ep.format_ok)
    traj.reward = compute_reward(traj, reward_cfg)
    return traj


def collect_groups(behavior, tasks, G, seed, temperature=1.0, reward_cfg=None):
    """Sample ``G`` episodes per task with the behavior snapshot; rewards filled, advantages not."""
    reward_cfg = reward_cfg or RewardConfig()
    run_tasks, seeds = [], []
    for ti, task in enumerate(tasks):
        for g in range(G):
            run_tasks.append(task)
            seeds.append(rollout_seed(seed, ti, g))
    policy = ModelPolicy(behavior, temperature=temperature, seed=rollout_seed(seed, len(tasks), G))
    episodes = run_episodes(policy, run_tasks, seeds)
    groups = []
    for ti, task in enumerate(tasks):
        trajs = [_to_trajectory(ep, reward_cfg) for ep in episodes[ti * G:(ti + 1) * G]]
        groups.append(RolloutGroup(task.id, trajs))
    return groups


def collect_rollouts(behavior, task, G, seed, temperature=1.0, reward_cfg=None):
    if G < 2:
        raise ValueError("group size G must be >= 2")
    return collect_groups(behavior, [task], G, seed, temperature, reward_cfg)[0]


def clipped_surrogate(ratio, advantage, eps_low, eps_high):
    """Per-token ``min(w*A, clip(w, 1-eps_low, 1+eps_high)*A)``."""
    ratio = T.as_tensor(ratio)
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite importance ratio")
    if np.any(ratio.data <= 0):
        raise ValueError("importance ratios must be positive")
    adv = np.asarray(advantage, dtype=np.float64)
    unclipped = ratio * adv
    clipped = T.clamp(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv
    return T.minimum(unclipped, clipped)


def _kl_rows(cur_rows, ref_rows):
    return T.tsum(T.exp(cur_rows) * (cur_rows - ref_rows), axis=-1)


def _flatten_steps(trajs):
    seqs, layouts, old, owner = [], [], [], []
    for i, traj in enumerate(trajs):
        for st in traj.steps:
            seqs.append(list(st.prefix) + list(st.cot) + list(st.actions))
            layouts.append(SequenceLayout(len(st.prefix), len(st.cot), len(st.actions)))
            old.append(st.logprobs)
            owner.append(np.full(len(st.logprobs), i))
    return seqs, layouts, np.concatenate(old), np.concatenate(owner)


def kl_penalty(current, reference, seqs, layouts):
    """Mean exact KL(current || reference) over the vocabulary at generated positions."""
    _, rows, _ = score_sequences(current, seqs, layouts)
    with no_grad():
        _, ref_rows, _ = score_sequences(reference, seqs, layouts)
    return T.mean(_kl_rows(rows, ref_rows.data))


def grpo_objective(trajs, advantages, current, reference, cfg, behavior=None):
    """Differentiable objective for a minibatch of trajectories plus per-token details.

    Behavior log-probabilities come from ``behavior`` when given (recomputed on
    the same batch), otherwise from the values stored at rollout time.
    """
    seqs, layouts, stored_old, owner = _flatten_steps(trajs)
    lp, rows, _ = score_sequences(current, seqs, layouts)
    with no_grad():
        if behavior is not None:
            old = score_sequences(behavior, seqs, layouts)[0].data
        else:
            old = stored_old
        ref_rows = score_sequences(reference, seqs, layouts)[1].data
    adv_tok = np.asarray(advantages, dtype=np.float64)[owner]
    ratio = T.exp(lp - old)
    surr = clipped_surrogate(ratio, adv_tok, cfg.eps_low, cfg.eps_high)
    n_per_traj = np.bincount(owner, minlength=len(trajs)).astype(np.float64)
    weights = 1.0 / (n_per_traj[owner] * len(trajs))
    surrogate = T.tsum(surr * weights)
    kl_tok = _kl_rows(rows, ref_rows)
    kl = T.mean(kl_tok)
    objective = surrogate - kl * cfg.beta
    r = ratio.data
    clipped = ((adv_tok > 0) & (r > 1 + cfg.eps_high)) | ((adv_tok < 0) & (r < 1 - cfg.eps_low))
    details = {
        "ratio": r.copy(),
        "advantage": adv_tok,
        "weights": weights,
        "kl_tokens": kl_tok.data.copy(),
        "owner": owner,
        "surrogate": float(surrogate.data),
        "kl": float(kl.data),
        "objective": float(objective.data),
        "clip_frac": float(clipped.mean()) if clipped.size else 0.0,
    }
    return objective, details


def recompute_objective(ratio, advantage, weights, kl_tokens, eps_low, eps_high, beta):
    """Scalar re-evaluation of the objective from stored per-token quantities."""
    total = 0.0
    for w, a, wt in zip(ratio, advantage, weights):
        c = min(max(w, 1.0 - eps_low), 1.0 + eps_high)
        total += wt * min(w * a, c * a)
    return total - beta * (sum(kl_tokens) / len(kl_tokens))


def grpo_step(trajs, advantages, current, reference, cfg, optimizer, behavior=None):
    """One ascent step on the clipped, KL-regularised objective; returns stats."""
    if not trajs:
        raise ValueError("empty minibatch")
    optimizer.zero_grad()
    objective, details = grpo_objective(trajs, advantages, current, reference, cfg, behavior)
    loss = objective * -1.0
    T.backward(loss)
    try:
        optimizer.step()
    except FloatingPointError as exc:
        raise FloatingPointError(f"non-finite gradient in GRPO step: {details['objective']}") from exc
    details["mean_reward"] = float(np.mean([t.reward for t in trajs]))
    details["adv_spread"] = float(np.max(advantages) - np.min(advantages))
    return details


def train_rl(config, init_checkpoint, out_dir, suite, init_snapshot=None):
    """Refresh behavior, collect groups for every task, several minibatch steps, log; repeat."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    current = init_snapshot.copy("current") if init_snapshot is not None else PolicySnapshot.load(init_checkpoint)
    reference = current.copy("reference")
    ref_print = reference.fingerprint()
    optimizer = T.Adam(current.params, lr=config.learning_rate, grad_clip=config.grad_clip)
    rng = np.random.default_rng([config.seed, 99])
    metrics = []
    FORWARD_PASSES.reset()
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for it in range(config.iterations):
            behavior = current.copy("behavior")
            groups = collect_groups(behavior, suite.tasks, config.G, rollout_seed(config.seed, it, 0),
                                    config.temperature, config.reward)
            trajs, advs = [], []
            for g in groups:
                g.advantages = compute_group_advantage([t.reward for t in g.trajectories])
                trajs += g.trajectories
                advs += list(g.advantages)
            advs = np.asarray(advs)
            kls, clips = [], []
            for _ in range(config.epochs):
                perm = rng.permutation(len(trajs))
                for start in range(0, len(perm), config.minibatch_size):
                    idx = perm[start:start + config.minibatch_size]
                    st = grpo_step([trajs[i] for i in idx], advs[idx], current, reference, config,
                                   optimizer, behavior)
                    kls.append(st["kl"])
                    clips.append(st["clip_frac"])
            row = {
                "iteration": it + 1,
                "mean_reward": float(np.mean([t.reward for t in trajs])),
                "sr": float(np.mean([t.success for t in trajs])),
                "kl": float(np.mean(kls)),
                "clip_frac": float(np.mean(clips)),
                "format_rate": float(np.mean([t.format_ok for t in trajs])),
            }
            metrics.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            logger.info("rl iter %d reward %.3f sr %.3f kl %.5f", row["iteration"], row["mean_reward"], row["sr"], row["kl"])
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                current.save(out_dir / f"checkpoint-{it + 1}.ckpt")
    if reference.fingerprint() != ref_print:
        raise RuntimeError("reference snapshot was mutated during RL")
    current.save(out_dir / "final.ckpt")
    return current, metrics
