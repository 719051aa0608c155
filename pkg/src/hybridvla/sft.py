"""Supervised cold start: masked token-level cross-entropy over CoT records.

CoT positions are teacher-forced (position ``t`` predicts CoT token ``t+1``)
and action query slots predict their bin directly, all in one forward pass
under the hybrid mask.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CotRecord, load_records
from .model import (
    FORWARD_PASSES,
    ModelConfig,
    SequenceLayout,
    batch_inputs,
    encode_prefix,
    forward_batch,
    init_snapshot,
)
from .vocab import ACT_QUERY, SPECIAL_TOKENS, THINK_CLOSE, THINK_OPEN, build_vocab

logger = logging.getLogger(__name__)


class TruncationError(ValueError):
    pass


@dataclass
class SftConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 6000
    seed: int = 0
    dataset: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    cot_dropout: float = 0.25
    cot_weight: float = 1.0
    action_weight: float = 1.0
    warmup_steps: int = 100
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.cot_dropout < 1.0:
            raise ValueError("cot_dropout must be in [0, 1)")

    def to_dict(self):
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out


# Large-scale hyperparameters, kept as a documented preset.
LARGE_SCALE_PRESET = {"batch_size": 128, "learning_rate": 2.5e-5, "steps": 150_000}


@dataclass
class TrainingExample:
    tokens: list
    layout: SequenceLayout
    targets: np.ndarray
    loss_mask: np.ndarray
    is_cot: np.ndarray


def build_training_example(record, vocab, config):
    """Assemble ``prefix + CoT + query slots`` with shifted CoT and direct action targets."""
    prefix = encode_prefix(vocab, record.obs_tokens, record.instr_tokens)
    cot = vocab.encode(record.cot_tokens)
    if len(cot) > config.max_cot_len:
        raise TruncationError(f"CoT of length {len(cot)} exceeds max_cot_len {config.max_cot_len}")
    n = config.action_len
    if len(record.action_tokens) != n:
        raise TruncationError(f"expected {n} action tokens, got {len(record.action_tokens)}")
    layout = SequenceLayout(len(prefix), len(cot), n)
    if layout.total > config.max_len:
        raise TruncationError(f"sequence of length {layout.total} exceeds max_len {config.max_len}")
    tokens = prefix + cot + [ACT_QUERY] * n
    targets = np.zeros(layout.total, dtype=np.int64)
    loss_mask = np.zeros(layout.total, dtype=bool)
    is_cot = np.zeros(layout.total, dtype=bool)
    p, c = layout.prefix_len, layout.cot_len
    cot_pos = np.arange(p, p + c - 1)
    targets[cot_pos] = np.asarray(cot[1:], dtype=np.int64)
    loss_mask[cot_pos] = True
    is_cot[cot_pos] = True
    act = np.arange(layout.action_start, layout.total)
    targets[act] = vocab.action_ids(record.action_tokens)
    loss_mask[act] = True
    return TrainingExample(tokens, layout, targets, loss_mask, is_cot)


def mask_cot(record):
    return CotRecord(record.task_id, record.frame_idx, record.obs_tokens, record.instr_tokens,
                     [SPECIAL_TOKENS[THINK_OPEN], SPECIAL_TOKENS[THINK_CLOSE]], record.action_tokens, record.source)


def collate(examples, config):
    tokens, masks, slots = batch_inputs([e.tokens for e in examples], [e.layout for e in examples], config)
    B, Tn = tokens.shape
    targets = np.zeros((B, Tn), dtype=np.int64)
    loss_mask = np.zeros((B, Tn), dtype=bool)
    is_cot = np.zeros((B, Tn), dtype=bool)
    for b, e in enumerate(examples):
        n = e.layout.total
        targets[b, :n] = e.targets
        loss_mask[b, :n] = e.loss_mask
        is_cot[b, :n] = e.is_cot
    return tokens, masks, slots, targets, loss_mask, is_cot


def sft_loss(snapshot, examples, cot_weight=1.0, action_weight=1.0):
    """Returns ``(loss tensor, stats)``; one decoder pass supervises both token kinds."""
    tokens, masks, slots, targets, loss_mask, is_cot = collate(examples, snapshot.config)
    logits = forward_batch(snapshot, tokens, masks, slots)
    weights = np.where(is_cot, cot_weight, action_weight)
    loss = T.cross_entropy(logits, targets, loss_mask, weights)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    cot_sel = loss_mask & is_cot
    act_sel = loss_mask & ~is_cot
    stats = {
        "cot_sum": float(nll[cot_sel].sum()),
        "action_sum": float(nll[act_sel].sum()),
        "n_cot": int(cot_sel.sum()),
        "n_action": int(act_sel.sum()),
    }
    stats["cot_loss"] = stats["cot_sum"] / max(stats["n_cot"], 1)
    stats["action_loss"] = stats["action_sum"] / max(stats["n_action"], 1)
    return loss, stats


def sft_step(examples, snapshot, optimizer, config, lr=None, diagnostics_dir=None):
    """One optimiser step on the mean masked cross-entropy of ``examples``."""
    if not examples:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    loss, stats = sft_loss(snapshot, examples, config.cot_weight, config.action_weight)
    value = loss.item()
    if not np.isfinite(value):
        T.reset_tape()
        if diagnostics_dir is not None:
            Path(diagnostics_dir, "diagnostics.json").write_text(
                json.dumps({"loss": repr(value), "stats": stats, "tokens": [e.tokens for e in examples]})
            )
        raise FloatingPointError(f"non-finite SFT loss {value}")
    T.backward(loss)
    optimizer.step(lr)
    stats["loss"] = value
    return value, stats


def _lr_at(config, step):
    if config.warmup_steps and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    return config.learning_rate


def prepare_examples(records, vocab, model_config):
    examples, masked = [], []
    for i, rec in enumerate(records):
        try:
            examples.append(build_training_example(rec, vocab, model_config))
            masked.append(build_training_example(mask_cot(rec), vocab, model_config))
        except TruncationError as exc:
            logger.warning("record %d skipped: %s", i, exc)
    return examples, masked


def fit_snapshot(records, vocab, config, out_dir=None, snapshot=None):
    """Core SFT loop; returns ``(snapshot, metrics rows)``."""
    snapshot = snapshot or init_snapshot(config.model, vocab, config.seed)
    examples, masked = prepare_examples(records, vocab, config.model)
    if not examples:
        raise ValueError("no usable training records")
    optimizer = T.Adam(snapshot.params, lr=config.learning_rate, grad_clip=config.grad_clip)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(examples))
    cursor = 0
    metrics = []
    window = []
    out_dir = Path(out_dir) if out_dir else None
    metrics_fh = open(out_dir / "metrics.jsonl", "w") if out_dir else None
    try:
        for step in range(config.steps):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(examples))
                cursor = 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            drop = rng.random(len(idx)) < config.cot_dropout
            batch = [masked[i] if dk else examples[i] for i, dk in zip(idx, drop)]
            _, stats = sft_step(batch, snapshot, optimizer, config, _lr_at(config, step), out_dir)
            window.append(stats)
            if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
                n_cot = sum(s["n_cot"] for s in window)
                n_act = sum(s["n_action"] for s in window)
                row = {
                    "step": step + 1,
                    "loss": float(np.mean([s["loss"] for s in window])),
                    "cot_loss": sum(s["cot_sum"] for s in window) / max(n_cot, 1),
                    "action_loss": sum(s["action_sum"] for s in window) / max(n_act, 1),
                }
                window = []
                metrics.append(row)
                logger.info("sft step %d loss %.4f", row["step"], row["loss"])
                if metrics_fh:
                    metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                snapshot.save(out_dir / f"checkpoint-{step + 1}.ckpt")
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir:
        snapshot.save(out_dir / "final.ckpt")
    return snapshot, metrics


def train_sft(config, out_dir, suite=None):
    """Load the dataset named in ``config``, train, and write checkpoints + metrics."""
    from .env import default_suite

    records = load_records(config.dataset)
    manifest_path = Path(config.dataset).with_name("manifest.json")
    if suite is None and manifest_path.exists():
        from .env import suite_from_dict

        suite = suite_from_dict(json.loads(manifest_path.read_text())["suite"])
    vocab = build_vocab(suite or default_suite(), config.model.n_bins)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    FORWARD_PASSES.reset()
    return fit_snapshot(records, vocab, config, out_dir)
