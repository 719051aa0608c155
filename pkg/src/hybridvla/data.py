"""Embodied CoT dataset construction.

Stage 1 finds keyframes at gripper open/close transitions and annotates them
from ground truth; stage 2 carries each keyframe's subtask forward to the
frames that follow it, refreshing positions per frame. Records then pass a
schema check and a temporal-consistency filter before serialisation.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .env import (
    ExpertFailure,
    PlacementError,
    expert_goal,
    in_zone,
    nearest_free_zone_cell,
    record_expert_demo,
    trajectory_dump_records,
)
from .vocab import PHASES, SPECIAL_TOKENS, THINK_CLOSE, THINK_OPEN, cell_token, tokenize_actions

logger = logging.getLogger(__name__)

OPEN_TOKEN = SPECIAL_TOKENS[THINK_OPEN]
CLOSE_TOKEN = SPECIAL_TOKENS[THINK_CLOSE]
DEFAULT_MAX_COT_LEN = 24


@dataclass
class CotRecord:
    task_id: str
    frame_idx: int
    obs_tokens: list
    instr_tokens: list
    cot_tokens: list
    action_tokens: list  # bin indices
    source: str  # "keyframe" | "propagated"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def extract_keyframes(demo):
    """Index 0, every gripper-state change, and the final index."""
    flags = [f.gripper_open for f in demo.frames]
    if not flags:
        raise ValueError("empty trajectory")
    keys = {0, len(flags) - 1}
    keys.update(i for i in range(1, len(flags)) if flags[i] != flags[i - 1])
    return sorted(keys)


def ground_truth_phase(state):
    target_cell = state.objects[state.target][1]
    if state.held == state.target:
        try:
            at_goal = state.gripper == nearest_free_zone_cell(state)
        except ExpertFailure:
            at_goal = False
        return "release" if at_goal else "transport"
    if in_zone(target_cell, state.zone):
        return "finish"
    if state.gripper == target_cell and state.open:
        return "grasp"
    return "approach"


def goal_for_phase(state, phase):
    if phase in ("approach", "grasp"):
        return state.objects[state.target][1]
    if phase in ("transport", "release"):
        if state.held == state.target:
            return nearest_free_zone_cell(state)
        return expert_goal(state)
    return state.gripper


def cot_template(state, phase):
    name, cell = state.objects[state.target]
    goal = goal_for_phase(state, phase)
    return [
        OPEN_TOKEN,
        "gripper", "at", cell_token(*state.gripper), ";",
        name, "at", cell_token(*cell), ";",
        "subtask", phase, ";",
        "goal", cell_token(*goal),
        CLOSE_TOKEN,
    ]


def annotate_keyframe(demo, index):
    """Oracle annotation of one keyframe from the ground-truth world state."""
    state = demo.frames[index].state
    return cot_template(state, ground_truth_phase(state))


def propagate_annotations(demo, keyframe_cots):
    """Per-frame CoTs: keyframes keep theirs, others inherit the preceding subtask."""
    if 0 not in keyframe_cots:
        raise ValueError("frame 0 must be annotated")
    out = []
    current = None
    for i, frame in enumerate(demo.frames):
        if i in keyframe_cots:
            out.append(list(keyframe_cots[i]))
            current = cot_phase(keyframe_cots[i])
        else:
            out.append(cot_template(frame.state, current))
    return out


def cot_phase(tokens):
    """Subtask word following ``subtask`` in a CoT, or None."""
    for a, b in zip(tokens, tokens[1:]):
        if a == "subtask" and b in PHASES:
            return b
    return None


def validate_schema(tokens, max_cot_len=DEFAULT_MAX_COT_LEN):
    """Structural check of a CoT; returns ``(ok, reason)``.

    Accepts either token strings or integer ids.
    """
    toks = [SPECIAL_TOKENS[t] if isinstance(t, (int, np.integer)) and t < len(SPECIAL_TOKENS) else t for t in tokens]
    if not toks:
        return False, "empty"
    if toks[0] != OPEN_TOKEN:
        return False, "missing-open"
    n_open, n_close = toks.count(OPEN_TOKEN), toks.count(CLOSE_TOKEN)
    if n_open > 1 or n_close > 1:
        return False, "duplicate-delimiter"
    if n_close == 0:
        return False, "missing-close"
    if toks[-1] != CLOSE_TOKEN:
        return False, "misplaced-close"
    if len(toks) > max_cot_len:
        return False, "too-long"
    return True, "ok"


def check_temporal_consistency(records):
    """Drop records whose subtask phase regresses below an earlier kept frame."""
    kept, dropped = [], []
    best = -1
    for rec in records:
        phase = cot_phase(rec.cot_tokens)
        rank = PHASES.index(phase) if phase in PHASES else -1
        if rank < best:
            dropped.append({"task_id": rec.task_id, "frame_idx": rec.frame_idx, "phase": phase,
                            "after": PHASES[best]})
            continue
        best = rank
        kept.append(rec)
    return kept, {"n_in": len(records), "n_kept": len(kept), "dropped": dropped}


def demo_to_records(demo, n_bins=256, max_cot_len=DEFAULT_MAX_COT_LEN):
    """Run extract, annotate, propagate and validate on one demo.

    Returns ``(records, stats)``; schema failures are dropped and counted.
    """
    keys = extract_keyframes(demo)
    key_cots = {k: annotate_keyframe(demo, k) for k in keys}
    cots = propagate_annotations(demo, key_cots)
    records, schema_rejects = [], 0
    for i, (frame, cot) in enumerate(zip(demo.frames, cots)):
        ok, _ = validate_schema(cot, max_cot_len)
        if not ok:
            schema_rejects += 1
            continue
        records.append(
            CotRecord(
                task_id=demo.task.id,
                frame_idx=i,
                obs_tokens=list(frame.observation),
                instr_tokens=list(demo.task.instruction),
                cot_tokens=cot,
                action_tokens=[int(b) for b in tokenize_actions(frame.chunk, n_bins).reshape(-1)],
                source="keyframe" if i in key_cots else "propagated",
            )
        )
    records, report = check_temporal_consistency(records)
    return records, {"schema_rejects": schema_rejects, "temporal_drops": len(report["dropped"])}


def demo_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(suite, n_demos, seed, out_dir, h=5, n_bins=256, max_cot_len=DEFAULT_MAX_COT_LEN):
    """Expert demos to a line-delimited CotRecord file plus manifest and trajectory dump."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"keyframe": 0, "propagated": 0}
    episode_lengths, skipped = [], []
    schema_rejects = temporal_drops = 0
    with open(out_dir / "dataset.jsonl", "w") as data_fh, open(out_dir / "trajectories.jsonl", "w") as traj_fh:
        for k in range(n_demos):
            task = suite.tasks[k % len(suite.tasks)]
            try:
                demo = record_expert_demo(task, demo_seed(seed, k), h)
            except (ExpertFailure, PlacementError) as exc:
                logger.warning("demo %d (%s) skipped: %s", k, task.id, exc)
                skipped.append(k)
                continue
            if not demo.success:
                skipped.append(k)
                continue
            records, stats = demo_to_records(demo, n_bins, max_cot_len)
            schema_rejects += stats["schema_rejects"]
            temporal_drops += stats["temporal_drops"]
            episode_lengths.append(len(demo.frames))
            for rec in records:
                counts[rec.source] += 1
                data_fh.write(rec.to_json() + "\n")
            for row in trajectory_dump_records(demo, k):
                traj_fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    params = {"suite": suite.to_dict(), "n_demos": n_demos, "seed": seed, "h": h, "n_bins": n_bins,
              "max_cot_len": max_cot_len}
    manifest = {
        "config_hash": config_hash(params),
        "seed": seed,
        "n_demos": n_demos,
        "n_success_demos": len(episode_lengths),
        "skipped_demos": skipped,
        "episode_lengths": episode_lengths,
        "n_frames": sum(episode_lengths),
        "n_records": counts["keyframe"] + counts["propagated"],
        "n_keyframe_records": counts["keyframe"],
        "n_propagated_records": counts["propagated"],
        "schema_rejects": schema_rejects,
        "temporal_drops": temporal_drops,
        "h": h,
        "n_bins": n_bins,
        "max_cot_len": max_cot_len,
        "suite": suite.to_dict(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "dataset.jsonl", manifest


class DatasetError(ValueError):
    pass


def load_records(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            try:
                records.append(CotRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DatasetError(f"{path}: bad record at index {i}: {exc}") from exc
    return records
