"""Small input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .data import CotRecord
from .env import DemoTrajectory, TaskSpec, WorldState


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name, *, allow_one=False):
    ok = 0.0 <= value <= 1.0 if allow_one else 0.0 <= value < 1.0
    if not ok:
        raise ValueError(f"{name} out of range: {value!r}")
    return float(value)


def check_records(X):
    """A non-empty list of :class:`CotRecord`; dicts are converted."""
    if X is None or len(X) == 0:
        raise ValueError("expected a non-empty sequence of records")
    out = []
    for i, r in enumerate(X):
        if isinstance(r, dict):
            r = CotRecord.from_dict(r)
        if not isinstance(r, CotRecord):
            raise TypeError(f"item {i} is {type(r).__name__}, expected CotRecord")
        out.append(r)
    return out


def check_demos(X):
    if X is None or len(X) == 0:
        raise ValueError("expected a non-empty sequence of demos")
    for i, d in enumerate(X):
        if not isinstance(d, DemoTrajectory):
            raise TypeError(f"item {i} is {type(d).__name__}, expected DemoTrajectory")
    return list(X)


def check_state_task_pairs(X):
    """Pairs of ``(WorldState, TaskSpec)``."""
    if X is None or len(X) == 0:
        raise ValueError("expected a non-empty sequence of (state, task) pairs")
    states, tasks = [], []
    for i, pair in enumerate(X):
        try:
            s, t = pair
        except (TypeError, ValueError):
            raise TypeError(f"item {i} is not a (state, task) pair") from None
        if not isinstance(s, WorldState) or not isinstance(t, TaskSpec):
            raise TypeError(f"item {i} must be (WorldState, TaskSpec)")
        states.append(s)
        tasks.append(t)
    return states, tasks


def check_chunk(values, h, d):
    a = np.asarray(values, dtype=np.float64)
    if a.shape != (h, d):
        raise ValueError(f"chunk shape {a.shape} != ({h}, {d})")
    if not np.all(np.isfinite(a)):
        raise ValueError("chunk has non-finite values")
    return a
