"""Deterministic grid-world tabletop: move an object into a target zone.

Observations are symbolic token lists. Actions are ``h x 3`` chunks whose
columns are ``dx``, ``dy`` and ``grip`` in [-1, 1] with a +-1/3 dead zone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .vocab import cell_token

DEAD_ZONE = 1.0 / 3.0
MAX_PLACEMENT_ATTEMPTS = 100


class PlacementError(RuntimeError):
    pass


class ExpertFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    id: str
    obj: str
    zone_name: str
    zone: tuple  # ((x0, y0), (x1, y1)) inclusive
    grid: tuple
    instruction: tuple
    max_steps: int = 50
    n_distractors: int = 0
    distractor_pool: tuple = ()


@dataclass(frozen=True)
class Suite:
    name: str
    grid: tuple
    objects: tuple
    zones: dict
    tasks: tuple
    max_steps: int
    n_distractors: int = 0
    instruction_template: str = "move {object} to {zone} zone"

    def to_dict(self):
        return {
            "name": self.name,
            "grid": list(self.grid),
            "objects": list(self.objects),
            "zones": {k: [list(v[0]), list(v[1])] for k, v in self.zones.items()},
            "instruction_template": self.instruction_template,
            "max_steps": self.max_steps,
            "n_distractors": self.n_distractors,
            "tasks": [{"object": t.obj, "zone": t.zone_name} for t in self.tasks],
        }

    def task(self, task_id):
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)


def suite_from_dict(spec):
    grid = tuple(spec.get("grid", (7, 7)))
    objects = tuple(spec["objects"])
    zones = {k: (tuple(v[0]), tuple(v[1])) for k, v in spec["zones"].items()}
    template = spec.get("instruction_template", "move {object} to {zone} zone")
    max_steps = int(spec.get("max_steps", 50))
    n_distractors = int(spec.get("n_distractors", 0))
    pairs = spec.get("tasks") or [{"object": o, "zone": z} for z in zones for o in objects]
    tasks = []
    for pair in pairs:
        obj, zone_name = pair["object"], pair["zone"]
        if obj not in objects or zone_name not in zones:
            raise ValueError(f"task references unknown object/zone: {pair}")
        tasks.append(
            TaskSpec(
                id=f"{obj}-to-{zone_name}",
                obj=obj,
                zone_name=zone_name,
                zone=zones[zone_name],
                grid=grid,
                instruction=tuple(template.format(object=obj, zone=zone_name).split()),
                max_steps=max_steps,
                n_distractors=n_distractors,
                distractor_pool=tuple(o for o in objects if o != obj),
            )
        )
    return Suite(spec.get("name", "custom"), grid, objects, zones, tuple(tasks), max_steps, n_distractors, template)


def default_suite(distractors=False):
    """Ten tasks: five objects times two zones on a 7x7 table."""
    return suite_from_dict(
        {
            "name": "default-distractor" if distractors else "default",
            "grid": [7, 7],
            "objects": ["block", "ball", "cup", "bowl", "plate"],
            "zones": {"left": [[0, 2], [1, 4]], "right": [[5, 2], [6, 4]]},
            "max_steps": 50,
            "n_distractors": 2 if distractors else 0,
        }
    )


def load_suite(path):
    return suite_from_dict(yaml.safe_load(Path(path).read_text()))


def dump_suite(suite, path):
    Path(path).write_text(json.dumps(suite.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class WorldState:
    grid: tuple
    objects: tuple  # ((name, (x, y)), ...)
    target: int
    zone: tuple
    gripper: tuple
    open: bool = True
    held: Optional[int] = None
    step_count: int = 0
    max_steps: int = 50

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class StepResult:
    state: WorldState
    observation: list
    done: bool
    success: bool
    trace: list = field(default_factory=list)


def in_zone(cell, zone):
    (x0, y0), (x1, y1) = zone
    return x0 <= cell[0] <= x1 and y0 <= cell[1] <= y1


def zone_cells(zone):
    (x0, y0), (x1, y1) = zone
    return [(x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


def is_success(state):
    cell = state.objects[state.target][1]
    return state.held != state.target and in_zone(cell, state.zone)


def observation_length(n_objects):
    return 2 * n_objects + 6


def observe(state):
    toks = []
    for name, cell in state.objects:
        toks += [name, cell_token(*cell)]
    grip = "holding" if state.held is not None else ("open" if state.open else "closed")
    toks += ["gripper", cell_token(*state.gripper), grip]
    toks += ["zone", cell_token(*state.zone[0]), cell_token(*state.zone[1])]
    return toks


def reset(task, seed):
    """Seeded placement of the task object, distractors and the gripper."""
    width, height = task.grid
    cells = [(x, y) for y in range(height) for x in range(width)]
    outside = [c for c in cells if not in_zone(c, task.zone)]
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        rng = np.random.default_rng([int(seed), attempt])
        n_obj = 1 + task.n_distractors
        if n_obj > len(outside) or task.n_distractors > len(task.distractor_pool):
            continue
        picks = rng.choice(len(outside), size=n_obj, replace=False)
        placed = [outside[i] for i in picks]
        names = [task.obj]
        if task.n_distractors:
            names += [task.distractor_pool[i] for i in rng.choice(len(task.distractor_pool), task.n_distractors, replace=False)]
        order = rng.permutation(n_obj)
        objects = tuple((names[i], placed[i]) for i in order)
        target = int(np.flatnonzero(order == 0)[0])
        gripper = cells[int(rng.integers(len(cells)))]
        state = WorldState(task.grid, objects, target, task.zone, gripper, True, None, 0, task.max_steps)
        if not any(in_zone(c, task.zone) for _, c in objects) and _free_zone_cells(state):
            return state, observe(state)
    raise PlacementError(f"could not place task {task.id} after {MAX_PLACEMENT_ATTEMPTS} attempts")


def _axis(v):
    if v > DEAD_ZONE:
        return 1
    if v < -DEAD_ZONE:
        return -1
    return 0


def _occupant(state, cell, skip=None):
    for i, (_, c) in enumerate(state.objects):
        if i != skip and i != state.held and c == cell:
            return i
    return None


def primitive_step(state, row):
    """Apply one ``(dx, dy, grip)`` row: move first, then actuate the gripper."""
    dx, dy, grip = _axis(row[0]), _axis(row[1]), _axis(row[2])
    width, height = state.grid
    x, y = state.gripper
    if 0 <= x + dx < width:
        x += dx
    if 0 <= y + dy < height:
        y += dy
    objects = list(state.objects)
    if state.held is not None:
        objects[state.held] = (objects[state.held][0], (x, y))
    state = state.replace(gripper=(x, y), objects=tuple(objects), step_count=state.step_count + 1)
    if grip > 0 and state.open:
        state = state.replace(open=False, held=_occupant(state, state.gripper))
    elif grip < 0 and not state.open:
        if state.held is None or _occupant(state, state.gripper, skip=state.held) is None:
            state = state.replace(open=True, held=None)
    return state


def step_chunk(state, chunk, record=False):
    """Execute an ``h x 3`` chunk, stopping early on success or the step limit."""
    values = np.asarray(getattr(chunk, "values", chunk), dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != 3:
        raise ValueError(f"chunk must be h x 3, got {values.shape}")
    trace = []
    success = is_success(state)
    done = success or state.step_count >= state.max_steps
    for row in values:
        if done:
            break
        if record:
            trace.append((state, row.copy()))
        state = primitive_step(state, row)
        success = is_success(state)
        done = success or state.step_count >= state.max_steps
    return StepResult(state, observe(state), done, success, trace)


# ---------------------------------------------------------------- scripted expert


def _free_zone_cells(state):
    return [c for c in zone_cells(state.zone) if _occupant(state, c, skip=state.target) is None]


def _manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def nearest_free_zone_cell(state):
    free = _free_zone_cells(state)
    if not free:
        raise ExpertFailure("no free cell in target zone")
    return min(free, key=lambda c: (_manhattan(c, state.gripper), c[1], c[0]))


def expert_goal(state):
    """Cell the expert is currently heading to."""
    if state.held == state.target:
        return nearest_free_zone_cell(state)
    if is_success(state):
        return state.gripper
    return state.objects[state.target][1]


def expert_chunk(state, h=5):
    """Next chunk of the greedy plan: x moves, y moves, then one gripper action.

    The plan stops after a gripper action; remaining rows are no-ops.
    """
    rows = []
    if is_success(state):
        return np.zeros((h, 3))
    holding = state.held == state.target
    pos = state.gripper
    if not holding and not state.open:
        rows.append((0.0, 0.0, -1.0))
    else:
        goal = expert_goal(state)
        while len(rows) < h and pos != goal:
            if pos[0] != goal[0]:
                step = (float(np.sign(goal[0] - pos[0])), 0.0, 0.0)
                pos = (pos[0] + int(step[0]), pos[1])
            else:
                step = (0.0, float(np.sign(goal[1] - pos[1])), 0.0)
                pos = (pos[0], pos[1] + int(step[1]))
            rows.append(step)
        if len(rows) < h and pos == goal:
            rows.append((0.0, 0.0, -1.0 if holding else 1.0))
    rows += [(0.0, 0.0, 0.0)] * (h - len(rows))
    return np.asarray(rows[:h], dtype=np.float64)


def scripted_expert(task, state, h=5):
    """Yield expert chunks from ``state`` until the task succeeds."""
    while not is_success(state):
        if state.step_count >= task.max_steps:
            raise ExpertFailure(f"expert exceeded {task.max_steps} steps on {task.id}")
        chunk = expert_chunk(state, h)
        yield chunk
        state = step_chunk(state, chunk).state


@dataclass
class DemoFrame:
    state: WorldState
    observation: list
    gripper_open: bool
    chunk: np.ndarray  # expert chunk planned from this frame
    action: Optional[np.ndarray]  # primitive row executed from this frame (None at the end)


@dataclass
class DemoTrajectory:
    task: TaskSpec
    seed: int
    frames: list
    success: bool


def record_expert_demo(task, seed, h=5):
    """Run the expert and keep one frame per primitive step plus the final state."""
    state, _ = reset(task, seed)
    frames = []
    for chunk in scripted_expert(task, state, h):
        result = step_chunk(state, chunk, record=True)
        for s, row in result.trace:
            frames.append(DemoFrame(s, observe(s), s.open, expert_chunk(s, h), row))
        state = result.state
    frames.append(DemoFrame(state, observe(state), state.open, expert_chunk(state, h), None))
    return DemoTrajectory(task, seed, frames, is_success(state))


def trajectory_dump_records(demo, demo_index):
    """One JSON-ready record per frame: state encoding, executed action, gripper flag."""
    return [
        {
            "demo": demo_index,
            "task_id": demo.task.id,
            "step": i,
            "state": f.observation,
            "action": None if f.action is None else [float(v) for v in f.action],
            "gripper_open": bool(f.gripper_open),
        }
        for i, f in enumerate(demo.frames)
    ]


def render(state):
    """ASCII debug view: G gripper, first letter of each object, z zone."""
    width, height = state.grid
    rows = []
    for y in range(height - 1, -1, -1):
        line = []
        for x in range(width):
            ch = "z" if in_zone((x, y), state.zone) else "."
            for name, c in state.objects:
                if c == (x, y):
                    ch = name[0].upper() if (x, y) != state.gripper else "*"
            if (x, y) == state.gripper and ch not in "*":
                ch = "G"
            line.append(ch)
        rows.append("".join(line))
    return "\n".join(rows)
