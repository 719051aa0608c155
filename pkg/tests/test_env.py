import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridvla.env import (
    ExpertFailure,
    PlacementError,
    TaskSpec,
    WorldState,
    default_suite,
    dump_suite,
    expert_chunk,
    is_success,
    load_suite,
    observation_length,
    observe,
    record_expert_demo,
    render,
    reset,
    scripted_expert,
    step_chunk,
)

SUITE = default_suite()
TASK = SUITE.tasks[0]


def bare_state(gripper, obj_cell, zone=((5, 2), (6, 4)), open_=True, held=None):
    return WorldState((7, 7), (("block", obj_cell),), 0, zone, gripper, open_, held, 0, 50)


def check_invariants(s):
    w, hgt = s.grid
    cells = [c for _, c in s.objects] + [s.gripper]
    assert all(0 <= x < w and 0 <= y < hgt for x, y in cells)
    if s.held is not None:
        assert s.objects[s.held][1] == s.gripper
    free = [c for i, (_, c) in enumerate(s.objects) if i != s.held]
    assert len(free) == len(set(free))


def test_default_suite_shape():
    assert len(SUITE.tasks) == 10
    assert len({t.id for t in SUITE.tasks}) == 10
    assert TASK.instruction == ("move", "block", "to", "left", "zone")


def test_reset_is_deterministic():
    a, oa = reset(TASK, 7)
    b, ob = reset(TASK, 7)
    assert a == b and oa == ob


def test_seed_sweep_gives_distinct_placements():
    placements = {tuple(c for _, c in reset(TASK, s)[0].objects) + (reset(TASK, s)[0].gripper,) for s in range(100)}
    assert len(placements) >= 90


@pytest.mark.parametrize("distractors", [False, True])
def test_observation_length_formula(distractors):
    suite = default_suite(distractors)
    s, obs = reset(suite.tasks[3], 11)
    assert len(obs) == observation_length(len(s.objects))
    assert len(s.objects) == 1 + (2 if distractors else 0)


def test_unplaceable_task_raises():
    task = TaskSpec("x", "block", "all", ((0, 0), (1, 1)), (2, 2), ("x",))
    with pytest.raises(PlacementError):
        reset(task, 0)


def test_zero_chunk_only_advances_clock():
    s, _ = reset(TASK, 3)
    r = step_chunk(s, np.zeros((5, 3)))
    assert r.state == s.replace(step_count=5)
    assert not r.done


def test_dead_zone_boundaries():
    s = bare_state((3, 3), (0, 0))
    assert step_chunk(s, [[1 / 3, -1 / 3, 0.0]]).state.gripper == (3, 3)
    assert step_chunk(s, [[0.34, -0.34, 0.0]]).state.gripper == (4, 2)


def test_move_then_grip_picks_up_object():
    s = bare_state((2, 3), (3, 3))
    r = step_chunk(s, [[1.0, 0.0, 1.0]])
    assert r.state.held == 0 and not r.state.open and r.state.gripper == (3, 3)


def test_drop_in_zone_succeeds():
    s = bare_state((5, 3), (5, 3), open_=False, held=0)
    r = step_chunk(s, [[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    assert r.success and r.done
    assert r.state.step_count == 1  # early exit


def test_walls_are_noops():
    s = bare_state((0, 0), (3, 3))
    assert step_chunk(s, [[-1.0, -1.0, 0.0]]).state.gripper == (0, 0)


def test_closing_on_empty_cell_holds_nothing():
    s = bare_state((0, 0), (3, 3))
    r = step_chunk(s, [[0.0, 0.0, 1.0]])
    assert not r.state.open and r.state.held is None


def test_step_chunk_rejects_bad_shape():
    with pytest.raises(ValueError):
        step_chunk(bare_state((0, 0), (1, 1)), np.zeros((5, 2)))


def test_max_steps_ends_episode():
    s = bare_state((0, 0), (3, 3)).replace(max_steps=3)
    r = step_chunk(s, np.zeros((5, 3)))
    assert r.done and not r.success and r.state.step_count == 3


@pytest.mark.parametrize("distractors", [False, True])
def test_expert_always_succeeds(distractors):
    suite = default_suite(distractors)
    for k in range(200):
        demo = record_expert_demo(suite.tasks[k % 10], 1000 + k)
        assert demo.success
        flags = [f.gripper_open for f in demo.frames]
        toggles = [i for i in range(1, len(flags)) if flags[i] != flags[i - 1]]
        assert len(toggles) == 2 and not flags[toggles[0]] and flags[toggles[1]]
        assert len(demo.frames) - 1 <= 2 * (7 + 7) + 5


def test_expert_raises_on_full_zone():
    zone = ((5, 2), (5, 2))
    s = WorldState((7, 7), (("block", (0, 0)), ("cup", (5, 2))), 0, zone, (0, 0), True, None, 0, 50)
    task = TaskSpec("t", "block", "right", zone, (7, 7), ("x",))
    with pytest.raises(ExpertFailure):
        list(scripted_expert(task, s))


def test_expert_chunk_is_noop_after_success():
    s = bare_state((5, 3), (5, 3))
    assert is_success(s)
    assert np.all(expert_chunk(s) == 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 9), st.integers(0, 10**6),
       st.lists(st.lists(st.floats(-1, 1), min_size=3, max_size=3), min_size=1, max_size=8))
def test_random_chunks_preserve_invariants(task_idx, seed, rows):
    suite = default_suite(distractors=True)
    s, _ = reset(suite.tasks[task_idx], seed)
    n = len(s.objects)
    r = step_chunk(s, rows)
    check_invariants(r.state)
    assert len(r.state.objects) == n
    assert r.success == is_success(r.state)
    if r.success:
        assert r.done
    assert r == step_chunk(s, rows)


def test_observation_encodes_state():
    s = bare_state((1, 2), (3, 4))
    assert observe(s) == ["block", "(3,4)", "gripper", "(1,2)", "open", "zone", "(5,2)", "(6,4)"]


def test_suite_file_roundtrip(tmp_path):
    dump_suite(SUITE, tmp_path / "suite.json")
    back = load_suite(tmp_path / "suite.json")
    assert back.to_dict() == SUITE.to_dict()


def test_suite_yaml_with_custom_tasks(tmp_path):
    (tmp_path / "s.yaml").write_text(
        "grid: [5, 5]\nobjects: [cube]\nzones: {top: [[0, 4], [4, 4]]}\nmax_steps: 30\n"
    )
    suite = load_suite(tmp_path / "s.yaml")
    assert [t.id for t in suite.tasks] == ["cube-to-top"]
    assert record_expert_demo(suite.tasks[0], 0).success


def test_render_marks_gripper_and_object():
    text = render(bare_state((0, 0), (1, 0)))
    assert text.splitlines()[-1].startswith("GB")
