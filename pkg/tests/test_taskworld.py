import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlcritic import taskworld as tw


def test_enumeration_counts_and_order(tasks):
    assert len(tasks) == 60
    assert sum(t.verb == "push" for t in tasks) == 48
    ids = [t.task_id for t in tasks]
    assert ids == sorted(ids)
    assert len(set(ids)) == 60
    assert tw.enumerate_tasks()[0] == tasks[0]


def test_captions_follow_templates(tasks):
    push = re.compile(r"^push the (red|green|blue|yellow) (square|circle|triangle) to the "
                      r"(left|right|top|bottom) goal$")
    reach = re.compile(r"^reach the (red|green|blue|yellow) (square|circle|triangle)$")
    for t in tasks:
        assert (push if t.verb == "push" else reach).match(t.caption)
    assert len({t.caption for t in tasks}) == 60


def test_task_by_id_unknown():
    with pytest.raises(KeyError):
        tw.task_by_id("push-purple-hexagon-left")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 59))
def test_reset_is_seeded_in_bounds_and_not_solved(seed, k):
    task = tw.enumerate_tasks()[k]
    s1, s2 = tw.reset(task, seed), tw.reset(task, seed)
    assert s1 == s2
    for p in (s1.agent_pos, s1.object_pos, s1.goal_pos):
        assert 0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0
    assert s1.step_index == 0
    assert not tw.is_success(s1, task)


def test_reset_rejects_negative_seed(tasks):
    with pytest.raises(ValueError):
        tw.reset(tasks[0], -1)


def test_zero_action_only_advances_clock(tasks):
    task = tasks[0]
    s = tw.reset(task, 3)
    nxt, r, done = tw.step(s, np.zeros(2), task)
    assert nxt.agent_pos == s.agent_pos and nxt.object_pos == s.object_pos
    assert nxt.step_index == 1 and r == 0 and not done


def test_object_at_goal_gives_reward(tasks):
    task = next(t for t in tasks if t.verb == "push")
    s = tw.reset(task, 0)
    s = tw.WorldState((0.95, 0.95), s.goal_pos, s.goal_pos, 5)
    _, r, done = tw.step(s, np.zeros(2), task)
    assert r == 1 and done


def test_horizon_ends_episode(tasks):
    task = tasks[0]
    s = tw.reset(task, 1)
    s = tw.WorldState(s.agent_pos, s.object_pos, s.goal_pos, tw.HORIZON - 1)
    _, _, done = tw.step(s, np.zeros(2), task)
    assert done


@pytest.mark.parametrize("bad", [[1.5, 0.0], [0.0, -1.01], [np.nan, 0.0], [0.1]])
def test_invalid_action(tasks, bad):
    s = tw.reset(tasks[0], 0)
    with pytest.raises(tw.InvalidActionError):
        tw.step(s, np.asarray(bad), tasks[0])


def test_pushing_moves_object_along_motion():
    task = tw.task_by_id("push-red-square-right")
    s = tw.WorldState((0.40, 0.5), (0.47, 0.5), tw.GOALS["right"], 0)
    nxt, _, _ = tw.step(s, np.array([1.0, 0.0]), task)
    assert nxt.object_pos[0] > s.object_pos[0]
    assert nxt.object_pos[1] == pytest.approx(0.5)


def test_expert_action_geometry():
    task = tw.task_by_id("push-red-square-right")
    s = tw.WorldState((0.1, 0.5), (0.5, 0.5), tw.GOALS["right"], 0)
    assert tw.expert_action(s, task)[0] > 0
    reach = tw.task_by_id("reach-red-square")
    s = tw.WorldState((0.5, 0.5), (0.5, 0.5), (0.5, 0.5), 0)
    assert np.allclose(tw.expert_action(s, reach), 0.0)


def test_expert_calibration(tasks):
    """Expert succeeds before the horizon on at least 95% of 200 resets per task."""
    for task in tasks:
        wins = 0
        for seed in range(200):
            s = tw.reset(task, seed)
            done, r = False, 0
            while not done:
                s, r, done = tw.step(s, tw.expert_action(s, task), task)
            wins += r
        assert wins / 200 >= 0.95, task.task_id


def test_corruption_rate_monte_carlo():
    pol = tw.corrupt_policy(tw.ExpertPolicy(), 0.7, seed=11)
    task = tw.task_by_id("push-blue-circle-top")
    s = tw.reset(task, 0)
    for _ in range(10_000):
        pol(s, task)
    assert 0.68 <= pol.replaced / pol.calls <= 0.72


def test_corruption_extremes():
    task = tw.task_by_id("push-blue-circle-top")
    s = tw.reset(task, 4)
    p0 = tw.corrupt_policy(tw.ExpertPolicy(), 0.0, 1)
    assert np.array_equal(p0(s, task), tw.expert_action(s, task))
    p1 = tw.corrupt_policy(tw.ExpertPolicy(), 1.0, 1)
    for _ in range(50):
        p1(s, task)
    assert p1.replaced == p1.calls == 50
    with pytest.raises(ValueError):
        tw.corrupt_policy(tw.ExpertPolicy(), 1.5, 0)


def test_fully_random_rollouts_mostly_fail(tasks):
    push = [t for t in tasks if t.verb == "push"][:10]
    fails = 0
    for k, task in enumerate(push):
        for seed in range(10):
            ep = tw.generate_episode(task, tw.corrupt_policy(tw.ExpertPolicy(), 1.0, seed), seed)
            fails += not ep.success
            assert ep.caption is None
    assert fails / 100 >= 0.9


def test_generate_episode_structure_and_determinism(tasks):
    task = tasks[7]
    a = tw.generate_episode(task, tw.ExpertPolicy(), 5)
    b = tw.generate_episode(task, tw.ExpertPolicy(), 5)
    assert a.success and a.caption == task.caption
    assert a.num_frames == len(a.states) == len(a.actions) + 1
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.actions, b.actions)
    assert tw.is_success(a.states[-1], task)
    assert a.frames.dtype == np.uint8 and a.frames.shape[1:] == (64, 64, 3)


def test_successful_non_expert_gets_no_caption(tasks):
    task = tw.task_by_id("reach-red-circle")
    # p=0 corrupted expert behaves like the expert but is not one
    ep = tw.generate_episode(task, tw.corrupt_policy(tw.ExpertPolicy(), 0.0, 0), 3)
    assert ep.success and ep.caption is None


def test_render_properties(tasks):
    task = tasks[0]
    s = tw.reset(task, 2)
    f1, f2 = tw.render(s, task), tw.render(s, task)
    assert np.array_equal(f1, f2)
    assert f1.dtype == np.float32 and f1.min() >= 0.0 and f1.max() <= 1.0


def test_color_change_only_touches_object_pixels():
    a = tw.task_by_id("push-red-square-left")
    b = tw.task_by_id("push-blue-square-left")
    s = tw.reset(a, 9)
    fa = tw.render(s, a, as_float=False)
    fb = tw.render(s, b, as_float=False)
    diff = np.any(fa != fb, axis=-1)
    assert diff.any()
    # the mask is exactly the object's square footprint (minus the agent on top)
    h = tw.OBJECT_HALF
    ii, jj = np.mgrid[0:64, 0:64]
    px = (jj + 0.5) / 64
    py = 1.0 - (ii + 0.5) / 64
    square = (np.abs(px - s.object_pos[0]) <= h) & (np.abs(py - s.object_pos[1]) <= h)
    agent = (px - s.agent_pos[0]) ** 2 + (py - s.agent_pos[1]) ** 2 <= tw.AGENT_RADIUS ** 2
    assert np.array_equal(diff, square & ~agent)
    assert np.all(fa[diff] == tw.COLORS["red"])


def test_perturb_frame_examples(tasks):
    f = tw.render(tw.reset(tasks[0], 0), tasks[0])
    assert np.array_equal(tw.perturb_frame(f, 1.0, 0.0, 0), f)
    ones = np.ones((4, 4, 3), dtype=np.float32)
    assert np.allclose(tw.perturb_frame(ones, 0.5, 0.0, 0), 0.5)
    noisy = tw.perturb_frame(f, 0.5, 0.2, 7)
    dev = noisy - np.clip(f * 0.5, 0, 1)
    assert dev.min() >= 0.0 and dev.max() <= 0.2 + 1e-7
    assert np.array_equal(noisy, tw.perturb_frame(f, 0.5, 0.2, 7))
    with pytest.raises(ValueError):
        tw.perturb_frame(f, -1.0, 0.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_perturb_frame_range(b, n, seed):
    x = np.random.default_rng(0).random((8, 8, 3), dtype=np.float32)
    y = tw.perturb_frame(x, b, n, seed)
    assert y.min() >= 0.0 and y.max() <= 1.0
