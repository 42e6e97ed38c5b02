"""Procedural 2D manipulation suite.

A single coloured object, an optional goal ring and a white disc agent live in
the unit square. Push tasks move the object into the goal ring on one side of
the arena; reach tasks touch the object with the agent. Frames are rendered
with :mod:`vlcritic.kernels` and stored as ``uint8`` levels, so every intensity
is exactly ``k / 255``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels

FRAME_SIZE = 64
STEP_SIZE = 0.05
HORIZON = 64
SUCCESS_RADIUS = 0.08
MIN_SEPARATION = 0.2
OBJECT_HALF = 0.045
AGENT_RADIUS = 0.03
CONTACT = OBJECT_HALF + AGENT_RADIUS
RING_HALF = 0.6 / FRAME_SIZE

VERBS = ("push", "reach")
SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (40, 80, 230),
    "yellow": (230, 210, 40),
}
GOALS = {
    "left": (0.15, 0.5),
    "right": (0.85, 0.5),
    "top": (0.5, 0.85),
    "bottom": (0.5, 0.15),
}
CAPTION_TEMPLATES = {
    "push": "push the {color} {shape} to the {side} goal",
    "reach": "reach the {color} {shape}",
}


class InvalidActionError(ValueError):
    """Raised when an action leaves the box [-1, 1]^2 or is not finite."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    verb: str
    object_shape: str
    object_color: str
    goal_side: Optional[str]
    caption: str
    success_radius: float = SUCCESS_RADIUS

    def __post_init__(self):
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple
    object_pos: tuple
    goal_pos: tuple
    step_index: int = 0

    def vector(self) -> np.ndarray:
        """Flat float32 observation: agent, object, goal, object minus agent."""
        ax, ay = self.agent_pos
        ox, oy = self.object_pos
        gx, gy = self.goal_pos
        return np.array([ax, ay, ox, oy, gx, gy, ox - ax, oy - ay], dtype=np.float32)


@dataclass
class EpisodeRecord:
    """A rendered trajectory.

    ``frames`` holds uint8 levels of shape (T, H, W, 3); :meth:`float_frames`
    gives the [0, 1] intensities.
    """

    frames: np.ndarray
    states: list
    actions: np.ndarray
    caption: Optional[str]
    success: bool
    task_id: str
    seed: int
    meta: dict = field(default_factory=dict)

    def float_frames(self, indices=None) -> np.ndarray:
        frames = self.frames if indices is None else self.frames[np.asarray(indices)]
        return to_float(frames)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def to_float(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float32) / np.float32(255.0)


def caption_for(verb: str, shape: str, color: str, side: Optional[str]) -> str:
    return CAPTION_TEMPLATES[verb].format(color=color, shape=shape, side=side)


def enumerate_tasks() -> list[TaskSpec]:
    """All 60 tasks (48 push, 12 reach) sorted alphabetically by task_id."""
    tasks = []
    for shape, color in itertools.product(SHAPES, COLORS):
        for side in GOALS:
            tasks.append(TaskSpec(f"push-{color}-{shape}-{side}", "push", shape, color,
                                  side, caption_for("push", shape, color, side)))
        tasks.append(TaskSpec(f"reach-{color}-{shape}", "reach", shape, color, None,
                              caption_for("reach", shape, color, None)))
    return sorted(tasks, key=lambda t: t.task_id)


def task_by_id(task_id: str) -> TaskSpec:
    for task in enumerate_tasks():
        if task.task_id == task_id:
            return task
    raise KeyError(f"unknown task_id {task_id!r}")


def _dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def reset(task: TaskSpec, seed: int) -> WorldState:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    goal = GOALS[task.goal_side] if task.verb == "push" else None
    while True:
        obj = tuple(float(v) for v in rng.uniform(0.2, 0.8, size=2))
        agent = tuple(float(v) for v in rng.uniform(0.05, 0.95, size=2))
        if _dist(agent, obj) < MIN_SEPARATION:
            continue
        if goal is not None and _dist(obj, goal) < MIN_SEPARATION:
            continue
        break
    # reach tasks have no goal ring; their target is the object's start position
    return WorldState(agent, obj, goal if goal is not None else obj, 0)


def is_success(state: WorldState, task: TaskSpec) -> bool:
    if task.verb == "push":
        return _dist(state.object_pos, state.goal_pos) < task.success_radius
    return _dist(state.agent_pos, state.object_pos) < task.success_radius


def step(state: WorldState, action, task: TaskSpec):
    """Advance one step. Returns ``(state, sparse_reward, done)``."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0):
        raise InvalidActionError(f"action must lie in [-1, 1]^2, got {action!r}")
    ax, ay, ox, oy = kernels.push_step(state.agent_pos[0], state.agent_pos[1],
                                       state.object_pos[0], state.object_pos[1],
                                       float(a[0]) * STEP_SIZE, float(a[1]) * STEP_SIZE,
                                       CONTACT)
    nxt = WorldState((ax, ay), (ox, oy), state.goal_pos, state.step_index + 1)
    success = is_success(nxt, task)
    return nxt, int(success), success or nxt.step_index >= HORIZON


def _towards(agent, target) -> np.ndarray:
    return np.clip((np.asarray(target) - np.asarray(agent)) / STEP_SIZE, -1.0, 1.0)


def _unit(v):
    n = math.hypot(v[0], v[1])
    if n < 1e-12:
        return np.array([1.0, 0.0])
    return np.asarray(v, dtype=np.float64) / n


def push_controller(state: WorldState, target) -> np.ndarray:
    """Greedy pusher driving the object towards ``target``.

    Walks to the point behind the object (sliding around it if the direct
    line would bump it) and then pushes along the object-to-target line while
    cancelling lateral drift.
    """
    a = np.asarray(state.agent_pos)
    o = np.asarray(state.object_pos)
    u = _unit(np.asarray(target) - o)
    rel = a - o
    along = float(rel @ u)
    lateral = rel - along * u
    if along < -0.5 * CONTACT and np.linalg.norm(lateral) < 0.3 * CONTACT:
        remaining = np.linalg.norm(np.asarray(target) - o)
        push = min(STEP_SIZE, remaining + 0.01)
        return np.clip((push * u - 0.5 * lateral) / STEP_SIZE, -1.0, 1.0)

    behind = o - u * (CONTACT + 0.015)
    to_behind = behind - a
    dist = np.linalg.norm(to_behind)
    if dist < 1e-9:
        return np.zeros(2)
    direction = to_behind / dist
    to_obj = o - a
    r = np.linalg.norm(to_obj)
    n = to_obj / max(r, 1e-12)
    if r < CONTACT + 0.05 and direction @ n > 0.0:
        tangent = np.array([-n[1], n[0]])
        side = tangent @ to_behind
        if abs(side) < 1e-9:
            side = tangent @ (-u) if abs(tangent @ u) > 1e-9 else 1.0
        tangent = tangent if side >= 0 else -tangent
        direction = 0.9 * tangent - 0.45 * n
        direction = direction / np.linalg.norm(direction)
    step_len = min(STEP_SIZE, dist)
    return np.clip(direction * step_len / STEP_SIZE, -1.0, 1.0)


def point_controller(state: WorldState, target) -> np.ndarray:
    return _towards(state.agent_pos, target)


def expert_action(state: WorldState, task: TaskSpec) -> np.ndarray:
    if task.verb == "reach":
        return point_controller(state, state.object_pos)
    return push_controller(state, state.goal_pos)


class ExpertPolicy:
    """Scripted demonstrator; the only policy whose successes get captions."""

    is_expert = True

    def reset(self, seed: int) -> None:
        pass

    def __call__(self, state: WorldState, task: TaskSpec) -> np.ndarray:
        return expert_action(state, task)


class RandomPolicy:
    is_expert = False

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reset(self, seed: int) -> None:
        self._rng = np.random.default_rng([self.seed, seed])

    def __call__(self, state, task):
        return self._rng.uniform(-1.0, 1.0, size=2)


class CorruptedPolicy:
    """Replaces the base action by a uniform random one with probability ``p``."""

    is_expert = False

    def __init__(self, base, p: float, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.base = base
        self.p = p
        self.seed = seed
        self.replaced = 0
        self.calls = 0
        self._rng = np.random.default_rng(seed)

    def reset(self, seed: int) -> None:
        self._rng = np.random.default_rng([self.seed, seed])
        if hasattr(self.base, "reset"):
            self.base.reset(seed)

    def __call__(self, state, task):
        base_action = self.base(state, task)
        replace_it = self._rng.random() < self.p
        noise = self._rng.uniform(-1.0, 1.0, size=2)
        self.calls += 1
        if replace_it:
            self.replaced += 1
            return noise
        return np.asarray(base_action, dtype=np.float64)


def corrupt_policy(base_policy, p: float, seed: int) -> CorruptedPolicy:
    return CorruptedPolicy(base_policy, p, seed)


class TargetPolicy:
    """Expert-style controller aimed at an arbitrary target position.

    Push tasks move the object to ``target``; reach tasks move the agent
    there. Used to build scene-matched failures.
    """

    is_expert = False

    def __init__(self, target):
        self.target = tuple(float(v) for v in target)

    def reset(self, seed: int) -> None:
        pass

    def achieved(self, state: WorldState, task: TaskSpec) -> bool:
        pos = state.object_pos if task.verb == "push" else state.agent_pos
        return _dist(pos, self.target) < task.success_radius

    def __call__(self, state, task):
        if task.verb == "push":
            return push_controller(state, self.target)
        return point_controller(state, self.target)


def render(state: WorldState, task: TaskSpec, out: Optional[np.ndarray] = None,
           as_float: bool = True) -> np.ndarray:
    """Rasterize ``state``. Returns float32 [0, 1] unless ``as_float`` is False."""
    if out is None:
        out = np.empty((FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    r, g, b = COLORS[task.object_color]
    kernels.render_frame(out, state.agent_pos[0], state.agent_pos[1],
                         state.object_pos[0], state.object_pos[1],
                         state.goal_pos[0], state.goal_pos[1],
                         kernels.SHAPE_IDS[task.object_shape], r, g, b,
                         task.verb == "push", OBJECT_HALF, AGENT_RADIUS,
                         task.success_radius, RING_HALF)
    return to_float(out) if as_float else out


def perturb_frame(frame: np.ndarray, brightness: float, noise_high: float, seed) -> np.ndarray:
    """``clip(frame * brightness + U[0, noise_high], 0, 1)`` per pixel.

    Accepts a single frame or a stack of frames; uint8 input is converted to
    [0, 1] intensities first.
    """
    if brightness < 0 or noise_high < 0:
        raise ValueError("brightness and noise_high must be non-negative")
    x = to_float(frame) if frame.dtype == np.uint8 else np.asarray(frame, dtype=np.float32)
    out = x * np.float32(brightness)
    if noise_high > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.uniform(0.0, noise_high, size=x.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def generate_episode(task: TaskSpec, policy, seed: int, stop=None) -> EpisodeRecord:
    """Roll ``policy`` from ``reset(task, seed)`` until done or ``stop(state)``."""
    state = reset(task, seed)
    if hasattr(policy, "reset"):
        policy.reset(seed)
    frames = [render(state, task, as_float=False)]
    states = [state]
    actions = []
    success = False
    done = False
    while not done:
        action = np.clip(np.asarray(policy(state, task), dtype=np.float64), -1.0, 1.0)
        state, reward, done = step(state, action, task)
        actions.append(action)
        states.append(state)
        frames.append(render(state, task, as_float=False))
        success = bool(reward)
        if stop is not None and stop(state):
            done = True
    caption = task.caption if success and getattr(policy, "is_expert", False) else None
    return EpisodeRecord(
        frames=np.stack(frames),
        states=states,
        actions=np.asarray(actions, dtype=np.float64).reshape(-1, 2),
        caption=caption,
        success=success,
        task_id=task.task_id,
        seed=int(seed),
    )


def with_goal(state: WorldState, goal) -> WorldState:
    return replace(state, goal_pos=tuple(goal))
