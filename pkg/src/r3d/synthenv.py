"""Desk-scale synthetic manipulation: reach and push with scripted experts.

The embodiment is a free-flying 4-DoF gripper point (x, y, z, yaw), so
forward kinematics is closed form and the EE quaternion actually varies
across demos. Actions are absolute joint-space targets; step() clamps the
position into the workspace. Scenes render as labeled point clouds (table /
target sphere / distractor boxes / agent marker) for both policy input and
segmentation pretraining.

reset/render_cloud/step/scripted_expert are pure functions of (state, spec,
rng); SynthEnv is a small stateful wrapper for closed-loop rollouts. Fixed
seeds reproduce everything bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import Episode, Observation, save_demos
from .pointcloud import Aabb, PointCloud, resample_indices
from .rng import Rng

N_Q = 4
TARGET_RADIUS = 0.03
AGENT_RADIUS = 0.02
DISTRACTOR_HALF = 0.03
CONTACT_DIST = TARGET_RADIUS + AGENT_RADIUS
HUE_JITTER_SIGMA = 0.02
EXPERT_MAX_STEP = 0.05
EXPERT_JITTER_SIGMA = 0.002
EXPERT_MAX_YAW_STEP = 0.3

CLASS_TABLE, CLASS_TARGET, CLASS_DISTRACTOR, CLASS_AGENT = 0, 1, 2, 3
N_CLASSES = 4
ENTITY_COLORS = {
    CLASS_TABLE: (0.5, 0.5, 0.5),
    CLASS_TARGET: (0.8, 0.1, 0.1),
    CLASS_DISTRACTOR: (0.1, 0.2, 0.8),
    CLASS_AGENT: (0.1, 0.8, 0.2),
}


@dataclass
class TaskSpec:
    name: str
    workspace: Aabb
    success_tolerance: float
    max_steps: int
    n_distractors: int
    cloud_points_per_entity: int
    n_p: int = 1024

    def __post_init__(self):
        if self.name not in ("reach", "push"):
            raise ValueError(f"unknown task {self.name!r}")
        if self.success_tolerance <= 0:
            raise ValueError("success_tolerance must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.n_distractors < 0 or self.cloud_points_per_entity < 1 or self.n_p < 1:
            raise ValueError("counts must be positive")

    @property
    def n_q(self) -> int:
        return N_Q


def reach_task(n_p: int = 1024) -> TaskSpec:
    ws = Aabb(np.array([-0.3, -0.3, 0.0]), np.array([0.3, 0.3, 0.3]))
    return TaskSpec("reach", ws, success_tolerance=0.03, max_steps=60,
                    n_distractors=2, cloud_points_per_entity=192, n_p=n_p)


def push_task(n_p: int = 1024) -> TaskSpec:
    ws = Aabb(np.array([-0.3, -0.3, 0.0]), np.array([0.3, 0.3, 0.3]))
    return TaskSpec("push", ws, success_tolerance=0.05, max_steps=80,
                    n_distractors=0, cloud_points_per_entity=192, n_p=n_p)


@dataclass
class EnvState:
    agent: np.ndarray  # (x, y, z, yaw)
    target: np.ndarray  # 3-vector
    distractors: list  # of (center 3-vector, half_extent, class label)
    step_count: int = 0


def home_pose(spec: TaskSpec) -> np.ndarray:
    """Fixed start: workspace center in xy, 80% of the z span up, yaw 0."""
    lo, hi = spec.workspace.lo, spec.workspace.hi
    return np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2,
                     lo[2] + 0.8 * (hi[2] - lo[2]), 0.0], dtype=np.float64)


def push_goal(spec: TaskSpec) -> np.ndarray:
    """Push goal region center: workspace center xy at the sphere's resting height."""
    lo, hi = spec.workspace.lo, spec.workspace.hi
    return np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, TARGET_RADIUS])


def _spawn_region(spec: TaskSpec) -> Aabb:
    lo, hi = spec.workspace.lo.copy(), spec.workspace.hi.copy()
    span = hi - lo
    lo[:2] += 0.15 * span[:2]
    hi[:2] -= 0.15 * span[:2]
    if spec.name == "push":
        lo[2] = hi[2] = TARGET_RADIUS  # sphere rests on the table
    else:
        lo[2] += 0.15 * span[2]
        hi[2] -= 0.15 * span[2]
    return Aabb(lo, hi)


def reset(spec: TaskSpec, rng: Rng) -> EnvState:
    """Agent at the home pose; target and distractors rejection-sampled in the
    spawn region with pairwise separation >= 2x tolerance (the home position
    and, for push, the goal center count as occupied points too)."""
    region = _spawn_region(spec)
    sep = 2.0 * spec.success_tolerance
    anchors = [home_pose(spec)[:3]]
    if spec.name == "push":
        anchors.append(push_goal(spec))
    placed = []
    for _ in range(1000):
        cand = region.sample(rng)
        if all(np.linalg.norm(cand - p) >= sep for p in anchors + placed):
            placed.append(cand)
            if len(placed) == 1 + spec.n_distractors:
                break
    else:
        raise RuntimeError("could not place entities with the required separation")
    distractors = [(c, DISTRACTOR_HALF, CLASS_DISTRACTOR) for c in placed[1:]]
    return EnvState(agent=home_pose(spec), target=placed[0], distractors=distractors)


def forward_kinematics(joint) -> np.ndarray:
    """(x, y, z, yaw) -> 7-vector pose: position plus the yaw-about-z
    quaternion (cos(yaw/2), 0, 0, sin(yaw/2)), sign-fixed to w >= 0."""
    j = np.asarray(joint, dtype=np.float64)
    if j.shape != (N_Q,) or not np.all(np.isfinite(j)):
        raise ValueError("joint must be a finite 4-vector")
    half = j[3] / 2.0
    q = np.array([math.cos(half), 0.0, 0.0, math.sin(half)])
    if q[0] < 0:
        q = -q
    return np.concatenate([j[:3], q])


def step(state: EnvState, joint_action, spec: TaskSpec) -> tuple[EnvState, bool, bool]:
    """Kinematic step: the agent jumps to the action (position clamped into
    the workspace, yaw free). For push, sweeping into the target displaces it
    by the overlap vector along the center line, then the target is clamped
    into the workspace. Returns (state', success, done)."""
    a = np.asarray(joint_action, dtype=np.float64)
    if a.shape != (N_Q,) or not np.all(np.isfinite(a)):
        raise ValueError("action must be a finite 4-vector")
    lo, hi = spec.workspace.lo, spec.workspace.hi
    agent = a.copy()
    agent[:3] = np.clip(agent[:3], lo, hi)
    target = state.target.copy()
    if spec.name == "push":
        d = target - agent[:3]
        dist = float(np.linalg.norm(d))
        if dist < CONTACT_DIST:
            direction = d / dist if dist > 1e-12 else np.array([1.0, 0.0, 0.0])
            target = target + direction * (CONTACT_DIST - dist)
            target = np.clip(target, lo, hi)
    count = state.step_count + 1
    new = EnvState(agent=agent, target=target, distractors=state.distractors,
                   step_count=count)
    if spec.name == "reach":
        success = float(np.linalg.norm(agent[:3] - target)) <= spec.success_tolerance
    else:
        success = float(np.linalg.norm(target - push_goal(spec))) <= spec.success_tolerance
    done = success or count >= spec.max_steps
    return new, success, done


def goal_distance(state: EnvState, spec: TaskSpec) -> float:
    if spec.name == "reach":
        return float(np.linalg.norm(state.agent[:3] - state.target))
    return float(np.linalg.norm(state.target - push_goal(spec)))


# -- rendering --------------------------------------------------------------------


def _sphere_surface(center, radius, n, rng) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return center + radius * v


def _box_surface(center, half, n, rng) -> np.ndarray:
    # cube faces are equal-area: pick axis and sign uniformly
    axis = rng.integers(0, 3, size=n)
    sign = rng.integers(0, 2, size=n) * 2 - 1
    pts = rng.uniform(-half, half, size=(n, 3))
    pts[np.arange(n), axis] = sign * half
    return center + pts


def _table_surface(spec, n, rng) -> np.ndarray:
    lo, hi = spec.workspace.lo, spec.workspace.hi
    xy = rng.uniform(lo[:2], hi[:2], size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def render_cloud(state: EnvState, spec: TaskSpec, rng: Rng) -> tuple[PointCloud, np.ndarray]:
    """Labeled scene cloud, resampled to exactly n_p points.

    Entities render in order table, target, distractors, agent, each with
    cloud_points_per_entity surface samples and its class color plus N(0,
    0.02) per-point hue jitter; rng draws follow that order, then the
    resample draw. Labels come back as an int64 array aligned with the cloud.
    """
    n = spec.cloud_points_per_entity
    groups = [(_table_surface(spec, n, rng), CLASS_TABLE),
              (_sphere_surface(state.target, TARGET_RADIUS, n, rng), CLASS_TARGET)]
    for center, half, cls in state.distractors:
        groups.append((_box_surface(center, half, n, rng), cls))
    groups.append((_sphere_surface(state.agent[:3], AGENT_RADIUS, n, rng), CLASS_AGENT))
    pts = np.concatenate([g for g, _ in groups]).astype(np.float32)
    labels = np.concatenate([np.full(len(g), c, dtype=np.int64) for g, c in groups])
    base = np.concatenate([np.tile(ENTITY_COLORS[c], (len(g), 1)) for g, c in groups])
    colors = (base + rng.normal(size=base.shape) * HUE_JITTER_SIGMA).astype(np.float32)
    idx = resample_indices(len(pts), spec.n_p, rng, points=pts)
    return PointCloud(pts[idx], np.clip(colors[idx], 0.0, 1.0)), labels[idx]


# -- scripted experts -------------------------------------------------------------


def _bounded_move(agent, waypoint, rng) -> np.ndarray:
    """Move toward waypoint at most EXPERT_MAX_STEP, turn toward its bearing
    at most EXPERT_MAX_YAW_STEP, jitter the position by a normal draw whose
    norm is capped at 3 sigma (so displacement <= 0.05 + 3 sigma always)."""
    delta = waypoint - agent[:3]
    dist = float(np.linalg.norm(delta))
    move = delta if dist <= EXPERT_MAX_STEP else delta * (EXPERT_MAX_STEP / dist)
    jitter = rng.normal(size=3) * EXPERT_JITTER_SIGMA
    jn = float(np.linalg.norm(jitter))
    cap = 3.0 * EXPERT_JITTER_SIGMA
    if jn > cap:
        jitter *= cap / jn
    yaw = agent[3]
    if float(np.linalg.norm(delta[:2])) > 1e-6:
        bearing = math.atan2(delta[1], delta[0])
        err = (bearing - yaw + math.pi) % (2.0 * math.pi) - math.pi
        yaw = yaw + float(np.clip(err, -EXPERT_MAX_YAW_STEP, EXPERT_MAX_YAW_STEP))
    return np.concatenate([agent[:3] + move + jitter, [yaw]])


def scripted_expert(state: EnvState, spec: TaskSpec, rng: Rng) -> np.ndarray:
    """One expert action. Reach heads straight for the target. Push first
    takes a standoff point behind the target (approached at altitude so the
    descent cannot graze the sphere), then sweeps through it toward the goal."""
    agent = state.agent
    if spec.name == "reach":
        return _bounded_move(agent, state.target, rng)
    goal = push_goal(spec)
    to_goal = goal - state.target
    norm = float(np.linalg.norm(to_goal[:2]))
    push_dir = to_goal / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    push_dir[2] = 0.0
    behind = state.target - push_dir * (CONTACT_DIST + 0.01)
    aligned = float(np.linalg.norm((agent[:3] - behind)[:2])) <= 0.015
    low = abs(agent[2] - behind[2]) <= 0.015
    if not aligned:
        waypoint = behind + np.array([0.0, 0.0, 0.08])
    elif not low:
        waypoint = behind
    else:
        waypoint = state.target + push_dir * CONTACT_DIST
    return _bounded_move(agent, waypoint, rng)


# -- rollout wrapper ---------------------------------------------------------------


class SynthEnv:
    """Stateful convenience wrapper: reset() seeds a private render stream so
    (reset, step, step, ...) sequences are reproducible from one Rng."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.state: EnvState | None = None
        self._render_rng: Rng | None = None
        self._done = False

    def reset(self, rng: Rng) -> Observation:
        place_rng, self._render_rng = rng.split(2)
        self.state = reset(self.spec, place_rng)
        self._done = False
        return self.observe()

    def observe(self) -> Observation:
        cloud, _ = render_cloud(self.state, self.spec, self._render_rng.split(1)[0])
        return Observation(cloud, self.state.agent.astype(np.float32))

    def step(self, joint_action) -> tuple[Observation, bool, dict]:
        if self.state is None:
            raise RuntimeError("call reset() first")
        self.state, success, self._done = step(self.state, joint_action, self.spec)
        info = {"done": self._done, "distance": goal_distance(self.state, self.spec),
                "steps": self.state.step_count}
        return self.observe(), success, info

    def goal_distance(self) -> float:
        return goal_distance(self.state, self.spec)


# -- dataset generation -------------------------------------------------------------


def rollout_expert(spec: TaskSpec, rng: Rng) -> tuple[Episode, bool]:
    """One expert episode: frames hold (observation, action, fk(action))
    where the observation precedes the action that was taken from it."""
    env_rng, expert_rng = rng.split(2)
    env = SynthEnv(spec)
    obs = env.reset(env_rng)
    frames = []
    success = False
    for srng in expert_rng.split(spec.max_steps):
        action = scripted_expert(env.state, spec, srng).astype(np.float32)
        ee = forward_kinematics(action).astype(np.float32)
        frames.append((obs, action, ee))
        obs, success, info = env.step(action)
        if info["done"]:
            break
    return Episode(frames, task_id=spec.name, success=bool(success)), bool(success)


def gen_demos(spec: TaskSpec, n_episodes: int, rng: Rng, out_dir,
              name: str | None = None) -> tuple[list[Episode], dict]:
    """Roll the scripted expert until n_episodes successes, keeping only
    successes, and write them as an R3DE store. Aborts if the expert fails
    more than half its attempts (after a few attempts)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    episodes: list[Episode] = []
    failures = attempts = 0
    while len(episodes) < n_episodes:
        attempts += 1
        ep, ok = rollout_expert(spec, rng.split(1)[0])
        if ok:
            episodes.append(ep)
        else:
            failures += 1
        if attempts >= 4 and failures * 2 > attempts:
            raise RuntimeError(f"expert failure rate > 50% ({failures}/{attempts})")
    manifest = save_demos(out_dir, episodes, name=name or spec.name, task_id=spec.name)
    return episodes, manifest


def gen_pretrain_scenes(spec: TaskSpec, n_scenes: int, rng: Rng) -> list[tuple[PointCloud, np.ndarray]]:
    """Labeled clouds from random resets, for segmentation pretraining."""
    scenes = []
    for srng in rng.split(n_scenes):
        reset_rng, render_rng = srng.split(2)
        state = reset(spec, reset_rng)
        scenes.append(render_cloud(state, spec, render_rng))
    return scenes
