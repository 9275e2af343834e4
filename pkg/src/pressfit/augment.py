"""Backward trajectory augmentation from annotated bottleneck states.

A bottleneck is a demo step the operator marked as critical (a pre-grasp or
pre-insert pose).  Each attempt restores the world to such a state, drives
the end effector out along a random spherical offset with a small random
re-orientation, then replays the recorded motion in reverse so the snippet
walks back into the bottleneck.  The attempt is kept only if the final
state matches the bottleneck under the composite state metric; anything the
excursion disturbed (a shoved part, a dropped grasp) fails that check and
the candidate is discarded.

Restoring a bottleneck works by replaying the parent demo from its seed,
which doubles as an integrity check: if the stored observations cannot be
reproduced step for step, the demo and the environment build disagree and
augmentation refuses to run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .data import Trajectory
from .env.tasks import get_task
from .env.world import (DPOS_MAX, DROT_MAX, KinematicEnv, make_action,
                        split_action, state_distance)
from .errors import (AugmentBudgetExceeded, BadConfig, EnvMismatch,
                     LengthMismatch, NoAnnotations)

REPLAY_TOL = 1e-9          # replayed demo must match its record this tightly

ACCEPTED = "accepted"
STATE_MISMATCH = "state-mismatch"
INVALID_SAMPLE = "invalid-sample"


@dataclass(frozen=True)
class SphericalLimits:
    r_min: float = 0.03
    r_max: float = 0.10
    theta_max: float = math.pi / 3.0      # cone half-angle from +z

    def __post_init__(self):
        if not (0.0 <= self.r_min <= self.r_max):
            raise BadConfig("need 0 <= r_min <= r_max")
        if not (0.0 <= self.theta_max <= math.pi):
            raise BadConfig("theta_max must lie in [0, pi]")


@dataclass(frozen=True)
class AugmentConfig:
    limits: SphericalLimits = field(default_factory=SphericalLimits)
    epsilon: float = 1e-3                 # acceptance tolerance, meters
    n_snippets: int = 1
    per_bottleneck_cap: int | None = None
    max_rotation: float = 0.2             # orientation perturbation, radians
    seed: int = 0
    attempt_budget: int | None = None     # default: max(200, 50 * n_snippets)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise BadConfig("epsilon must be positive")
        if self.n_snippets < 1:
            raise BadConfig("n_snippets must be at least 1")
        if self.per_bottleneck_cap is not None and self.per_bottleneck_cap < 1:
            raise BadConfig("per_bottleneck_cap must be at least 1 when set")
        if self.max_rotation < 0:
            raise BadConfig("max_rotation must be non-negative")

    @property
    def budget(self) -> int:
        if self.attempt_budget is not None:
            return self.attempt_budget
        return max(200, 50 * self.n_snippets)


@dataclass
class AugmentReport:
    accepted: int = 0
    state_mismatch: int = 0
    invalid_sample: int = 0

    @property
    def attempts(self) -> int:
        return self.accepted + self.state_mismatch + self.invalid_sample

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0

    def count(self, category: str):
        if category == ACCEPTED:
            self.accepted += 1
        elif category == STATE_MISMATCH:
            self.state_mismatch += 1
        elif category == INVALID_SAMPLE:
            self.invalid_sample += 1
        else:
            raise ValueError(f"unknown attempt category {category!r}")

    def as_dict(self) -> dict:
        return {"accepted": self.accepted, "state_mismatch": self.state_mismatch,
                "invalid_sample": self.invalid_sample, "attempts": self.attempts,
                "acceptance_rate": self.acceptance_rate}


def default_env_factory(task: str, randomness: str) -> KinematicEnv:
    return KinematicEnv(get_task(task, randomness))


def plan_disassembly(start_pose, target_pose, grip: float,
                     dpos_max: float = DPOS_MAX,
                     drot_max: float = DROT_MAX) -> list:
    """Waypoint actions from start to target under the per-step motion caps.

    Positions interpolate linearly, orientations along the shorter arc; the
    gripper command is held constant.  Always emits at least one action so a
    zero-length excursion still produces a (no-op) step.
    """
    p0, q0 = np.asarray(start_pose[0], dtype=np.float64), start_pose[1]
    p1, q1 = np.asarray(target_pose[0], dtype=np.float64), target_pose[1]
    if not (np.all(np.isfinite(p0)) and np.all(np.isfinite(p1))):
        raise BadConfig("non-finite pose in disassembly plan")
    dp = float(np.linalg.norm(p1 - p0))
    dq = geo.quat_geodesic(q0, q1)
    steps = max(1, math.ceil(max(dp / dpos_max, dq / drot_max)))
    actions = []
    for i in range(1, steps + 1):
        t = i / steps
        pos = p0 + t * (p1 - p0)
        quat = geo.slerp(q0, q1, t)
        actions.append(make_action(pos, quat, grip))
    return actions


def reverse_actions(forward_actions: list, visited_poses: list) -> list:
    """Corrective actions walking the recorded poses backward.

    visited_poses holds the pose before the excursion plus one realized pose
    per forward action; corrective step i targets the pose visited at
    forward step L-1-i, ending on the bottleneck pose itself.
    """
    L = len(forward_actions)
    if len(visited_poses) != L + 1:
        raise LengthMismatch(f"{L} actions need {L + 1} poses, got {len(visited_poses)}")
    out = []
    for i in range(L):
        _, _, grip = split_action(forward_actions[L - 1 - i])
        pos, quat = visited_poses[L - 1 - i]
        out.append(make_action(pos, quat, grip))
    return out


def _in_workspace(pos: np.ndarray, workspace) -> bool:
    return all(lo <= pos[ax] <= hi for ax, (lo, hi) in enumerate(workspace))


class _BottleneckCache:
    """Replays parent demos once per (trajectory, bottleneck) pair."""

    def __init__(self, demos, env_factory):
        self.demos = demos
        self.env_factory = env_factory
        self.snaps: dict = {}

    def snapshot_at(self, traj_idx: int, bottleneck: int) -> dict:
        key = (traj_idx, bottleneck)
        if key not in self.snaps:
            traj = self.demos[traj_idx]
            env = self.env_factory(traj.task, traj.randomness)
            obs = env.reset(traj.seed)
            for t in range(bottleneck):
                obs, _ = env.step(traj.actions[t])
            drift = float(np.max(np.abs(obs - traj.observations[bottleneck])))
            if drift > REPLAY_TOL:
                raise EnvMismatch(
                    f"replaying demo seed {traj.seed} drifted {drift:.3e} from its "
                    f"record at step {bottleneck}; wrong env build or corrupt demo")
            self.snaps[key] = env.snapshot()
        return self.snaps[key]


def _attempt(env: KinematicEnv, snap: dict, cfg: AugmentConfig,
             rng: np.random.Generator):
    """One Algorithm-1 candidate; returns (category, snippet_fields | None)."""
    env.restore(snap)
    s_bot = env.state.copy()
    grip = 1.0 if s_bot.gripper_closed else -1.0

    offset = geo.sample_spherical_offset(
        rng, (cfg.limits.r_min, cfg.limits.r_max),
        (0.0, cfg.limits.theta_max), (0.0, 2.0 * math.pi))
    angle = rng.uniform(0.0, cfg.max_rotation)
    axis = geo.random_axis(rng)
    target_pos = s_bot.ee_pos + offset
    target_quat = geo.quat_canonical(geo.quat_multiply(
        geo.quat_from_axis_angle(axis, angle), s_bot.ee_quat))
    if not _in_workspace(target_pos, env.task.workspace):
        return INVALID_SAMPLE, None

    forward = plan_disassembly((s_bot.ee_pos, s_bot.ee_quat),
                               (target_pos, target_quat), grip)
    visited = [(s_bot.ee_pos.copy(), s_bot.ee_quat.copy())]
    for a in forward:
        env.step(a)
        visited.append((env.state.ee_pos.copy(), env.state.ee_quat.copy()))
    start_snap = env.snapshot()

    corrective = reverse_actions(forward, visited)
    observations, actions = [], []
    for a in corrective:
        observations.append(env.observe())
        env.step(a)
        actions.append(np.asarray(a, dtype=np.float64))

    distance = state_distance(env.state, s_bot)
    if distance > cfg.epsilon:
        return STATE_MISMATCH, None
    meta = {
        "bottleneck_snapshot": snap,
        "start_snapshot": start_snap,
        "forward_actions": [a.tolist() for a in forward],
        "replay_distance": distance,
    }
    return ACCEPTED, (np.asarray(observations), np.asarray(actions), meta)


def _check_demos(demos):
    if not demos:
        raise NoAnnotations("no demos supplied")
    for traj in demos:
        if not traj.bottleneck_indices:
            raise NoAnnotations(
                f"demo seed {traj.seed} ({traj.task}) has no bottleneck annotations")


def _snippet_stream(demos, cfg: AugmentConfig, env_factory):
    """Yields one (category, snippet | None) per attempt, budget enforced."""
    _check_demos(demos)
    pairs = [(ti, b) for ti, traj in enumerate(demos)
             for b in traj.bottleneck_indices]
    cache = _BottleneckCache(demos, env_factory)
    envs = {}
    rng = np.random.default_rng(cfg.seed)
    counts = {pair: 0 for pair in pairs}
    n_accepted = 0
    for attempt in range(cfg.budget):
        eligible = pairs if cfg.per_bottleneck_cap is None else \
            [p for p in pairs if counts[p] < cfg.per_bottleneck_cap]
        if not eligible:
            raise AugmentBudgetExceeded(
                "every bottleneck is at its per-bottleneck cap")
        ti, b = eligible[rng.integers(0, len(eligible))]
        traj = demos[ti]
        if traj.task not in envs:
            envs[traj.task] = env_factory(traj.task, traj.randomness)
        snap = cache.snapshot_at(ti, b)
        category, payload = _attempt(envs[traj.task], snap, cfg, rng)
        snippet = None
        if category == ACCEPTED:
            counts[(ti, b)] += 1
            obs, acts, meta = payload
            meta.update({"parent_seed": traj.seed, "parent_source": traj.source,
                         "bottleneck_index": b, "attempt": attempt})
            snippet = Trajectory(task=traj.task, source="augmentation",
                                 seed=n_accepted, success=True,
                                 randomness=traj.randomness,
                                 observations=obs, actions=acts,
                                 augmentation=meta)
            n_accepted += 1
        yield category, snippet


def augment(demos, cfg: AugmentConfig, env_factory=default_env_factory):
    """Produce cfg.n_snippets accepted snippets; returns (snippets, report)."""
    snippets, report = [], AugmentReport()
    for category, snippet in _snippet_stream(demos, cfg, env_factory):
        report.count(category)
        if snippet is not None:
            snippets.append(snippet)
            if len(snippets) >= cfg.n_snippets:
                return snippets, report
    raise AugmentBudgetExceeded(
        f"{report.attempts} attempts produced {report.accepted} of "
        f"{cfg.n_snippets} snippets ({report.as_dict()})")


def verify_snippet(snippet: Trajectory, env_factory=default_env_factory) -> float:
    """Independent replay check; returns distance from the snippet's end state
    to its bottleneck.  Uses only the stored metadata, never the producer's
    in-memory state."""
    meta = snippet.augmentation
    if not meta:
        raise NoAnnotations("snippet carries no augmentation block")
    env = env_factory(snippet.task, snippet.randomness)
    env.restore(meta["start_snapshot"])
    for a in snippet.actions:
        env.step(a)
    ref = env_factory(snippet.task, snippet.randomness)
    ref.restore(meta["bottleneck_snapshot"])
    return state_distance(env.state, ref.state)


def timesteps_for_share(demo_timesteps: int, share: float) -> int:
    """Augmentation timesteps needed for the requested fraction of the total."""
    if not (0.0 < share < 1.0):
        raise BadConfig("share must lie strictly between 0 and 1")
    if demo_timesteps < 1:
        raise BadConfig("demo_timesteps must be positive")
    return math.ceil(share / (1.0 - share) * demo_timesteps)


def augment_to_share(demos, cfg: AugmentConfig, share: float,
                     env_factory=default_env_factory):
    """Accept snippets until their timesteps reach the requested share.

    The share is measured against the demo corpus: produced share =
    aug / (demo + aug).  Overshoot is at most one snippet's length.
    """
    demo_steps = sum(len(t) for t in demos)
    target = timesteps_for_share(demo_steps, share)
    snippets, report = [], AugmentReport()
    got = 0
    for category, snippet in _snippet_stream(demos, cfg, env_factory):
        report.count(category)
        if snippet is not None:
            snippets.append(snippet)
            got += len(snippet)
            if got >= target:
                return snippets, report
    raise AugmentBudgetExceeded(
        f"exhausted {report.attempts} attempts at {got}/{target} augmentation "
        f"timesteps; raise attempt_budget or lower the share")
