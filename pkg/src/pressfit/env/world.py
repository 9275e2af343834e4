"""Quasi-static kinematic world: position-controlled EE, pegs, receptacles.

Dynamics are intentionally simple and exactly reproducible:
  * the EE moves toward the commanded pose, rate-limited per step;
  * a binary gripper grasps the nearest free active part within reach on
    the open->closed transition and drops it upright on closed->open;
  * an attached part snaps into its receptacle the moment it is inside the
    position/orientation tolerance (orientation modulo the part's yaw
    symmetry), detaches, and the task is done when every active part sits;
  * a closed gripper sweeping through a free part's grasp region drags the
    part along the table (so careless closed-gripper motion disturbs the
    scene and honest state checks can catch it).

All randomness lives in reset(); step() is a pure function of (state,
action). snapshot()/restore() round-trip the full state bit-exactly,
including the reset RNG cursor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import geometry as geo
from ..errors import CorruptSnapshot, DegenerateInput, InvalidAction, TaskMismatch
from .tasks import MAX_PARTS, SQUARE, TaskSpec

DT = 0.1                 # control period, seconds
DPOS_MAX = 0.025         # per-step translation cap, meters
DROT_MAX = 0.2           # per-step rotation cap, radians
GRASP_EPS = 0.01         # grasp attach radius, meters
OPEN_WIDTH = 0.08
HOLD_WIDTH = 0.02
ROT_WEIGHT = 0.1         # meters-per-radian weight in state_distance

ACTION_DIM = 10          # pos(3) + rot6d(6) + gripper(1)
OBS_DIM = 38             # proprio(16) + 2 part blocks of 11
PROPRIO_DIM = 16

SNAPSHOT_VERSION = 1


def make_action(position, quat, grip: float) -> np.ndarray:
    a = np.empty(ACTION_DIM)
    a[0:3] = position
    a[3:9] = geo.encode_rot6d(quat)
    a[9] = grip
    return a


def split_action(action) -> tuple[np.ndarray, np.ndarray, float]:
    """Action vector -> (target position, target quat, gripper scalar)."""
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (ACTION_DIM,):
        raise InvalidAction(f"action must have {ACTION_DIM} entries, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidAction("action contains non-finite entries")
    try:
        q = geo.decode_rot6d(a[3:9])
    except DegenerateInput as e:
        raise InvalidAction(f"action orientation is degenerate: {e}") from e
    return a[0:3].copy(), q, float(a[9])


@dataclass
class PartState:
    kind: str
    active: bool
    pos: np.ndarray
    quat: np.ndarray
    attached: tuple | None = None   # (rel_pos, rel_quat) in the EE frame
    assembled: bool = False

    def grasp_point(self, grasp_dz: float) -> np.ndarray:
        return self.pos + geo.quat_rotate(self.quat, np.array([0.0, 0.0, grasp_dz]))

    def copy(self) -> "PartState":
        att = None if self.attached is None else (self.attached[0].copy(), self.attached[1].copy())
        return PartState(self.kind, self.active, self.pos.copy(), self.quat.copy(), att, self.assembled)


@dataclass
class WorldState:
    ee_pos: np.ndarray
    ee_quat: np.ndarray
    ee_target_pos: np.ndarray
    ee_target_quat: np.ndarray
    lin_vel: np.ndarray
    ang_vel: np.ndarray
    gripper_closed: bool
    gripper_width: float
    parts: list
    step_count: int

    def copy(self) -> "WorldState":
        return WorldState(self.ee_pos.copy(), self.ee_quat.copy(),
                          self.ee_target_pos.copy(), self.ee_target_quat.copy(),
                          self.lin_vel.copy(), self.ang_vel.copy(),
                          self.gripper_closed, self.gripper_width,
                          [p.copy() for p in self.parts], self.step_count)


def _check_roster(a: WorldState, b: WorldState):
    if len(a.parts) != len(b.parts):
        raise TaskMismatch(f"part counts differ: {len(a.parts)} vs {len(b.parts)}")
    for i, (pa, pb) in enumerate(zip(a.parts, b.parts)):
        if pa.kind != pb.kind or pa.active != pb.active:
            raise TaskMismatch(f"part {i} differs: {pa.kind}/{pa.active} vs {pb.kind}/{pb.active}")


def state_distance(a: WorldState, b: WorldState) -> float:
    """Worst-case component distance between two states of the same task.

    Rotational terms are weighted by ROT_WEIGHT meters per radian so the
    metric stays in meters.
    """
    _check_roster(a, b)
    terms = [float(np.linalg.norm(a.ee_pos - b.ee_pos)),
             ROT_WEIGHT * geo.quat_geodesic(a.ee_quat, b.ee_quat),
             abs(a.gripper_width - b.gripper_width)]
    for pa, pb in zip(a.parts, b.parts):
        terms.append(float(np.linalg.norm(pa.pos - pb.pos)))
        terms.append(ROT_WEIGHT * geo.quat_geodesic(pa.quat, pb.quat))
    return max(terms)


class KinematicEnv:
    def __init__(self, task: TaskSpec):
        self.task = task
        self.rng = np.random.default_rng(0)
        self.state: WorldState | None = None

    # -- lifecycle --------------------------------------------------------

    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        parts = []
        for spec in self.task.parts:
            x = self.rng.uniform(spec.spawn_center[0] - spec.spawn_half[0],
                                 spec.spawn_center[0] + spec.spawn_half[0])
            y = self.rng.uniform(spec.spawn_center[1] - spec.spawn_half[1],
                                 spec.spawn_center[1] + spec.spawn_half[1])
            yaw = self.rng.uniform(spec.yaw_range[0], spec.yaw_range[1])
            parts.append(PartState(spec.kind, spec.active,
                                   np.array([x, y, spec.rest_z]),
                                   geo.quat_from_axis_angle([0, 0, 1], yaw)))
        home = np.asarray(self.task.ee_home, dtype=np.float64)
        self.state = WorldState(
            ee_pos=home.copy(), ee_quat=geo.quat_identity(),
            ee_target_pos=home.copy(), ee_target_quat=geo.quat_identity(),
            lin_vel=np.zeros(3), ang_vel=np.zeros(3),
            gripper_closed=False, gripper_width=OPEN_WIDTH,
            parts=parts, step_count=0)
        return self.observe()

    @property
    def done(self) -> bool:
        s = self._require_state()
        return self.is_success() or s.step_count >= self.task.episode_cap

    def is_success(self) -> bool:
        s = self._require_state()
        return all(p.assembled for p in s.parts if p.active)

    def _require_state(self) -> WorldState:
        if self.state is None:
            raise RuntimeError("env used before reset()")
        return self.state

    # -- dynamics ---------------------------------------------------------

    def step(self, action) -> tuple[np.ndarray, bool]:
        s = self._require_state()
        target_pos, target_quat, grip = split_action(action)

        old_pos = s.ee_pos.copy()
        old_quat = s.ee_quat.copy()

        # rate-limited translation, then clamp into the workspace box
        delta = target_pos - s.ee_pos
        dist = float(np.linalg.norm(delta))
        new_pos = target_pos if dist <= DPOS_MAX else s.ee_pos + delta * (DPOS_MAX / dist)
        for ax, (lo, hi) in enumerate(self.task.workspace):
            new_pos[ax] = min(max(new_pos[ax], lo), hi)
        s.ee_pos = new_pos

        # rate-limited rotation along the shorter arc
        ang = geo.quat_geodesic(s.ee_quat, target_quat)
        if ang <= DROT_MAX:
            s.ee_quat = target_quat
        else:
            s.ee_quat = geo.quat_normalize(geo.slerp(s.ee_quat, target_quat, DROT_MAX / ang))

        # attached part rides the EE rigidly
        held = self._attached_part()
        if held is not None:
            rel_pos, rel_quat = held.attached
            held.pos = s.ee_pos + geo.quat_rotate(s.ee_quat, rel_pos)
            held.quat = geo.quat_multiply(s.ee_quat, rel_quat)

        # a closed gripper whose motion segment passes through a free part's
        # grasp region shoves the part along the table by the EE's xy shift
        if s.gripper_closed:
            shift = s.ee_pos[:2] - old_pos[:2]
            if float(np.abs(shift).sum()) > 0.0:
                for part, spec in zip(s.parts, self.task.parts):
                    if part.active and part.attached is None and not part.assembled:
                        if _segment_distance(part.grasp_point(spec.grasp_dz), old_pos, s.ee_pos) < GRASP_EPS:
                            part.pos[0] = min(max(part.pos[0] + shift[0], self.task.workspace[0][0]),
                                              self.task.workspace[0][1])
                            part.pos[1] = min(max(part.pos[1] + shift[1], self.task.workspace[1][0]),
                                              self.task.workspace[1][1])

        # insertion snap: attached part inside its receptacle tolerance
        if held is not None and not held.assembled:
            ridx = self._receptacle_index(held)
            recep = self.task.receptacles[ridx]
            rq = geo.quat_from_axis_angle([0, 0, 1], recep.yaw)
            pos_err = float(np.linalg.norm(held.pos - np.asarray(recep.position)))
            ang_err = geo.yaw_symmetric_angle(rq, held.quat, recep.symmetry)
            if pos_err <= recep.tol_pos and ang_err <= recep.tol_ang:
                held.pos = np.asarray(recep.position, dtype=np.float64).copy()
                held.quat = rq
                held.assembled = True
                held.attached = None
                s.gripper_width = 0.0 if s.gripper_closed else OPEN_WIDTH

        # gripper transition on the command's sign
        want_closed = grip > 0.0
        if want_closed and not s.gripper_closed:
            grabbed = self._try_grasp()
            s.gripper_width = HOLD_WIDTH if grabbed else 0.0
        elif not want_closed and s.gripper_closed:
            self._drop_held()
            s.gripper_width = OPEN_WIDTH
        s.gripper_closed = want_closed

        # realized velocities by finite difference
        s.lin_vel = (s.ee_pos - old_pos) / DT
        s.ang_vel = geo.quat_to_rotvec(geo.quat_multiply(s.ee_quat, geo.quat_conjugate(old_quat))) / DT

        s.ee_target_pos = target_pos
        s.ee_target_quat = target_quat
        s.step_count += 1
        return self.observe(), self.done

    def _attached_part(self) -> PartState | None:
        for p in self._require_state().parts:
            if p.attached is not None:
                return p
        return None

    def _receptacle_index(self, part: PartState) -> int:
        active_idx = 0
        for p in self._require_state().parts:
            if p is part:
                return active_idx
            if p.active:
                active_idx += 1
        raise TaskMismatch("part not in this task's roster")

    def _try_grasp(self) -> bool:
        s = self._require_state()
        best, best_d = None, GRASP_EPS
        for part, spec in zip(s.parts, self.task.parts):
            if part.active and part.attached is None and not part.assembled:
                d = float(np.linalg.norm(part.grasp_point(spec.grasp_dz) - s.ee_pos))
                if d < best_d:
                    best, best_d = part, d
        if best is None:
            return False
        ee_inv_quat = geo.quat_conjugate(s.ee_quat)
        rel_pos = geo.quat_rotate(ee_inv_quat, best.pos - s.ee_pos)
        rel_quat = geo.quat_multiply(ee_inv_quat, best.quat)
        best.attached = (rel_pos, rel_quat)
        return True

    def _drop_held(self):
        held = self._attached_part()
        if held is None:
            return
        spec = next(sp for p, sp in zip(self._require_state().parts, self.task.parts) if p is held)
        yaw = geo.quat_yaw(held.quat)
        held.pos = np.array([held.pos[0], held.pos[1], spec.rest_z])
        held.quat = geo.quat_from_axis_angle([0, 0, 1], yaw)
        held.attached = None

    # -- observation ------------------------------------------------------

    def observe(self) -> np.ndarray:
        s = self._require_state()
        obs = np.zeros(OBS_DIM)
        obs[0:3] = s.ee_pos
        obs[3:9] = geo.encode_rot6d(s.ee_quat)
        obs[9:12] = s.lin_vel
        obs[12:15] = s.ang_vel
        obs[15] = s.gripper_width
        for i in range(MAX_PARTS):
            base = PROPRIO_DIM + 11 * i
            if i < len(s.parts):
                p = s.parts[i]
                obs[base:base + 3] = p.pos
                obs[base + 3:base + 9] = geo.encode_rot6d(p.quat)
                obs[base + 9] = 1.0 if p.kind == SQUARE else 0.0
                obs[base + 10] = 1.0 if p.active else 0.0
        return obs

    # -- snapshots --------------------------------------------------------

    def snapshot(self) -> dict:
        s = self._require_state()
        return {
            "version": SNAPSHOT_VERSION,
            "task": self.task.name,
            "ee_pos": s.ee_pos.tolist(),
            "ee_quat": s.ee_quat.tolist(),
            "ee_target_pos": s.ee_target_pos.tolist(),
            "ee_target_quat": s.ee_target_quat.tolist(),
            "lin_vel": s.lin_vel.tolist(),
            "ang_vel": s.ang_vel.tolist(),
            "gripper_closed": s.gripper_closed,
            "gripper_width": s.gripper_width,
            "step_count": s.step_count,
            "parts": [{
                "kind": p.kind, "active": p.active,
                "pos": p.pos.tolist(), "quat": p.quat.tolist(),
                "attached": None if p.attached is None else
                            {"pos": p.attached[0].tolist(), "quat": p.attached[1].tolist()},
                "assembled": p.assembled,
            } for p in s.parts],
            "rng": self.rng.bit_generator.state,
        }

    def restore(self, snap: dict):
        try:
            if snap["version"] != SNAPSHOT_VERSION:
                raise CorruptSnapshot(f"unsupported snapshot version {snap['version']}")
            if snap["task"] != self.task.name:
                raise TaskMismatch(f"snapshot is for task {snap['task']!r}, env runs {self.task.name!r}")
            if len(snap["parts"]) != len(self.task.parts):
                raise CorruptSnapshot("snapshot part count does not match the task")
            parts = []
            for p in snap["parts"]:
                att = p["attached"]
                parts.append(PartState(
                    p["kind"], bool(p["active"]),
                    _vec(p["pos"], 3), _vec(p["quat"], 4),
                    None if att is None else (_vec(att["pos"], 3), _vec(att["quat"], 4)),
                    bool(p["assembled"])))
            state = WorldState(
                ee_pos=_vec(snap["ee_pos"], 3), ee_quat=_vec(snap["ee_quat"], 4),
                ee_target_pos=_vec(snap["ee_target_pos"], 3),
                ee_target_quat=_vec(snap["ee_target_quat"], 4),
                lin_vel=_vec(snap["lin_vel"], 3), ang_vel=_vec(snap["ang_vel"], 3),
                gripper_closed=bool(snap["gripper_closed"]),
                gripper_width=float(snap["gripper_width"]),
                parts=parts, step_count=int(snap["step_count"]))
            rng = np.random.default_rng()
            rng.bit_generator.state = snap["rng"]
        except (TaskMismatch, CorruptSnapshot):
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptSnapshot(f"malformed snapshot: {e}") from e
        self.state = state
        self.rng = rng


def _segment_distance(point: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    seg = b - a
    denom = float(seg @ seg)
    if denom == 0.0:
        return float(np.linalg.norm(point - a))
    t = min(max(float((point - a) @ seg) / denom, 0.0), 1.0)
    return float(np.linalg.norm(point - (a + t * seg)))


def _vec(values, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (n,):
        raise CorruptSnapshot(f"expected a length-{n} vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise CorruptSnapshot("snapshot contains non-finite values")
    return arr
