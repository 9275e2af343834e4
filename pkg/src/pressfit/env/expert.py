"""Scripted demonstration policy.

A waypoint state machine per active part: hover above the grasp point,
descend, close, lift, carry over the receptacle, align yaw, drop to a
pre-insert pose, push in until the snap, release. Waypoints get small
seeded jitter so demonstrations are not identical; the align and insert
targets are computed exactly from the grasp attachment so insertion always
lands inside the receptacle tolerance.

The first step of each pregrasp and preinsert phase is flagged as a
bottleneck; those are the states the backward augmenter funnels toward.

Emitted actions are the rate-limited reachable pose for this control step,
not the raw waypoint, so recorded actions stay smooth in the state.
"""

from __future__ import annotations

import numpy as np

from .. import geometry as geo
from ..errors import NoPlan
from .tasks import SQUARE, TaskSpec
from .world import DPOS_MAX, DROT_MAX, OPEN_WIDTH, WorldState, make_action

PHASES = ("hover", "pregrasp", "grasp", "lift", "transit", "align", "preinsert", "insert", "release")
BOTTLENECK_PHASES = ("pregrasp", "preinsert")

HOVER_DZ = 0.06
PRE_INSERT_DZ = 0.025
Z_TRANSIT = 0.13
POS_TOL = 0.002
ANG_TOL = 0.03

# per-phase waypoint jitter sigma (meters); precision phases stay exact
JITTER = {"hover": 0.004, "pregrasp": 0.0015, "lift": 0.004, "transit": 0.004,
          "preinsert": 0.0015}

# slower speed caps near contact, and a short hold once a precision waypoint
# is reached: oversampling the critical approach and settling before the
# gripper event is what lets a policy trained on these demos land the event
# from its own slightly-off states
SLOW_DPOS = {"pregrasp": 0.010, "grasp": 0.010, "preinsert": 0.010, "insert": 0.006}
SETTLE_STEPS = {"pregrasp": 2, "preinsert": 2}


def _reduced_yaw(yaw: float, period: float) -> float:
    return yaw - period * round(yaw / period)


class ScriptedExpert:
    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        rng = np.random.default_rng(seed)
        # fixed draw order: one offset per (part, phase), whether used or not
        self._jitter = {}
        for pi in range(len(task.parts)):
            for ph in PHASES:
                self._jitter[(pi, ph)] = rng.normal(0.0, JITTER.get(ph, 0.0), size=3)
        self._part_idx: int | None = None
        self._phase = "hover"
        self._settle = 0
        self._last_emitted: tuple | None = None

    # -- helpers ----------------------------------------------------------

    def _current_part(self, state: WorldState) -> int:
        for i, p in enumerate(state.parts):
            if p.active and not p.assembled:
                return i
        raise NoPlan("all active parts are assembled")

    def _grasp_quat(self, state: WorldState, pi: int) -> np.ndarray:
        part = state.parts[pi]
        if part.kind == SQUARE:
            return geo.quat_from_axis_angle([0, 0, 1], _reduced_yaw(geo.quat_yaw(part.quat), np.pi / 2))
        return geo.quat_identity()

    def _part_target_quat(self, state: WorldState, pi: int) -> np.ndarray:
        """Receptacle orientation, choosing the symmetric twin closest to the
        part's current yaw so the align rotation stays short."""
        recep = self.task.receptacles[self._recep_idx(state, pi)]
        part = state.parts[pi]
        if recep.symmetry == 0:
            return geo.quat_from_axis_angle([0, 0, 1], geo.quat_yaw(part.quat))
        best, best_d = None, np.inf
        for k in range(recep.symmetry):
            cand = geo.quat_from_axis_angle([0, 0, 1], recep.yaw + 2 * np.pi * k / recep.symmetry)
            d = geo.quat_geodesic(part.quat, cand)
            if d < best_d:
                best, best_d = cand, d
        return best

    def _recep_idx(self, state: WorldState, pi: int) -> int:
        return sum(1 for p in state.parts[:pi] if p.active)

    def _ee_for_part_pose(self, state: WorldState, pi: int, part_pos, part_quat):
        """EE pose that places the held part at the requested pose."""
        rel_pos, rel_quat = state.parts[pi].attached
        inv = geo.Pose(rel_pos, rel_quat).inverse()
        target = geo.Pose(np.asarray(part_pos, dtype=np.float64), part_quat).compose(inv)
        return target.position, target.quat

    # -- the state machine ------------------------------------------------

    def act(self, state: WorldState):
        """Returns (action, phase, bottleneck_flag) for the given state."""
        pi = self._current_part(state)
        if pi != self._part_idx:
            self._part_idx = pi
            self._set_phase("hover")
        part = state.parts[pi]
        # resynchronize if the world disagrees with the stored phase
        carry = self._phase in ("lift", "transit", "align", "preinsert", "insert")
        if carry and part.attached is None:
            self._set_phase("hover")
        if self._phase in ("hover", "pregrasp", "grasp") and part.attached is not None:
            self._set_phase("lift")

        for _ in range(len(PHASES)):
            target_pos, target_quat, grip = self._phase_target(state, pi)
            if self._phase_done(state, pi, target_pos, target_quat):
                self._advance()
                continue
            break
        bottleneck = (self._phase in BOTTLENECK_PHASES
                      and self._last_emitted != (pi, self._phase))
        self._last_emitted = (pi, self._phase)
        step_pos, step_quat = self._step_toward(state, target_pos, target_quat,
                                                SLOW_DPOS.get(self._phase, DPOS_MAX))
        return make_action(step_pos, step_quat, grip), self._phase, bottleneck

    def _step_toward(self, state: WorldState, target_pos, target_quat, cap: float):
        """Commanded pose for this control step: the waypoint, rate-limited
        exactly the way the simulator limits it (tighter in precision
        phases).  Emitting the reachable pose instead of the raw waypoint
        keeps recorded actions smooth in the state, which is what regression
        on demonstrations needs."""
        delta = np.asarray(target_pos, dtype=np.float64) - state.ee_pos
        dist = float(np.linalg.norm(delta))
        if dist <= cap:
            pos = np.asarray(target_pos, dtype=np.float64).copy()
        else:
            pos = state.ee_pos + delta * (cap / dist)
        for ax, (lo, hi) in enumerate(self.task.workspace):
            pos[ax] = min(max(pos[ax], lo), hi)
        ang = geo.quat_geodesic(state.ee_quat, target_quat)
        if ang <= DROT_MAX:
            quat = target_quat
        else:
            quat = geo.quat_normalize(geo.slerp(state.ee_quat, target_quat, DROT_MAX / ang))
        return pos, quat

    def _phase_target(self, state: WorldState, pi: int):
        part = state.parts[pi]
        spec = self.task.parts[pi]
        jit = self._jitter[(pi, self._phase)]
        grasp_pt = part.grasp_point(spec.grasp_dz)
        if self._phase == "hover":
            return grasp_pt + np.array([0, 0, HOVER_DZ]) + jit, self._grasp_quat(state, pi), -1.0
        if self._phase == "pregrasp":
            return grasp_pt + jit, self._grasp_quat(state, pi), -1.0
        if self._phase == "grasp":
            # pulse open if a close already happened but nothing was caught
            grip = -1.0 if (state.gripper_closed and part.attached is None) else 1.0
            return grasp_pt + self._jitter[(pi, "pregrasp")], self._grasp_quat(state, pi), grip
        if self._phase == "lift":
            return np.array([state.ee_pos[0], state.ee_pos[1], Z_TRANSIT + jit[2]]), state.ee_quat.copy(), 1.0
        if self._phase == "transit":
            recep = self.task.receptacles[self._recep_idx(state, pi)]
            offset = part.pos[:2] - state.ee_pos[:2]
            xy = np.asarray(recep.position[:2]) - offset
            return np.array([xy[0] + jit[0], xy[1] + jit[1], Z_TRANSIT]), state.ee_quat.copy(), 1.0
        if self._phase == "align":
            _, quat = self._ee_for_part_pose(state, pi, part.pos, self._part_target_quat(state, pi))
            return state.ee_pos.copy(), quat, 1.0
        if self._phase == "preinsert":
            recep = self.task.receptacles[self._recep_idx(state, pi)]
            part_pos = np.asarray(recep.position) + np.array([0, 0, PRE_INSERT_DZ])
            pos, quat = self._ee_for_part_pose(state, pi, part_pos, self._part_target_quat(state, pi))
            return pos + jit, quat, 1.0
        if self._phase == "insert":
            recep = self.task.receptacles[self._recep_idx(state, pi)]
            pos, quat = self._ee_for_part_pose(state, pi, np.asarray(recep.position),
                                               self._part_target_quat(state, pi))
            return pos, quat, 1.0
        # release: let go and retreat upward
        return np.array([state.ee_pos[0], state.ee_pos[1], Z_TRANSIT]), state.ee_quat.copy(), -1.0

    def _phase_done(self, state: WorldState, pi: int, target_pos, target_quat) -> bool:
        part = state.parts[pi]
        pos_ok = float(np.linalg.norm(state.ee_pos - target_pos)) < POS_TOL
        ang_ok = geo.quat_geodesic(state.ee_quat, target_quat) < ANG_TOL
        if self._phase == "grasp":
            return part.attached is not None
        if self._phase == "insert":
            return part.assembled
        if self._phase == "lift":
            return abs(state.ee_pos[2] - target_pos[2]) < 0.003
        if self._phase == "transit":
            return float(np.linalg.norm(state.ee_pos[:2] - target_pos[:2])) < POS_TOL
        if self._phase == "align":
            return ang_ok
        if self._phase == "release":
            return state.gripper_width >= OPEN_WIDTH - 1e-9 and state.ee_pos[2] > Z_TRANSIT - 0.005
        if not (pos_ok and ang_ok):
            return False
        # precision waypoints hold position a couple of frames before the
        # next phase's gripper event
        if self._settle < SETTLE_STEPS.get(self._phase, 0):
            self._settle += 1
            return False
        return True

    def _set_phase(self, phase: str):
        self._phase = phase
        self._settle = 0

    def _advance(self):
        self._set_phase(PHASES[min(PHASES.index(self._phase) + 1, len(PHASES) - 1)])
