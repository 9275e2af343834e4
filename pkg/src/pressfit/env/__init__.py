"""Deterministic kinematic insertion environments."""

from .expert import ScriptedExpert
from .tasks import MAX_PARTS, TASKS, TaskSpec, get_task, load_task
from .world import (ACTION_DIM, DPOS_MAX, DROT_MAX, DT, GRASP_EPS, OBS_DIM,
                    PROPRIO_DIM, KinematicEnv, WorldState, make_action,
                    split_action, state_distance)

__all__ = [
    "ACTION_DIM", "DPOS_MAX", "DROT_MAX", "DT", "GRASP_EPS", "MAX_PARTS",
    "OBS_DIM", "PROPRIO_DIM", "TASKS", "KinematicEnv", "ScriptedExpert",
    "TaskSpec", "WorldState", "get_task", "load_task", "make_action",
    "split_action", "state_distance",
]
