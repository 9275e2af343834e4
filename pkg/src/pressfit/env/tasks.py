"""Task definitions for the insertion benchmark.

A task is a fixed arena: a table plane at z=0, up to two pegs with spawn
regions on the left half, and one receptacle per active peg on the right
half. Numbers are meters and radians. Built-in tasks: one_peg, two_peg,
square_peg. Custom tasks load from JSON with the same field names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from ..errors import BadConfig

ROUND, SQUARE = "round", "square"

# observation layout always reserves two part blocks
MAX_PARTS = 2

RANDOMNESS_SCALE = {"low": 1.0, "med": 1.6, "high": 2.2}


@dataclass(frozen=True)
class PartSpec:
    kind: str                      # "round" | "square"
    active: bool = True
    rest_z: float = 0.03           # center height standing on the table
    grasp_dz: float = 0.025        # grasp point above the part center
    spawn_center: tuple = (-0.12, -0.08)
    spawn_half: tuple = (0.04, 0.04)
    yaw_range: tuple = (-3.141592653589793, 3.141592653589793)


@dataclass(frozen=True)
class ReceptacleSpec:
    position: tuple                # assembled part center
    yaw: float = 0.0
    tol_pos: float = 0.005
    tol_ang: float = 0.1
    symmetry: int = 0              # 0 = any yaw fits; n = n discrete yaws


@dataclass(frozen=True)
class TaskSpec:
    name: str
    parts: tuple
    receptacles: tuple             # index-aligned with active parts
    episode_cap: int = 400
    randomness: str = "low"
    workspace: tuple = ((-0.30, 0.30), (-0.30, 0.30), (0.0, 0.30))
    ee_home: tuple = (0.0, 0.0, 0.15)

    def __post_init__(self):
        if self.randomness not in RANDOMNESS_SCALE:
            raise BadConfig(f"unknown randomness level {self.randomness!r}")
        if not (1 <= len(self.parts) <= MAX_PARTS):
            raise BadConfig(f"task needs 1..{MAX_PARTS} parts, got {len(self.parts)}")
        n_active = sum(1 for p in self.parts if p.active)
        if len(self.receptacles) != n_active:
            raise BadConfig(f"{n_active} active parts but {len(self.receptacles)} receptacles")
        if self.episode_cap < 1:
            raise BadConfig("episode_cap must be positive")
        for p in self.parts:
            if p.kind not in (ROUND, SQUARE):
                raise BadConfig(f"unknown part kind {p.kind!r}")

    def with_randomness(self, level: str) -> "TaskSpec":
        if level not in RANDOMNESS_SCALE:
            raise BadConfig(f"unknown randomness level {level!r}")
        s = RANDOMNESS_SCALE[level]
        parts = tuple(replace(p, spawn_half=(p.spawn_half[0] * s, p.spawn_half[1] * s))
                      for p in self.parts)
        return replace(self, parts=parts, randomness=level)


def _builtin() -> dict:
    one_peg = TaskSpec(
        name="one_peg",
        parts=(PartSpec(ROUND),),
        receptacles=(ReceptacleSpec(position=(0.14, 0.10, 0.02), symmetry=0),),
        episode_cap=400,
    )
    two_peg = TaskSpec(
        name="two_peg",
        parts=(
            PartSpec(ROUND, spawn_center=(-0.12, -0.10), spawn_half=(0.035, 0.035)),
            PartSpec(ROUND, spawn_center=(-0.12, 0.10), spawn_half=(0.035, 0.035)),
        ),
        receptacles=(
            ReceptacleSpec(position=(0.14, 0.08, 0.02), symmetry=0),
            ReceptacleSpec(position=(0.14, -0.08, 0.02), symmetry=0),
        ),
        episode_cap=800,
    )
    square_peg = TaskSpec(
        name="square_peg",
        parts=(PartSpec(SQUARE),),
        receptacles=(ReceptacleSpec(position=(0.14, 0.10, 0.02), symmetry=4),),
        episode_cap=400,
    )
    return {t.name: t for t in (one_peg, two_peg, square_peg)}


TASKS = _builtin()


def get_task(name: str, randomness: str | None = None) -> TaskSpec:
    if name not in TASKS:
        raise BadConfig(f"unknown task {name!r}; built-ins: {sorted(TASKS)}")
    task = TASKS[name]
    return task.with_randomness(randomness) if randomness else task


def load_task(path) -> TaskSpec:
    """Read a TaskSpec from a JSON file with the dataclass field names."""
    with open(path) as f:
        raw = json.load(f)
    try:
        parts = tuple(PartSpec(**{**p, "spawn_center": tuple(p.get("spawn_center", (-0.12, -0.08))),
                                  "spawn_half": tuple(p.get("spawn_half", (0.04, 0.04))),
                                  "yaw_range": tuple(p.get("yaw_range", (-3.141592653589793, 3.141592653589793)))})
                      for p in raw["parts"])
        receptacles = tuple(ReceptacleSpec(**{**r, "position": tuple(r["position"])})
                            for r in raw["receptacles"])
        extras = {k: raw[k] for k in ("episode_cap", "randomness") if k in raw}
        if "workspace" in raw:
            extras["workspace"] = tuple(tuple(ax) for ax in raw["workspace"])
        if "ee_home" in raw:
            extras["ee_home"] = tuple(raw["ee_home"])
        return TaskSpec(name=raw["name"], parts=parts, receptacles=receptacles, **extras)
    except (KeyError, TypeError) as e:
        raise BadConfig(f"malformed task file {path}: {e}") from e
