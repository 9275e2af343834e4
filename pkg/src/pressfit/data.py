"""Trajectory persistence, dataset partitions, normalization, chunk sampling.

One trajectory per JSON file, schema version 1:

    {
      "schema_version": 1,
      "metadata": {"task", "source", "seed", "success", "randomness"},
      "steps": [{"observation": [38 floats], "action": [10 floats]}, ...],
      "bottleneck_indices": [sorted step indices],
      "augmentation": {...}            # optional provenance block, see below
    }

Floats are written in shortest round-trip decimal form, so a load after a
save reproduces every scalar bit-exactly.  Files live under
``<root>/<task>/<source>/<randomness>/<success|failure>/`` and are named
``<source>-<seed>-<content hash>.json``; re-saving identical content is a
no-op, so repeated pipeline runs produce identical trees.

Snippets produced by trajectory augmentation carry an ``augmentation``
block holding the simulator snapshots at the perturbed start and at the
bottleneck plus the forward (disassembly) actions, enough to re-verify the
snippet against the simulator without the original demo.

Loaded datasets are immutable; writers only add files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env.world import ACTION_DIM, OBS_DIM, PROPRIO_DIM
from .errors import BadConfig, EmptyDataset, SchemaViolation, ShapeMismatch

SCHEMA_VERSION = 1
SOURCES = ("teleop", "scripted", "rollout", "augmentation")
RANDOMNESS_TAGS = ("low", "med", "high")

DEMO_SOURCES = ("teleop", "scripted")


@dataclass
class Trajectory:
    task: str
    source: str
    seed: int
    success: bool
    randomness: str
    observations: np.ndarray          # (T, 38) raw units
    actions: np.ndarray               # (T, 10) raw units
    bottleneck_indices: list = field(default_factory=list)
    augmentation: dict | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.bottleneck_indices = [int(i) for i in self.bottleneck_indices]
        self.validate()

    def __len__(self) -> int:
        return self.observations.shape[0]

    def validate(self):
        if self.source not in SOURCES:
            raise SchemaViolation(f"unknown source {self.source!r}", path="metadata.source")
        if self.randomness not in RANDOMNESS_TAGS:
            raise SchemaViolation(f"unknown randomness {self.randomness!r}",
                                  path="metadata.randomness")
        T = self.observations.shape[0]
        if T < 1:
            raise SchemaViolation("trajectory must have at least one step", path="steps")
        if self.observations.shape != (T, OBS_DIM):
            raise SchemaViolation(f"observations must be (T, {OBS_DIM}), got "
                                  f"{self.observations.shape}", path="steps")
        if self.actions.shape != (T, ACTION_DIM):
            raise SchemaViolation(f"actions must be (T, {ACTION_DIM}), got "
                                  f"{self.actions.shape}", path="steps")
        if not np.all(np.isfinite(self.observations)):
            raise SchemaViolation("non-finite observation", path="steps")
        if not np.all(np.isfinite(self.actions)):
            raise SchemaViolation("non-finite action", path="steps")
        prev = -1
        for i in self.bottleneck_indices:
            if i <= prev or i >= T:
                raise SchemaViolation(f"bottleneck indices must be strictly increasing "
                                      f"and < {T}", path="bottleneck_indices")
            prev = i


# -- serialization ---------------------------------------------------------

def _require(mapping, key, path):
    if not isinstance(mapping, dict):
        raise SchemaViolation("expected an object", path=path)
    if key not in mapping:
        raise SchemaViolation(f"missing key {key!r}", path=path)
    return mapping[key]


def _no_extras(mapping, allowed, path):
    extra = set(mapping) - set(allowed)
    if extra:
        raise SchemaViolation(f"unknown keys {sorted(extra)}", path=path)


def _float_list(values, n, path):
    if not isinstance(values, list) or len(values) != n:
        raise SchemaViolation(f"expected {n} numbers", path=path)
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SchemaViolation("expected finite numbers", path=path)
        out.append(float(v))
    return out


def to_document(traj: Trajectory) -> dict:
    traj.validate()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "metadata": {
            "task": traj.task,
            "source": traj.source,
            "seed": int(traj.seed),
            "success": bool(traj.success),
            "randomness": traj.randomness,
        },
        "steps": [{"observation": o.tolist(), "action": a.tolist()}
                  for o, a in zip(traj.observations, traj.actions)],
        "bottleneck_indices": list(traj.bottleneck_indices),
    }
    if traj.augmentation is not None:
        doc["augmentation"] = traj.augmentation
    return doc


def from_document(doc: dict) -> Trajectory:
    if not isinstance(doc, dict):
        raise SchemaViolation("trajectory document must be an object", path="")
    _no_extras(doc, ("schema_version", "metadata", "steps", "bottleneck_indices",
                     "augmentation"), "")
    if _require(doc, "schema_version", "") != SCHEMA_VERSION:
        raise SchemaViolation(f"unsupported schema version {doc['schema_version']!r}",
                              path="schema_version")
    meta = _require(doc, "metadata", "")
    _no_extras(meta, ("task", "source", "seed", "success", "randomness"), "metadata")
    task = _require(meta, "task", "metadata")
    if not isinstance(task, str) or not task:
        raise SchemaViolation("task must be a non-empty string", path="metadata.task")
    seed = _require(meta, "seed", "metadata")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise SchemaViolation("seed must be an integer", path="metadata.seed")
    success = _require(meta, "success", "metadata")
    if not isinstance(success, bool):
        raise SchemaViolation("success must be a boolean", path="metadata.success")
    steps = _require(doc, "steps", "")
    if not isinstance(steps, list) or not steps:
        raise SchemaViolation("steps must be a non-empty list", path="steps")
    obs, act = [], []
    for i, step in enumerate(steps):
        if not isinstance(step, dict):
            raise SchemaViolation("step must be an object", path=f"steps[{i}]")
        _no_extras(step, ("observation", "action"), f"steps[{i}]")
        obs.append(_float_list(_require(step, "observation", f"steps[{i}]"),
                               OBS_DIM, f"steps[{i}].observation"))
        act.append(_float_list(_require(step, "action", f"steps[{i}]"),
                               ACTION_DIM, f"steps[{i}].action"))
    idx = _require(doc, "bottleneck_indices", "")
    if not isinstance(idx, list) or any(isinstance(i, bool) or not isinstance(i, int)
                                        for i in idx):
        raise SchemaViolation("bottleneck_indices must be a list of integers",
                              path="bottleneck_indices")
    aug = doc.get("augmentation")
    if aug is not None and not isinstance(aug, dict):
        raise SchemaViolation("augmentation must be an object", path="augmentation")
    return Trajectory(task=task,
                      source=_require(meta, "source", "metadata"),
                      seed=seed, success=success,
                      randomness=_require(meta, "randomness", "metadata"),
                      observations=np.array(obs), actions=np.array(act),
                      bottleneck_indices=idx, augmentation=aug)


def save_trajectory(traj: Trajectory, root) -> Path:
    """Write one trajectory under the dataset layout; returns the file path.

    The name includes a content hash, so distinct trajectories never collide
    and saving the same trajectory twice writes the same file.
    """
    doc = to_document(traj)
    payload = json.dumps(doc, separators=(",", ":"), allow_nan=False).encode()
    digest = hashlib.sha256(payload).hexdigest()[:12]
    outcome = "success" if traj.success else "failure"
    folder = Path(root) / traj.task / traj.source / traj.randomness / outcome
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / f"{traj.source}-{traj.seed:05d}-{digest}.json"
    path.write_bytes(payload)
    return path


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"not valid JSON: {e}", path=str(path)) from e
    return from_document(doc)


def list_trajectories(root, task=None, source=None, randomness=None,
                      success=None) -> list:
    """Sorted paths of stored trajectories matching the given filters."""
    root = Path(root)
    if not root.exists():
        return []
    out = []
    for p in sorted(root.rglob("*.json")):
        rel = p.relative_to(root).parts
        if len(rel) != 5:
            continue
        t, s, r, outcome = rel[0], rel[1], rel[2], rel[3]
        if task is not None and t != task:
            continue
        if source is not None and s != source:
            continue
        if randomness is not None and r != randomness:
            continue
        if success is not None and outcome != ("success" if success else "failure"):
            continue
        out.append(p)
    return out


# -- partitions ------------------------------------------------------------

@dataclass
class DatasetPartition:
    """Demo / augmentation / rollout collections with merged views."""
    demos: list = field(default_factory=list)        # teleop + scripted
    snippets: list = field(default_factory=list)     # augmentation
    rollouts: list = field(default_factory=list)     # successful rollouts

    @classmethod
    def from_trajectories(cls, trajs) -> "DatasetPartition":
        part = cls()
        for t in trajs:
            if t.source in DEMO_SOURCES:
                part.demos.append(t)
            elif t.source == "augmentation":
                part.snippets.append(t)
            elif t.source == "rollout":
                part.rollouts.append(t)
            else:
                raise SchemaViolation(f"unknown source {t.source!r}", path="metadata.source")
        return part

    def merged(self, demos=True, snippets=True, rollouts=True) -> list:
        out = []
        if demos:
            out.extend(self.demos)
        if snippets:
            out.extend(self.snippets)
        if rollouts:
            out.extend(self.rollouts)
        return out

    def report(self) -> dict:
        def count(trajs):
            return {"trajectories": len(trajs),
                    "timesteps": int(sum(len(t) for t in trajs))}
        demos, snippets, rollouts = count(self.demos), count(self.snippets), count(self.rollouts)
        total_steps = demos["timesteps"] + snippets["timesteps"] + rollouts["timesteps"]
        share = snippets["timesteps"] / total_steps if total_steps else 0.0
        return {"demos": demos, "snippets": snippets, "rollouts": rollouts,
                "total_timesteps": total_steps, "augmentation_share": share}


def load_partition(root, task=None, source=None, randomness=None,
                   success=True) -> DatasetPartition:
    paths = list_trajectories(root, task=task, source=source,
                              randomness=randomness, success=success)
    return DatasetPartition.from_trajectories(load_trajectory(p) for p in paths)


# -- normalization ---------------------------------------------------------

DEGENERATE_SPAN = 1e-9


@dataclass(frozen=True)
class StateNoiseConfig:
    sigma: float = 0.01          # std dev in normalized units, proprio dims only

    def __post_init__(self):
        if self.sigma < 0:
            raise BadConfig("noise sigma must be non-negative")


def inject_proprio_noise(obs_batch: np.ndarray, cfg: StateNoiseConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on the proprioception slice only; copies the input."""
    obs = np.asarray(obs_batch)
    if obs.ndim != 2 or obs.shape[1] < PROPRIO_DIM:
        raise ShapeMismatch(f"need (B, >= {PROPRIO_DIM}) observations, got {obs.shape}")
    out = obs.copy()
    if cfg.sigma > 0:
        out[:, :PROPRIO_DIM] += rng.normal(0.0, cfg.sigma,
                                           size=(obs.shape[0], PROPRIO_DIM))
    return out


@dataclass
class NormStats:
    obs_min: np.ndarray
    obs_max: np.ndarray
    act_min: np.ndarray
    act_max: np.ndarray

    def __post_init__(self):
        self.obs_min = np.asarray(self.obs_min, dtype=np.float64)
        self.obs_max = np.asarray(self.obs_max, dtype=np.float64)
        self.act_min = np.asarray(self.act_min, dtype=np.float64)
        self.act_max = np.asarray(self.act_max, dtype=np.float64)
        if self.obs_min.shape != (OBS_DIM,) or self.obs_max.shape != (OBS_DIM,):
            raise BadConfig("observation stats must have one entry per dimension")
        if self.act_min.shape != (ACTION_DIM,) or self.act_max.shape != (ACTION_DIM,):
            raise BadConfig("action stats must have one entry per dimension")
        if np.any(self.obs_min > self.obs_max) or np.any(self.act_min > self.act_max):
            raise BadConfig("min exceeds max in normalization stats")

    def normalize_obs(self, x):
        return _normalize(x, self.obs_min, self.obs_max)

    def denormalize_obs(self, y):
        return _denormalize(y, self.obs_min, self.obs_max)

    def normalize_act(self, x):
        return _normalize(x, self.act_min, self.act_max)

    def denormalize_act(self, y):
        return _denormalize(y, self.act_min, self.act_max)

    def to_dict(self) -> dict:
        return {"obs_min": self.obs_min.tolist(), "obs_max": self.obs_max.tolist(),
                "act_min": self.act_min.tolist(), "act_max": self.act_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        try:
            return cls(np.asarray(d["obs_min"]), np.asarray(d["obs_max"]),
                       np.asarray(d["act_min"]), np.asarray(d["act_max"]))
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"malformed normalization stats: {e}") from e


def _normalize(x, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    safe = span >= DEGENERATE_SPAN
    return np.where(safe, 2.0 * (x - lo) / np.where(safe, span, 1.0) - 1.0, 0.0)


def _denormalize(y, lo, hi):
    y = np.asarray(y, dtype=np.float64)
    span = hi - lo
    safe = span >= DEGENERATE_SPAN
    return np.where(safe, (y + 1.0) * 0.5 * span + lo, lo)


def fit_norm_stats(trajectories) -> NormStats:
    """Elementwise min/max envelope over every step of every trajectory."""
    trajs = list(trajectories)
    if not trajs:
        raise EmptyDataset("cannot fit normalization stats on an empty dataset")
    obs = np.concatenate([t.observations for t in trajs], axis=0)
    act = np.concatenate([t.actions for t in trajs], axis=0)
    return NormStats(obs.min(axis=0), obs.max(axis=0), act.min(axis=0), act.max(axis=0))


# -- chunked sampling ------------------------------------------------------

@dataclass(frozen=True)
class ChunkingConfig:
    obs_horizon: int = 1       # frames of observation fed to the policy
    pred_horizon: int = 32     # actions predicted per inference
    act_horizon: int = 8       # actions executed before re-planning

    def __post_init__(self):
        if self.obs_horizon < 1:
            raise BadConfig("obs_horizon must be >= 1")
        if not (1 <= self.act_horizon <= self.pred_horizon):
            raise BadConfig("need 1 <= act_horizon <= pred_horizon")


def sample_chunk(traj: Trajectory, t: int, cfg: ChunkingConfig):
    """Observation frame at t and the action chunk t..t+pred_horizon-1.

    Actions past the end of the episode repeat the final action, which keeps
    the commanded pose stationary after the episode finishes.
    """
    T = len(traj)
    if not 0 <= t < T:
        raise IndexError(f"start index {t} outside [0, {T})")
    end = min(t + cfg.pred_horizon, T)
    chunk = traj.actions[t:end]
    if end - t < cfg.pred_horizon:
        pad = np.repeat(traj.actions[-1:], cfg.pred_horizon - (end - t), axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return traj.observations[t].copy(), chunk.copy()


class ChunkDataset:
    """Uniform sampler over (trajectory, start index) pairs, split 90/10.

    The split is by trajectory identity, seeded, so validation chunks never
    overlap training trajectories.  All arrays are normalized once up front;
    batches are plain lookups.
    """

    def __init__(self, trajectories, stats: NormStats, cfg: ChunkingConfig,
                 val_fraction: float = 0.1, split_seed: int = 0):
        trajs = list(trajectories)
        if not trajs:
            raise EmptyDataset("no trajectories to sample from")
        self.cfg = cfg
        self.stats = stats
        # one padded, normalized action array per trajectory, concatenated
        obs_rows, act_rows, obs_starts, act_starts, pair_traj, pair_t = [], [], [], [], [], []
        obs_off = act_off = 0
        for ti, traj in enumerate(trajs):
            T = len(traj)
            obs_rows.append(stats.normalize_obs(traj.observations))
            padded = np.concatenate(
                [traj.actions, np.repeat(traj.actions[-1:], cfg.pred_horizon - 1, axis=0)],
                axis=0)
            act_rows.append(stats.normalize_act(padded))
            obs_starts.append(obs_off)
            act_starts.append(act_off)
            pair_traj.extend([ti] * T)
            pair_t.extend(range(T))
            obs_off += T
            act_off += T + cfg.pred_horizon - 1
        self._obs = np.concatenate(obs_rows, axis=0)
        self._act = np.concatenate(act_rows, axis=0)
        obs_starts = np.asarray(obs_starts)
        act_starts = np.asarray(act_starts)
        pair_traj = np.asarray(pair_traj)
        pair_t = np.asarray(pair_t)
        self._pair_obs_row = obs_starts[pair_traj] + pair_t
        self._pair_act_row = act_starts[pair_traj] + pair_t

        n = len(trajs)
        order = np.random.default_rng(split_seed).permutation(n)
        n_val = int(round(n * val_fraction))
        n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
        val_ids = set(order[:n_val].tolist())
        in_val = np.asarray([ti in val_ids for ti in pair_traj])
        self.train_pairs = np.flatnonzero(~in_val)
        self.val_pairs = np.flatnonzero(in_val)
        self.train_trajectories = [t for i, t in enumerate(trajs) if i not in val_ids]
        self.val_trajectories = [t for i, t in enumerate(trajs) if i in val_ids]

    def _gather(self, pair_idx):
        obs = self._obs[self._pair_obs_row[pair_idx]]
        rows = self._pair_act_row[pair_idx][:, None] + np.arange(self.cfg.pred_horizon)[None, :]
        return obs, self._act[rows]

    def train_batches(self, batch_size: int, rng: np.random.Generator):
        """Endless stream of (obs (B,38), chunks (B,T_p,10)), both in [-1,1]."""
        if len(self.train_pairs) == 0:
            raise EmptyDataset("training split is empty")
        while True:
            idx = rng.integers(0, len(self.train_pairs), size=batch_size)
            yield self._gather(self.train_pairs[idx])

    def val_batches(self, batch_size: int) -> list:
        """Every validation pair exactly once, fixed order."""
        out = []
        for lo in range(0, len(self.val_pairs), batch_size):
            out.append(self._gather(self.val_pairs[lo:lo + batch_size]))
        return out
