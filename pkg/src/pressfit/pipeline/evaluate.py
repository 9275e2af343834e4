"""Policy evaluation on seeded rollouts.

Episodes run in lockstep across a batch of environment instances so the
policy's sampler sees one batched call per inference; each environment then
executes the first act_horizon actions of its chunk before the next inference.
Successful episodes can be persisted as source="rollout" trajectories for
later ingestion.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import MlpPolicy
from ..data import Trajectory, save_trajectory
from ..env import OBS_DIM, KinematicEnv, get_task
from ..errors import CheckpointMismatch, InvalidAction
from ..models import DiffusionPolicy
from .. import nn

# the policy's action-sampling rng is derived from (seed, this tag) so it
# never collides with the per-episode environment seed stream
_ACT_STREAM = 0xAC7


def episode_seeds(seed: int, n: int) -> list:
    """Deterministic per-episode environment seeds for an evaluation run."""
    state = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [int(s) for s in state]


def load_policy(path, dtype=np.float32):
    """Load a policy checkpoint of either kind, dispatching on its metadata."""
    try:
        _, meta = nn.load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {e}") from e
    kind = meta.get("policy")
    if kind == "diffusion":
        return DiffusionPolicy.load(path, dtype=dtype)
    if kind == "mlp":
        return MlpPolicy.load(path, dtype=dtype)
    raise CheckpointMismatch(f"checkpoint {path} holds unknown policy kind {kind!r}")


def policy_chunking(policy):
    ck = getattr(policy, "chunking", None)
    return ck if ck is not None else policy.spec.chunking


@dataclass(frozen=True)
class EvalEpisode:
    seed: int
    success: bool
    length: int


@dataclass
class EvalReport:
    """Per-policy evaluation outcome; rate is successes/n exactly."""
    task: str
    n_rollouts: int
    successes: int
    episodes: list

    def __post_init__(self):
        if self.n_rollouts != len(self.episodes):
            raise ValueError("episode count disagrees with n_rollouts")
        if self.successes != sum(1 for e in self.episodes if e.success):
            raise ValueError("success count disagrees with episode records")

    @property
    def rate(self) -> float:
        return self.successes / self.n_rollouts

    def as_dict(self) -> dict:
        return {"task": self.task, "n_rollouts": self.n_rollouts,
                "successes": self.successes, "rate": self.rate,
                "episodes": [{"seed": e.seed, "success": e.success,
                              "length": e.length} for e in self.episodes]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        eps = [EvalEpisode(int(e["seed"]), bool(e["success"]), int(e["length"]))
               for e in d["episodes"]]
        return cls(task=d["task"], n_rollouts=int(d["n_rollouts"]),
                   successes=int(d["successes"]), episodes=eps)


def aggregate_reports(reports) -> dict:
    """Mean and max success rate across one report per trained seed."""
    rates = [r.rate for r in reports]
    if not rates:
        raise ValueError("no reports to aggregate")
    return {"n_policies": len(rates), "mean_rate": float(np.mean(rates)),
            "max_rate": float(max(rates))}


@dataclass
class EvalResult:
    report: EvalReport
    successes: list = field(default_factory=list)   # Trajectory objects
    paths: list = field(default_factory=list)


def evaluate(policy, task: str = "one_peg", n_rollouts: int = 50, seed: int = 0,
             randomness: str = "low", save_root=None, n_steps=None,
             mode_samples: int = 1) -> EvalResult:
    """Roll out a policy (object or checkpoint path) and report success.

    Each episode gets its own environment seed; an InvalidAction from the
    policy ends that episode as a failure.  With save_root set, successful
    episodes are written as source="rollout" files.  mode_samples > 1 asks a
    sampling policy for that many candidate chunks per inference and executes
    the highest-density one; policies without a sampler ignore it.
    """
    if isinstance(policy, (str, Path)):
        policy = load_policy(policy)
    spec = getattr(policy, "spec", None)
    if spec is not None and (spec.obs_dim != OBS_DIM):
        raise CheckpointMismatch(
            f"policy expects {spec.obs_dim}-dim observations, task emits {OBS_DIM}")
    task_spec = get_task(task, randomness)
    t_act = policy_chunking(policy).act_horizon
    seeds = episode_seeds(seed, n_rollouts)
    act_rng = np.random.default_rng(np.random.SeedSequence([seed, _ACT_STREAM]))

    envs = [KinematicEnv(task_spec) for _ in range(n_rollouts)]
    for env, s in zip(envs, seeds):
        env.reset(s)
    obs_log = [[] for _ in range(n_rollouts)]
    act_log = [[] for _ in range(n_rollouts)]
    failed = [False] * n_rollouts

    alive = list(range(n_rollouts))
    while alive:
        obs_batch = np.stack([envs[i].observe() for i in alive])
        kw = {} if n_steps is None else {"n_steps": n_steps}
        if mode_samples != 1:
            kw["mode_samples"] = mode_samples
        chunks = policy.act_batch(obs_batch, act_rng, **kw)
        still = []
        for row, i in enumerate(alive):
            env = envs[i]
            for t in range(t_act):
                action = np.asarray(chunks[row, t], dtype=np.float64)
                obs_log[i].append(env.observe())
                try:
                    env.step(action)
                except InvalidAction:
                    obs_log[i].pop()
                    failed[i] = True
                    break
                act_log[i].append(action)
                if env.done:
                    break
            if not failed[i] and not env.done:
                still.append(i)
        alive = still

    episodes, rollouts, paths = [], [], []
    for i, env in enumerate(envs):
        won = (not failed[i]) and env.is_success()
        episodes.append(EvalEpisode(seed=seeds[i], success=won,
                                    length=env.state.step_count))
        if won:
            traj = Trajectory(task=task, source="rollout", seed=seeds[i],
                              success=True, randomness=randomness,
                              observations=np.array(obs_log[i]),
                              actions=np.array(act_log[i]))
            rollouts.append(traj)
            if save_root is not None:
                paths.append(save_trajectory(traj, save_root))
    report = EvalReport(task=task, n_rollouts=n_rollouts,
                        successes=len(rollouts), episodes=episodes)
    return EvalResult(report=report, successes=rollouts, paths=paths)
