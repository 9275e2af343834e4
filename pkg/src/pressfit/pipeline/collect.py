"""Scripted demonstration collection.

Runs the scripted expert in a fresh environment per episode, keeps only
successful episodes, and auto-annotates bottleneck indices from the expert's
phase flags.  Failed episodes are discarded and retried with the next seed,
up to an attempt budget.
"""

import numpy as np

from ..data import Trajectory, save_trajectory
from ..env import KinematicEnv, ScriptedExpert, get_task
from ..errors import BadConfig, ExpertFailureBudgetExceeded


def run_expert_episode(task: str, seed: int, randomness: str = "low") -> Trajectory:
    """One expert episode, whatever the outcome.

    Observations are recorded before each action; bottleneck indices mark the
    action step on which the expert entered a pre-insertion phase.
    """
    env = KinematicEnv(get_task(task, randomness))
    env.reset(seed)
    expert = ScriptedExpert(env.task, seed)
    obs, acts, marks = [], [], []
    while not env.done:
        o = env.observe()
        action, _, flag = expert.act(env.state)
        env.step(action)
        obs.append(o)
        acts.append(action)
        if flag:
            marks.append(len(acts) - 1)
    return Trajectory(task=task, source="scripted", seed=seed,
                      success=env.is_success(), randomness=randomness,
                      observations=np.array(obs), actions=np.array(acts),
                      bottleneck_indices=marks)


def collect_demos(task: str, n: int, seed: int = 0, randomness: str = "low",
                  root=None, attempt_budget=None):
    """Collect n successful expert demos; returns (trajectories, paths).

    Episode seeds run consecutively from `seed`; failures burn an attempt but
    are not kept.  The budget counts episodes attempted, default max(2n, n+10).
    With `root` set, each demo is written to the dataset layout and the file
    paths are returned alongside; otherwise paths is empty.
    """
    if n < 1:
        raise BadConfig("need n >= 1 demos")
    budget = attempt_budget if attempt_budget is not None else max(2 * n, n + 10)
    demos, paths = [], []
    attempt = 0
    while len(demos) < n:
        if attempt >= budget:
            raise ExpertFailureBudgetExceeded(
                f"{attempt} episodes attempted, only {len(demos)}/{n} succeeded")
        traj = run_expert_episode(task, seed + attempt, randomness)
        attempt += 1
        if not traj.success:
            continue
        demos.append(traj)
        if root is not None:
            paths.append(save_trajectory(traj, root))
    return demos, paths
