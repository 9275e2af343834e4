"""Collect-and-infer rounds, multitask mixing, and the demo-budget sweep.

A round trains k policies from different init seeds on the same data, rolls
each one out, pools the successful rollouts, ingests up to a cap of them
(seeded uniform subsample when over the cap), and retrains the best seed from
scratch on the merged dataset.  When no rollout succeeds the round falls back
to returning the best initial policy unchanged.
"""

from dataclasses import dataclass, replace

import numpy as np

from ..data import ChunkDataset, fit_norm_stats
from ..env import OBS_DIM
from ..errors import BadConfig, LayoutMismatch, NoSuccessfulRollouts
from ..training import train
from .evaluate import evaluate, policy_chunking

NO_ROLLOUTS = "no-successful-rollouts"

# §IV.B bootstrap recipe: 10 demos seed the round, up to 90 successful
# rollouts are ingested, and 100 augmentation snippets join the final set
BOOTSTRAP_DEMOS = 10
BOOTSTRAP_ROLLOUT_CAP = 90
BOOTSTRAP_AUGMENTATIONS = 100


@dataclass(frozen=True)
class RoundConfig:
    task: str = "one_peg"
    randomness: str = "low"
    seeds: tuple = (0, 1, 2)          # init seeds, one policy each
    rollouts_per_policy: int = 50
    ingest_cap: int = 50
    eval_seed: int = 10_000
    select_seed: int = 0              # rollout subsample rng
    n_steps: int | None = None        # sampler steps override for eval

    def __post_init__(self):
        if not self.seeds:
            raise BadConfig("need at least one policy seed")
        if self.rollouts_per_policy < 1:
            raise BadConfig("rollouts_per_policy must be positive")
        if self.ingest_cap < 0:
            raise BadConfig("ingest_cap must be >= 0")


def bootstrap_preset(task: str = "one_peg", seeds=(0, 1, 2)) -> RoundConfig:
    return RoundConfig(task=task, seeds=tuple(seeds),
                       ingest_cap=BOOTSTRAP_ROLLOUT_CAP)


@dataclass
class RoundResult:
    reports: dict                      # init seed -> EvalReport
    best_seed: int
    best_policy: object
    ingested: list                     # rollout Trajectory objects kept
    final_policy: object
    error: str | None = None           # NO_ROLLOUTS when nothing succeeded
    final_dataset_size: int = 0


def select_rollouts(pool, cap: int, seed: int) -> list:
    """Up to cap rollouts from the pool, seeded uniform without replacement."""
    if not pool:
        raise NoSuccessfulRollouts("no successful rollouts to ingest")
    if len(pool) <= cap:
        return list(pool)
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(pool), size=cap, replace=False))
    return [pool[i] for i in keep]


def train_policy_on(trajectories, policy_factory, train_cfg, init_seed: int):
    """Fresh stats, fresh policy, full training run; returns the policy."""
    stats = fit_norm_stats(trajectories)
    policy = policy_factory(stats, init_seed)
    ds = ChunkDataset(trajectories, stats, policy_chunking(policy))
    train(policy, ds, replace(train_cfg, seed=init_seed))
    return policy


def collect_infer_round(demos, cfg: RoundConfig, policy_factory, train_cfg,
                        snippets=(), evaluate_fn=evaluate,
                        train_fn=train_policy_on) -> RoundResult:
    """One collect-and-infer round over D_H (plus optional augmentations).

    policy_factory(stats, init_seed) must return an untrained policy.  The
    injectable train/evaluate hooks exist for testing; defaults run the real
    pipeline.
    """
    base = list(demos) + list(snippets)
    if not base:
        raise BadConfig("round needs a non-empty starting dataset")

    reports, policies = {}, {}
    for i, s in enumerate(cfg.seeds):
        policy = train_fn(base, policy_factory, train_cfg, s)
        res = evaluate_fn(policy, task=cfg.task, n_rollouts=cfg.rollouts_per_policy,
                          seed=cfg.eval_seed + i, randomness=cfg.randomness,
                          n_steps=cfg.n_steps)
        reports[s] = res.report
        policies[s] = (policy, res.successes)

    best_seed = max(cfg.seeds, key=lambda s: (reports[s].rate, -s))
    best_policy = policies[best_seed][0]

    pool = [t for s in cfg.seeds for t in policies[s][1]]
    try:
        ingested = select_rollouts(pool, cfg.ingest_cap, cfg.select_seed)
    except NoSuccessfulRollouts:
        return RoundResult(reports=reports, best_seed=best_seed,
                           best_policy=best_policy, ingested=[],
                           final_policy=best_policy, error=NO_ROLLOUTS,
                           final_dataset_size=len(base))

    merged = base + ingested
    final = train_fn(merged, policy_factory, train_cfg, best_seed)
    return RoundResult(reports=reports, best_seed=best_seed,
                       best_policy=best_policy, ingested=ingested,
                       final_policy=final, final_dataset_size=len(merged))


def multitask_mix(demos_by_task: dict):
    """Concatenate per-task demo sets and refit stats across all of them.

    Returns (trajectories, stats).  Trajectories keep their task labels; the
    shared stats are what a single multitask policy trains against.
    """
    if not demos_by_task:
        raise BadConfig("no tasks to mix")
    merged = []
    for task, trajs in demos_by_task.items():
        trajs = list(trajs)
        if not trajs:
            raise BadConfig(f"task {task!r} contributes no demos")
        for t in trajs:
            if t.task != task:
                raise LayoutMismatch(
                    f"trajectory labeled {t.task!r} offered under task {task!r}")
            if t.observations.shape[1] != OBS_DIM:
                raise LayoutMismatch(
                    f"task {task!r} has {t.observations.shape[1]}-dim observations, "
                    f"expected {OBS_DIM}")
        merged.extend(trajs)
    return merged, fit_norm_stats(merged)


def eval_multitask(policy, tasks, n_rollouts: int, seed: int,
                   randomness: str = "low", n_steps=None) -> dict:
    """One EvalReport per task for a single (multitask) policy."""
    out = {}
    for i, task in enumerate(tasks):
        res = evaluate(policy, task=task, n_rollouts=n_rollouts, seed=seed + i,
                       randomness=randomness, n_steps=n_steps)
        out[task] = res.report
    return out


@dataclass(frozen=True)
class SweepRow:
    budget: int
    seed: int
    success_rate: float


SWEEP_HEADER = "budget,seed,success_rate"


def sweep_demo_budget(demos, budgets, seeds, runner) -> list:
    """Success rate per (demo budget, seed); budgets must be strictly ascending.

    runner(subset, seed) -> success rate does the actual train/evaluate; each
    budget uses the first `budget` demos so larger budgets extend smaller ones.
    """
    budgets = [int(b) for b in budgets]
    if not budgets:
        raise BadConfig("no budgets to sweep")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise BadConfig("budgets must be strictly ascending")
    if budgets[0] < 1 or budgets[-1] > len(demos):
        raise BadConfig(f"budgets must lie in [1, {len(demos)}]")
    rows = []
    for b in budgets:
        subset = list(demos)[:b]
        for s in seeds:
            rows.append(SweepRow(budget=b, seed=int(s),
                                 success_rate=float(runner(subset, int(s)))))
    return rows


def sweep_csv(rows) -> str:
    lines = [SWEEP_HEADER]
    lines += [f"{r.budget},{r.seed},{r.success_rate!r}" for r in rows]
    return "\n".join(lines) + "\n"
