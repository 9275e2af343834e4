"""End-to-end orchestration: collection, evaluation, rounds, analysis, CLI."""

from .analyze import DDIM_STEP_COUNTS, HistogramResult, ddim_histogram, kde_mode
from .collect import collect_demos, run_expert_episode
from .evaluate import (EvalEpisode, EvalReport, EvalResult, aggregate_reports,
                       episode_seeds, evaluate, load_policy, policy_chunking)
from .rounds import (BOOTSTRAP_AUGMENTATIONS, BOOTSTRAP_DEMOS,
                     BOOTSTRAP_ROLLOUT_CAP, NO_ROLLOUTS, RoundConfig,
                     RoundResult, SweepRow, bootstrap_preset,
                     collect_infer_round, eval_multitask, multitask_mix,
                     select_rollouts, sweep_csv, sweep_demo_budget,
                     train_policy_on)
from .server import TeleopSession, build_app, scene_from_observation, serve

__all__ = [
    "BOOTSTRAP_AUGMENTATIONS", "BOOTSTRAP_DEMOS", "BOOTSTRAP_ROLLOUT_CAP",
    "DDIM_STEP_COUNTS", "NO_ROLLOUTS", "EvalEpisode", "EvalReport",
    "EvalResult", "HistogramResult", "RoundConfig", "RoundResult", "SweepRow",
    "TeleopSession", "aggregate_reports", "bootstrap_preset", "build_app",
    "collect_demos", "collect_infer_round", "ddim_histogram",
    "episode_seeds", "eval_multitask", "evaluate", "kde_mode", "load_policy",
    "multitask_mix", "policy_chunking", "run_expert_episode",
    "scene_from_observation", "select_rollouts", "serve", "sweep_csv",
    "sweep_demo_budget", "train_policy_on",
]
