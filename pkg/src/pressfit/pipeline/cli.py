"""Command line front end.

Every subcommand is a pure function of (config, seed, data root): re-running
with the same inputs rewrites the same artifact bytes.  Flags can also be
loaded from a JSON config file via --config; explicitly passed flags win.
The training-log seconds column is the one wall-clock value and lives only
in train_log.csv; loss_log.csv is its timing-free, byte-stable projection.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..augment import AugmentConfig, SphericalLimits, augment, augment_to_share
from ..baselines import MlpPolicy, MlpPolicyConfig, MlpSpec, StateNoiseConfig
from ..data import (ChunkDataset, fit_norm_stats, list_trajectories,
                    load_trajectory, save_trajectory)
from ..env import ACTION_DIM, OBS_DIM
from ..errors import BadConfig
from ..models import DenoiserParams, DiffusionPolicy, PolicySpec
from ..training import TrainConfig, save_log, save_loss_log, train
from .analyze import DDIM_STEP_COUNTS, ddim_histogram
from .collect import collect_demos
from .evaluate import evaluate, load_policy
from .rounds import (RoundConfig, collect_infer_round, multitask_mix,
                     sweep_csv, sweep_demo_budget, train_policy_on)
from .server import serve

DEMO_SOURCES = "scripted,teleop"
TRAIN_SOURCES = "scripted,teleop,rollout,augmentation"


def _int_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(",") if v != ""]


def _str_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [s for s in str(value).split(",") if s != ""]


def _load_set(root, task, sources, randomness=None, success=True) -> list:
    paths = []
    for source in sources:
        paths.extend(list_trajectories(root, task=task, source=source,
                                       randomness=randomness, success=success))
    return [load_trajectory(p) for p in sorted(paths)]


def _write_json(path, payload: dict):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- shared flag groups -----------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file of flag defaults (flags override)")
    p.add_argument("--root", default="data", help="dataset root directory")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--max-lr", type=float, default=1e-4)
    g.add_argument("--weight-decay", type=float, default=1e-6)
    g.add_argument("--warmup-steps", type=int, default=500)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--max-epochs", type=int, default=400)
    g.add_argument("--steps-per-epoch", type=int, default=100)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--grad-clip", type=float, default=None)


def _add_policy_flags(p):
    g = p.add_argument_group("policy")
    g.add_argument("--policy", choices=("diffusion", "mlp"), default="diffusion")
    g.add_argument("--arch", choices=("unet1d", "mlp"), default="unet1d",
                   help="denoiser core for diffusion policies")
    g.add_argument("--diffusion-steps", type=int, default=100)
    g.add_argument("--ddim-steps", type=int, default=8)
    g.add_argument("--no-chunk", action="store_true",
                   help="mlp only: predict one action at a time")
    g.add_argument("--state-noise", type=float, default=0.01,
                   help="mlp only: train-time proprioception noise sigma")


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(max_lr=args.max_lr, weight_decay=args.weight_decay,
                       warmup_steps=args.warmup_steps, batch_size=args.batch_size,
                       max_epochs=args.max_epochs,
                       steps_per_epoch=args.steps_per_epoch,
                       patience=args.patience, grad_clip=args.grad_clip,
                       seed=seed)


def _policy_factory(args):
    """(stats, init_seed) -> fresh policy per the CLI's policy flags."""
    if args.policy == "diffusion":
        def make(stats, init_seed):
            spec = PolicySpec(obs_dim=OBS_DIM, action_dim=ACTION_DIM,
                              params=DenoiserParams(arch=args.arch),
                              diffusion_steps=args.diffusion_steps,
                              ddim_steps=args.ddim_steps, init_seed=init_seed)
            return DiffusionPolicy(spec, stats)
    else:
        def make(stats, init_seed):
            spec = MlpSpec(OBS_DIM, ACTION_DIM,
                           MlpPolicyConfig(chunked=not args.no_chunk),
                           noise=StateNoiseConfig(sigma=args.state_noise),
                           init_seed=init_seed)
            return MlpPolicy(spec, stats)
    return make


# -- subcommands ------------------------------------------------------------


def cmd_collect_demos(args) -> int:
    demos, paths = collect_demos(args.task, args.n, seed=args.seed,
                                 randomness=args.randomness, root=args.root,
                                 attempt_budget=args.budget)
    print(f"collected {len(demos)} demos for {args.task} "
          f"({sum(len(d) for d in demos)} steps) under {args.root}")
    for p in paths:
        print(f"  {p}")
    return 0


def cmd_augment(args) -> int:
    demos = _load_set(args.root, args.task, _str_list(args.sources),
                      randomness=args.randomness)
    demos = [d for d in demos if d.bottleneck_indices]
    if not demos:
        raise BadConfig(f"no annotated demos for {args.task} under {args.root}")
    limits = SphericalLimits(r_min=args.r_min, r_max=args.r_max,
                             theta_max=args.theta_max)
    cfg = AugmentConfig(limits=limits, epsilon=args.epsilon,
                        n_snippets=args.n, max_rotation=args.max_rotation,
                        seed=args.seed, attempt_budget=args.budget)
    if args.share is not None:
        snippets, report = augment_to_share(demos, cfg, args.share)
    else:
        snippets, report = augment(demos, cfg)
    paths = [save_trajectory(s, args.root) for s in snippets]
    stats = report.as_dict()
    print(f"augmented {args.task}: {len(snippets)} snippets "
          f"({sum(len(s) for s in snippets)} steps), "
          f"acceptance {stats['acceptance_rate']:.2f} over {stats['attempts']} attempts "
          f"(state-mismatch {stats['state_mismatch']}, "
          f"invalid-sample {stats['invalid_sample']})")
    for p in paths:
        print(f"  {p}")
    return 0


def cmd_train(args) -> int:
    trajs = _load_set(args.root, args.task, _str_list(args.sources),
                      randomness=args.randomness)
    if not trajs:
        raise BadConfig(f"no training trajectories for {args.task} under {args.root}")
    stats = fit_norm_stats(trajs)
    policy = _policy_factory(args)(stats, args.seed)
    chunking = policy.chunking if args.policy == "mlp" else policy.spec.chunking
    ds = ChunkDataset(trajs, stats, chunking)
    result = train(policy, ds, _train_config(args, args.seed))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy.save(out / "policy.npz")
    save_log(out / "train_log.csv", result.log)
    save_loss_log(out / "loss_log.csv", result.log)
    print(f"trained {args.policy} policy on {len(trajs)} trajectories: "
          f"best val {result.best_val:.6f} at epoch {result.best_epoch} "
          f"({result.epochs_run} epochs run) -> {out / 'policy.npz'}")
    return 0


def cmd_eval(args) -> int:
    save_root = args.root if args.save_successes else None
    res = evaluate(args.checkpoint, task=args.task, n_rollouts=args.n_rollouts,
                   seed=args.seed, randomness=args.randomness,
                   save_root=save_root, n_steps=args.ddim_steps)
    if args.report:
        _write_json(args.report, res.report.as_dict())
    r = res.report
    print(f"eval {args.task}: {r.successes}/{r.n_rollouts} succeeded "
          f"(rate {r.rate:.3f}); {len(res.paths)} rollouts saved")
    return 0


def cmd_round(args) -> int:
    demos = _load_set(args.root, args.task, _str_list(args.sources),
                      randomness=args.randomness)
    if not demos:
        raise BadConfig(f"no demos for {args.task} under {args.root}")
    snippets = _load_set(args.root, args.task, ["augmentation"],
                         randomness=args.randomness) if args.use_augmentations else []
    cfg = RoundConfig(task=args.task, randomness=args.randomness,
                      seeds=tuple(_int_list(args.seeds)),
                      rollouts_per_policy=args.rollouts, ingest_cap=args.cap,
                      eval_seed=args.eval_seed, select_seed=args.select_seed,
                      n_steps=args.ddim_steps)
    result = collect_infer_round(demos, cfg, _policy_factory(args),
                                 _train_config(args, 0), snippets=snippets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.final_policy.save(out / "final.npz")
    payload = {
        "task": args.task, "best_seed": result.best_seed,
        "ingested": len(result.ingested), "error": result.error,
        "final_dataset_size": result.final_dataset_size,
        "reports": {str(s): r.as_dict() for s, r in result.reports.items()},
    }
    _write_json(out / "round.json", payload)
    rates = ", ".join(f"seed {s}: {r.rate:.2f}" for s, r in result.reports.items())
    print(f"round on {args.task}: {rates}; best seed {result.best_seed}, "
          f"{len(result.ingested)} rollouts ingested"
          + (f" [{result.error}]" if result.error else ""))
    return 0


def cmd_mix(args) -> int:
    tasks = _str_list(args.tasks)
    per_task = {}
    for task in tasks:
        demos = _load_set(args.root, task, _str_list(args.sources),
                          randomness=args.randomness)[:args.per_task]
        per_task[task] = demos
    merged, stats = multitask_mix(per_task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stats.json", stats.to_dict())
    _write_json(out / "manifest.json",
                {"tasks": {t: len(v) for t, v in per_task.items()},
                 "n_trajectories": len(merged),
                 "n_steps": sum(len(t) for t in merged)})
    print(f"mixed {len(tasks)} tasks into {len(merged)} trajectories; "
          f"stats -> {out / 'stats.json'}")
    return 0


def cmd_sweep(args) -> int:
    demos = _load_set(args.root, args.task, _str_list(args.sources),
                      randomness=args.randomness)
    budgets = _int_list(args.budgets)
    seeds = _int_list(args.seeds)

    def runner(subset, seed):
        policy = train_policy_on(subset, _policy_factory(args),
                                 _train_config(args, seed), seed)
        res = evaluate(policy, task=args.task, n_rollouts=args.n_rollouts,
                       seed=args.eval_seed + seed, randomness=args.randomness,
                       n_steps=args.ddim_steps)
        return res.report.rate

    rows = sweep_demo_budget(demos, budgets, seeds, runner)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(sweep_csv(rows))
    for r in rows:
        print(f"budget {r.budget} seed {r.seed}: rate {r.success_rate:.3f}")
    print(f"sweep -> {args.out}")
    return 0


def cmd_analyze_ddim(args) -> int:
    policy = load_policy(args.checkpoint)
    traj = load_trajectory(args.trajectory)
    if not (0 <= args.frame < len(traj)):
        raise BadConfig(f"frame {args.frame} outside [0, {len(traj)})")
    obs = traj.observations[args.frame]
    result = ddim_histogram(policy, obs, n_samples=args.n_samples,
                            step_counts=_int_list(args.steps), seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(result.csv())
    ref = result.reference_steps
    for s in result.step_counts:
        print(f"steps {s:>4}: mean distance to {ref}-step reference "
              f"{result.mean_distance(s):.6f}")
    print(f"histograms -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    serve(args.root, host=args.host, port=args.port)
    return 0


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pressfit",
        description="Desk-scale imitation learning pipeline for peg insertion")
    subs = parser.add_subparsers(dest="command", required=True)
    table = {}

    def sub(name, fn, help_text):
        p = subs.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(fn=fn)
        table[name] = p
        return p

    p = sub("collect-demos", cmd_collect_demos,
            "run the scripted expert and keep successful demos")
    p.add_argument("--task", default="one_peg")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--randomness", default="low")
    p.add_argument("--budget", type=int, default=None,
                   help="episode attempts allowed (default max(2n, n+10))")

    p = sub("augment", cmd_augment,
            "grow backward-replay snippets from annotated bottlenecks")
    p.add_argument("--task", default="one_peg")
    p.add_argument("--randomness", default="low")
    p.add_argument("--sources", default=DEMO_SOURCES)
    p.add_argument("--n", type=int, default=50, help="snippets to accept")
    p.add_argument("--share", type=float, default=None,
                   help="target augmentation share of timesteps (overrides --n)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--r-min", type=float, default=0.03)
    p.add_argument("--r-max", type=float, default=0.10)
    p.add_argument("--theta-max", type=float, default=np.pi / 3)
    p.add_argument("--max-rotation", type=float, default=0.2)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--budget", type=int, default=None)

    p = sub("train", cmd_train, "train a policy on stored trajectories")
    p.add_argument("--task", default="one_peg")
    p.add_argument("--randomness", default=None,
                   help="restrict training data to one randomness tag")
    p.add_argument("--sources", default=TRAIN_SOURCES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/policy")
    _add_policy_flags(p)
    _add_train_flags(p)

    p = sub("eval", cmd_eval, "roll out a checkpoint and report success")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="one_peg")
    p.add_argument("--n-rollouts", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--randomness", default="low")
    p.add_argument("--ddim-steps", type=int, default=None,
                   help="override the checkpoint's sampler steps")
    p.add_argument("--save-successes", action="store_true")
    p.add_argument("--report", default=None, help="write the report JSON here")

    p = sub("round", cmd_round, "one collect-and-infer round")
    p.add_argument("--task", default="one_peg")
    p.add_argument("--randomness", default="low")
    p.add_argument("--sources", default=DEMO_SOURCES)
    p.add_argument("--seeds", default="0,1,2", help="policy init seeds")
    p.add_argument("--rollouts", type=int, default=50)
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("--eval-seed", type=int, default=10000)
    p.add_argument("--select-seed", type=int, default=0)
    p.add_argument("--use-augmentations", action="store_true")
    p.add_argument("--out", default="runs/round")
    _add_policy_flags(p)
    _add_train_flags(p)

    p = sub("mix", cmd_mix, "merge per-task demos and refit stats")
    p.add_argument("--tasks", default="one_peg,two_peg")
    p.add_argument("--per-task", type=int, default=10)
    p.add_argument("--randomness", default=None)
    p.add_argument("--sources", default=DEMO_SOURCES)
    p.add_argument("--out", default="runs/mix")

    p = sub("sweep", cmd_sweep, "success rate vs demo budget")
    p.add_argument("--task", default="one_peg")
    p.add_argument("--randomness", default=None)
    p.add_argument("--sources", default=DEMO_SOURCES)
    p.add_argument("--budgets", default="5,10,20")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--n-rollouts", type=int, default=20)
    p.add_argument("--eval-seed", type=int, default=5000)
    p.add_argument("--out", default="runs/sweep.csv")
    _add_policy_flags(p)
    _add_train_flags(p)

    p = sub("analyze-ddim", cmd_analyze_ddim,
            "sampler step-count histograms for one observation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True,
                   help="stored trajectory supplying the conditioning frame")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--steps", default=",".join(str(s) for s in DDIM_STEP_COUNTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/ddim_hist.csv")

    p = sub("serve", cmd_serve, "run the teleop/annotation server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8800)

    return parser, table


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = build_parser()

    command = next((a for a in argv if not a.startswith("-")), None)
    config_path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif a.startswith("--config="):
            config_path = a.split("=", 1)[1]
    if config_path is not None:
        if command not in table:
            parser.error("--config requires a subcommand")
        try:
            cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {config_path}: {e}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sp = table[command]
        valid = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - valid)
        if unknown:
            parser.error(f"unknown config keys for {command}: {', '.join(unknown)}")
        sp.set_defaults(**cfg)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BadConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
