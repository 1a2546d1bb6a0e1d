""" The `flowplan` command line.

Subcommands:
    gen-env   generate an environment file
    gen-data  collect expert demonstrations into a dataset file
    train     fit a flow to a dataset and write a checkpoint
    plan      solve one problem and write its metrics
    bench     run a planner x sampler grid and emit charts
    gallery   sample a checkpoint under different conditioning
    inspect   summarize a checkpoint

All randomness flows from --seed. Exit status: 0 on success, 1 on I/O, file
format or runtime errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from flowplan.bench import (
    DESK_BENCH_ENVS,
    DESK_BENCH_PAIRS,
    DESK_BENCH_REPEATS,
    ConfigurationError,
    ExperimentSpec,
    Problem,
    SamplerKind,
    emit_conditioning_gallery,
    emit_plots,
    make_sampler,
    run_experiment,
)
from flowplan.dataset import (
    DEFAULT_OBS_RATIO,
    DESK_ENVS,
    DESK_PAIRS,
    FULL_ENVS,
    FULL_PAIRS,
    DatasetFileError,
    DatasetGenerationError,
    build_dataset,
    load_dataset,
    save_dataset,
)
from flowplan.env import (
    Config,
    Environment,
    EnvironmentFileError,
    EnvironmentGenerationError,
    MAX_OBS_RATIO,
    Robot,
    empty_environment,
    generate_environment,
    is_valid,
    load_environment,
    obstacle_fraction,
    sample_valid_config,
    save_environment,
)
from flowplan.flow import CheckpointError, load_checkpoint, save_checkpoint
from flowplan.planner import NODE_BUDGET, PlannerKind, PlannerRun, plan
from flowplan.sampler import MIXTURE_EPSILON
from flowplan.trainer import DESK_EPOCHS, FULL_EPOCHS, TrainConfig, train
from flowplan.utils import STREAM_PLAN, csv_text, make_rng, write_atomic

class UsageError(Exception):
    """Raised when arguments are inconsistent with a file they refer to."""


FILE_ERRORS = (
    OSError,
    EnvironmentFileError,
    DatasetFileError,
    CheckpointError,
    ConfigurationError,
    DatasetGenerationError,
    EnvironmentGenerationError,
)


def _config_arg(text: str) -> Config:
    try:
        return np.array([float(x) for x in text.split(",")], dtype=np.float64)
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"expected comma separated numbers, got {text!r}"
        ) from e


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--seed", type=int, default=0, help="Seed of all randomness.")
    common.add_argument(
        "--robot",
        choices=[r.value for r in Robot],
        default=Robot.POINT2.value,
        help="Robot kind.",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log debug output.")
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings.")
    return common


def _jobs_options() -> argparse.ArgumentParser:
    parallel = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parallel.add_argument(
        "--jobs",
        type=_positive_int,
        default=os.cpu_count() or 1,
        help="Worker processes (default: available cores).",
    )
    return parallel


def _scale_options() -> argparse.ArgumentParser:
    scale = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    scale.add_argument(
        "--full-scale",
        "--paper-scale",
        dest="full_scale",
        action="store_true",
        help=f"Use {FULL_ENVS} environments, {FULL_PAIRS} pairs and "
        f"{FULL_EPOCHS} epochs unless given explicitly.",
    )
    return scale


def _problem_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--env", type=Path, help="Environment file (default: empty).")
    parser.add_argument("--q-init", type=_config_arg, help="Comma separated start.")
    parser.add_argument("--q-target", type=_config_arg, help="Comma separated target.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowplan",
        description="Learned sampling distributions for RRT* planners.",
        allow_abbrev=False,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _common_options()
    jobs = _jobs_options()
    scale = _scale_options()

    gen_env = subparsers.add_parser("gen-env", parents=[common], allow_abbrev=False)
    gen_env.add_argument("--obs-ratio", type=float, default=DEFAULT_OBS_RATIO)
    gen_env.add_argument("--out", type=Path, required=True)

    gen_data = subparsers.add_parser(
        "gen-data", parents=[common, jobs, scale], allow_abbrev=False
    )
    gen_data.add_argument("--envs", type=_positive_int)
    gen_data.add_argument("--pairs", type=_positive_int)
    gen_data.add_argument("--budget", type=_positive_int, default=NODE_BUDGET)
    gen_data.add_argument("--obs-ratio", type=float, default=DEFAULT_OBS_RATIO)
    gen_data.add_argument("--out", type=Path, required=True)

    train_cmd = subparsers.add_parser(
        "train", parents=[common, scale], allow_abbrev=False
    )
    train_cmd.add_argument("--data", type=Path, required=True)
    train_cmd.add_argument("--epochs", type=int)
    train_cmd.add_argument("--batch-size", type=_positive_int, default=128)
    train_cmd.add_argument("--step-size", type=float, default=1e-3)
    train_cmd.add_argument("--checkpoint", type=Path, required=True)
    train_cmd.add_argument("--report", type=Path, help="Training report CSV.")

    plan_cmd = subparsers.add_parser("plan", parents=[common], allow_abbrev=False)
    _problem_options(plan_cmd)
    plan_cmd.add_argument("--budget", type=_positive_int, default=NODE_BUDGET)
    plan_cmd.add_argument(
        "--planner", choices=[k.value for k in PlannerKind], default="rrt_star"
    )
    plan_cmd.add_argument(
        "--sampler", choices=[k.value for k in SamplerKind], default="uniform"
    )
    plan_cmd.add_argument("--checkpoint", type=Path)
    plan_cmd.add_argument("--epsilon", type=float, default=MIXTURE_EPSILON)
    plan_cmd.add_argument("--out-dir", type=Path, required=True)

    bench = subparsers.add_parser(
        "bench", parents=[common, jobs], allow_abbrev=False
    )
    bench.add_argument("--envs", type=_positive_int, default=DESK_BENCH_ENVS)
    bench.add_argument("--pairs", type=_positive_int, default=DESK_BENCH_PAIRS)
    bench.add_argument("--repeats", type=_positive_int, default=DESK_BENCH_REPEATS)
    bench.add_argument("--budget", type=_positive_int, default=NODE_BUDGET)
    bench.add_argument(
        "--planners",
        nargs="+",
        choices=[k.value for k in PlannerKind],
        default=[PlannerKind.RRT_STAR.value],
    )
    bench.add_argument(
        "--samplers",
        nargs="+",
        choices=[k.value for k in SamplerKind],
        default=[SamplerKind.UNIFORM.value, SamplerKind.MIXTURE.value],
    )
    bench.add_argument("--checkpoint", type=Path)
    bench.add_argument("--epsilon", type=float, default=MIXTURE_EPSILON)
    bench.add_argument("--obs-ratio", type=float, default=DEFAULT_OBS_RATIO)
    bench.add_argument("--out-dir", type=Path, required=True)

    gallery = subparsers.add_parser("gallery", parents=[common], allow_abbrev=False)
    _problem_options(gallery)
    gallery.add_argument("--checkpoint", type=Path, required=True)
    gallery.add_argument("-n", type=_positive_int, default=100)
    gallery.add_argument("--out-dir", type=Path, required=True)

    inspect = subparsers.add_parser("inspect", parents=[common], allow_abbrev=False)
    inspect.add_argument("--checkpoint", type=Path, required=True)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(message)s", force=True
    )


def _problem(args: argparse.Namespace) -> tuple[Environment, Config, Config]:
    robot = Robot(args.robot)
    env = empty_environment(robot) if args.env is None else load_environment(args.env)
    rng = make_rng(args.seed, STREAM_PLAN, 2)
    q_init = sample_valid_config(env, rng) if args.q_init is None else args.q_init
    q_target = sample_valid_config(env, rng) if args.q_target is None else args.q_target
    for name, q in (("--q-init", q_init), ("--q-target", q_target)):
        if q.shape != (env.robot.dim,):
            raise UsageError(f"{name} needs {env.robot.dim} coordinates")
        if not is_valid(q, env):
            raise UsageError(f"{name} is in collision")
    return env, q_init, q_target


def cmd_gen_env(args: argparse.Namespace) -> int:
    env = generate_environment(args.seed, Robot(args.robot), args.obs_ratio)
    save_environment(env, args.out)
    logging.info(
        f"Wrote {args.out}: {len(env.obstacles)} discs, "
        f"obstacle fraction {obstacle_fraction(env):.3f}"
    )
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    envs = args.envs or (FULL_ENVS if args.full_scale else DESK_ENVS)
    pairs = args.pairs or (FULL_PAIRS if args.full_scale else DESK_PAIRS)
    dataset = build_dataset(
        envs,
        pairs,
        Robot(args.robot),
        args.seed,
        obs_ratio=args.obs_ratio,
        budget=args.budget,
        jobs=args.jobs,
    )
    save_dataset(dataset, args.out)
    logging.info(f"Wrote {args.out}: {len(dataset.demonstrations)} demonstrations")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    epochs = args.epochs
    if epochs is None:
        epochs = FULL_EPOCHS if args.full_scale else DESK_EPOCHS
    config = TrainConfig(
        epochs=epochs,
        batch_size=args.batch_size,
        step_size=args.step_size,
        seed=args.seed,
    )
    dataset = load_dataset(args.data)
    model, report = train(dataset, config)
    save_checkpoint(model, args.checkpoint)
    if args.report is not None:
        write_atomic(args.report, report.to_csv())
    logging.info(
        f"Wrote {args.checkpoint}: best validation NLL {report.best_val_nll:.4f} "
        f"at epoch {report.best_epoch}"
    )
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    env, q_init, q_target = _problem(args)
    kind = SamplerKind(args.sampler)
    model = load_checkpoint(args.checkpoint) if args.checkpoint is not None else None
    problem = Problem(env_id=0, pair_id=0, env=env, q_init=q_init, q_target=q_target)
    keys = (args.seed, STREAM_PLAN, 3)
    sampler = make_sampler(kind, problem, model, args.epsilon, keys)
    run = PlannerRun(
        env=env,
        q_init=q_init,
        q_target=q_target,
        budget=args.budget,
        kind=PlannerKind(args.planner),
        seed=args.seed,
    )
    trajectory, metrics = plan(run, sampler)
    write_atomic(args.out_dir / "metrics.csv", metrics.to_csv())
    if trajectory is not None:
        header = [f"q{i}" for i in range(env.robot.dim)]
        write_atomic(
            args.out_dir / "trajectory.csv",
            csv_text(header, (q.tolist() for q in trajectory)),
        )
    if math.isinf(metrics.best_cost):
        print("no solution")
    else:
        print(f"cost {metrics.best_cost:.6f} after {metrics.total_samples} samples")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    spec = ExperimentSpec(
        robot=Robot(args.robot),
        n_envs=args.envs,
        pairs_per_env=args.pairs,
        repeats=args.repeats,
        budget=args.budget,
        planners=tuple(PlannerKind(p) for p in args.planners),
        samplers=tuple(SamplerKind(s) for s in args.samplers),
        seed=args.seed,
        checkpoint=args.checkpoint,
        epsilon=args.epsilon,
        obs_ratio=args.obs_ratio,
        jobs=args.jobs,
    )
    result = run_experiment(spec, args.out_dir)
    emit_plots(result, args.out_dir)
    for cell in result.cells():
        totals = result.totals[cell]
        print(f"{cell[0]} / {cell[1]}: {totals.mean:.1f} ± {totals.std:.1f} samples")
    return 0


def cmd_gallery(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    env, q_init, q_target = _problem(args)
    emit_conditioning_gallery(
        model, env, q_init, q_target, n=args.n, seed=args.seed, out_dir=args.out_dir
    )
    logging.info(f"Wrote {args.out_dir / 'gallery.svg'}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    layout = model.layout
    print(f"dim (D): {layout.dim}")
    print(f"blocks (K): {layout.n_blocks}")
    print(f"hidden: {', '.join(str(h) for h in layout.hidden)}")
    print(f"context dim: {layout.context_dim}")
    print(f"alpha: {layout.alpha}")
    print(f"eps_b: {layout.eps_b}")
    print(f"parameters: {model.n_params}")
    zero = "yes" if model.conditioner_outputs_zero() else "no"
    print(f"zero-initialized conditioner outputs: {zero}")
    for key in sorted(model.metadata):
        print(f"{key}: {model.metadata[key]}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-env": cmd_gen_env,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "plan": cmd_plan,
    "bench": cmd_bench,
    "gallery": cmd_gallery,
    "inspect": cmd_inspect,
}


def _validate(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Usage checks that argparse can't express, run before any work."""
    if not 0.0 <= getattr(args, "epsilon", 0.0) <= 1.0:
        parser.error(f"--epsilon must be in [0, 1], got {args.epsilon}")
    if hasattr(args, "obs_ratio") and not 0.0 <= args.obs_ratio <= MAX_OBS_RATIO:
        parser.error(
            f"--obs-ratio must be in [0, {MAX_OBS_RATIO}], got {args.obs_ratio}"
        )
    if getattr(args, "epochs", None) is not None and args.epochs < 0:
        parser.error(f"--epochs must be >= 0, got {args.epochs}")
    samplers = getattr(args, "samplers", None) or [getattr(args, "sampler", None)]
    needs_model = any(s is not None and SamplerKind(s).needs_model for s in samplers)
    if needs_model and getattr(args, "checkpoint", None) is None:
        parser.error("--checkpoint is required by the flow and mixture samplers")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    _configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.error(f"{args.command}: {e}")
    except (*FILE_ERRORS, ValueError) as e:
        print(f"flowplan {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
