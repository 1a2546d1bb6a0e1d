""" Benchmark harness: planner × sampler grids over held-out environments.

Every (planner, sampler) cell solves the same list of problems, each
repeated `repeats` times with the same seeds, so differences between cells
come from the planner and the sampling distribution only. Per-run metric
series are written as CSV files, and the aggregate is a pure function of
them (`aggregate_directory` recomputes it offline).

Important classes:
    - `ExperimentSpec`: what to run.
    - `Problem`: one held-out (environment, q_init, q_target) triple.
    - `RunResult`: metrics of one run.
    - `AggregateResult`: mean and 95% confidence half-width per checkpoint,
      plus total-sample statistics per cell.

Example:
spec = ExperimentSpec(checkpoint=Path("flow.json"), samplers=(SamplerKind.UNIFORM,
                      SamplerKind.MIXTURE), jobs=8)
result = run_experiment(spec, Path("bench_out"))
emit_plots(result, Path("bench_out"))
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from matplotlib import rc_context
from matplotlib.collections import LineCollection
from matplotlib.figure import Figure
from matplotlib.patches import Circle
from scipy import stats

from flowplan.dataset import DEFAULT_OBS_RATIO, sample_problem_pairs
from flowplan.env import (
    Config,
    Environment,
    Robot,
    arm_points,
    encode_workspace,
    generate_environment,
)
from flowplan.flow import (
    CheckpointError,
    ConditioningContext,
    FlowModel,
    load_checkpoint,
    sample_latent,
)
from flowplan.planner import (
    NODE_BUDGET,
    MetricsRow,
    PlannerKind,
    PlannerParams,
    PlannerRun,
    RunMetrics,
    plan,
    validate_trajectory,
)
from flowplan.sampler import (
    MIXTURE_EPSILON,
    FlowSampler,
    MixtureSampler,
    Sampler,
    UniformSampler,
)
from flowplan.utils import (
    STREAM_BENCH,
    FloatArray,
    csv_text,
    derive_seed,
    make_rng,
    parallel_map,
    write_atomic,
)

DESK_BENCH_ENVS = 10
DESK_BENCH_PAIRS = 3
DESK_BENCH_REPEATS = 3

AGGREGATE_HEADER = (
    "planner",
    "sampler",
    "nodes",
    "cost_mean",
    "cost_ci95",
    "invconn_mean",
    "invconn_ci95",
    "invobs_mean",
    "invobs_ci95",
    "time_mean",
    "time_ci95",
    "samples_total_mean",
    "samples_total_std",
)

SUMMARY_HEADER = (
    "planner",
    "sampler",
    "runs",
    "solved_fraction",
    "samples_total_mean",
    "samples_total_std",
    "first_cost_mean",
    "first_solution_nodes_mean",
    "final_cost_mean",
    "flow_draw_seconds_mean",
    "elapsed_seconds_mean",
)

GALLERY_PANELS = ("full", "init_only", "target_only", "omega_only", "uniform")

RUN_FILE = re.compile(r"^(\w+?)__(\w+?)__e(\d+)_p(\d+)_r(\d+)\.csv$")

SVG_RC = {"svg.hashsalt": "flowplan", "svg.fonttype": "path"}


class ConfigurationError(Exception):
    """Raised when an experiment can't be set up, e.g., a missing checkpoint."""


class SamplerKind(Enum):
    UNIFORM = "uniform"
    FLOW = "flow"
    MIXTURE = "mixture"

    @property
    def needs_model(self) -> bool:
        return self is not SamplerKind.UNIFORM


@dataclass(frozen=True, kw_only=True)
class ExperimentSpec:
    """A benchmark grid.

    Held-out environments are generated from the bench seed stream.
    `run_experiment` rejects a checkpoint trained on any of them.

    Attributes:
        robot (Robot):
            robot kind
        n_envs (int):
            held-out environments
        pairs_per_env (int):
            problems per environment
        repeats (int):
            runs per problem and cell
        budget (int):
            node budget of every run
        planners (tuple[PlannerKind, ...]):
            planner kinds
        samplers (tuple[SamplerKind, ...]):
            sampler kinds
        seed (int):
            seeds environments, problems and runs
        checkpoint (Path | None):
            flow checkpoint, required by the flow and mixture samplers
        epsilon (float):
            uniform probability of the mixture sampler
        obs_ratio (float):
            obstacle fraction of the environments
        params (PlannerParams):
            planner constants
        jobs (int):
            worker processes
    """

    robot: Robot = Robot.POINT2
    n_envs: int = DESK_BENCH_ENVS
    pairs_per_env: int = DESK_BENCH_PAIRS
    repeats: int = DESK_BENCH_REPEATS
    budget: int = NODE_BUDGET
    planners: tuple[PlannerKind, ...] = (PlannerKind.RRT_STAR,)
    samplers: tuple[SamplerKind, ...] = (SamplerKind.UNIFORM, SamplerKind.MIXTURE)
    seed: int = 0
    checkpoint: Path | None = None
    epsilon: float = MIXTURE_EPSILON
    obs_ratio: float = DEFAULT_OBS_RATIO
    params: PlannerParams = field(default_factory=PlannerParams)
    jobs: int = 1

    def __post_init__(self) -> None:
        if min(self.n_envs, self.pairs_per_env, self.repeats, self.budget) < 1:
            raise ValueError(f"Counts and budget must be >= 1: {self}")
        if not self.planners or not self.samplers:
            raise ValueError("At least one planner and one sampler are required")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


@dataclass(frozen=True, kw_only=True, eq=False)
class Problem:
    env_id: int
    pair_id: int
    env: Environment
    q_init: Config
    q_target: Config

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "env_id": self.env_id,
            "pair_id": self.pair_id,
            "environment": self.env.to_json_dict(),
            "q_init": self.q_init.tolist(),
            "q_target": self.q_target.tolist(),
        }


def make_problems(spec: ExperimentSpec) -> list[Problem]:
    problems = []
    for i in range(spec.n_envs):
        env = generate_environment(
            derive_seed(spec.seed, STREAM_BENCH, i), spec.robot, spec.obs_ratio
        )
        pairs = sample_problem_pairs(
            env, spec.pairs_per_env, make_rng(spec.seed, STREAM_BENCH, i)
        )
        for j, (a, b) in enumerate(pairs):
            problems.append(Problem(env_id=i, pair_id=j, env=env, q_init=a, q_target=b))
    return problems


def problems_bytes(problems: Iterable[Problem]) -> bytes:
    """Canonical serialization of a problem list."""
    return json.dumps([p.to_json_dict() for p in problems], sort_keys=True).encode()


@dataclass(frozen=True, eq=False)
class _RunJob:
    problem: Problem
    repeat: int
    planner: PlannerKind
    sampler: SamplerKind
    model: FlowModel | None
    spec: ExperimentSpec


@dataclass(frozen=True, eq=False)
class RunResult:
    planner: PlannerKind
    sampler: SamplerKind
    env_id: int
    pair_id: int
    repeat: int
    metrics: RunMetrics
    trajectory_valid: bool | None
    problem_digest: bytes

    @property
    def key(self) -> tuple[str, str, int, int, int]:
        return (
            self.planner.value,
            self.sampler.value,
            self.env_id,
            self.pair_id,
            self.repeat,
        )

    @property
    def file_name(self) -> str:
        return (
            f"{self.planner.value}__{self.sampler.value}__"
            f"e{self.env_id}_p{self.pair_id}_r{self.repeat}.csv"
        )


def make_sampler(
    kind: SamplerKind,
    problem: Problem,
    model: FlowModel | None,
    epsilon: float,
    keys: tuple[int, ...],
) -> Sampler:
    """Builds a seeded sampler for one run; `keys` identify the run."""
    dim = problem.env.robot.dim
    if kind is SamplerKind.UNIFORM:
        return UniformSampler(dim, make_rng(*keys, 1))
    if model is None:
        raise ConfigurationError(f"The {kind.value} sampler needs a flow checkpoint")
    ctx = ConditioningContext(
        encode_workspace(problem.env), dim, problem.q_init, problem.q_target
    )
    flow = FlowSampler(model, ctx, make_rng(*keys, 1))
    if kind is SamplerKind.FLOW:
        return flow
    return MixtureSampler(flow, epsilon, make_rng(*keys, 2))


def _run_job(job: _RunJob) -> RunResult:
    p = job.problem
    keys = (job.spec.seed, STREAM_BENCH, p.env_id, p.pair_id, job.repeat)
    run = PlannerRun(
        env=p.env,
        q_init=p.q_init,
        q_target=p.q_target,
        budget=job.spec.budget,
        kind=job.planner,
        params=job.spec.params,
        seed=derive_seed(*keys),
    )
    sampler = make_sampler(job.sampler, p, job.model, job.spec.epsilon, keys)
    trajectory, metrics = plan(run, sampler)
    valid = (
        None
        if trajectory is None
        else validate_trajectory(trajectory, p.env, p.q_init, p.q_target)
    )
    return RunResult(
        job.planner,
        job.sampler,
        p.env_id,
        p.pair_id,
        job.repeat,
        metrics,
        valid,
        problems_bytes([p]),
    )


@dataclass(frozen=True)
class RunSeries:
    """The checkpoint rows of one run, as stored in its CSV file."""

    planner: str
    sampler: str
    env_id: int
    pair_id: int
    repeat: int
    rows: tuple[MetricsRow, ...]

    @property
    def total_samples(self) -> int:
        return self.rows[-1].total_samples if self.rows else 0

    def at(self, nodes: int) -> MetricsRow:
        """The last checkpoint at or before `nodes`; runs that stopped early
        carry their last row forward."""
        earlier = [row for row in self.rows if row.nodes <= nodes]
        return earlier[-1] if earlier else self.rows[0]


@dataclass(frozen=True)
class AggregateRow:
    planner: str
    sampler: str
    nodes: int
    cost_mean: float
    cost_ci95: float
    invconn_mean: float
    invconn_ci95: float
    invobs_mean: float
    invobs_ci95: float
    time_mean: float
    time_ci95: float
    samples_total_mean: float
    samples_total_std: float


@dataclass(frozen=True)
class SampleTotals:
    runs: int
    mean: float
    std: float
    total: int


@dataclass
class AggregateResult:
    rows: list[AggregateRow]
    totals: dict[tuple[str, str], SampleTotals]
    runs: list[RunResult] = field(default_factory=list)

    def cells(self) -> list[tuple[str, str]]:
        return sorted(self.totals)

    def series(self, planner: str, sampler: str) -> list[AggregateRow]:
        return [r for r in self.rows if (r.planner, r.sampler) == (planner, sampler)]

    def to_csv(self) -> str:
        return csv_text(
            AGGREGATE_HEADER,
            (tuple(getattr(r, name) for name in AGGREGATE_HEADER) for r in self.rows),
        )

    def summary_csv(self) -> str:
        """Per-cell totals, the tabular counterpart of the charts."""
        by_cell: dict[tuple[str, str], list[RunResult]] = defaultdict(list)
        for run in self.runs:
            by_cell[(run.planner.value, run.sampler.value)].append(run)
        rows = []
        for cell in sorted(by_cell):
            runs = by_cell[cell]
            solved = [r.metrics for r in runs if r.metrics.solved]
            totals = self.totals[cell]
            rows.append(
                (
                    *cell,
                    len(runs),
                    len(solved) / len(runs),
                    totals.mean,
                    totals.std,
                    _mean_or_inf([m.first_solution_cost for m in solved]),
                    _mean_or_inf([m.first_solution_nodes for m in solved]),
                    _mean_or_inf([m.best_cost for m in solved]),
                    float(np.mean([r.metrics.draw_seconds for r in runs])),
                    float(np.mean([r.metrics.elapsed_seconds for r in runs])),
                )
            )
        return csv_text(SUMMARY_HEADER, rows)


def _mean_or_inf(values: list[Any]) -> float:
    return float(np.mean(values)) if values else math.inf


def mean_ci95(values: list[float]) -> tuple[float, float]:
    """Mean and t-distribution 95% confidence half-width.

    A single value has half-width 0; any infinite value makes both infinite.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        return math.inf, math.inf
    if len(x) < 2:
        return float(x.mean()), 0.0
    half = stats.t.ppf(0.975, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x))
    return float(x.mean()), float(half)


def aggregate(series: Iterable[RunSeries]) -> AggregateResult:
    """Reduces per-run series to per-(planner, sampler, checkpoint) statistics.

    Runs are processed in sorted key order so the result does not depend on
    the order they finished in.
    """
    by_cell: dict[tuple[str, str], list[RunSeries]] = defaultdict(list)
    for s in sorted(
        series, key=lambda s: (s.planner, s.sampler, s.env_id, s.pair_id, s.repeat)
    ):
        by_cell[(s.planner, s.sampler)].append(s)

    rows = []
    totals = {}
    for cell, runs in sorted(by_cell.items()):
        finals = np.array([s.total_samples for s in runs], dtype=np.float64)
        std = float(finals.std(ddof=1)) if len(finals) > 1 else 0.0
        totals[cell] = SampleTotals(
            len(runs), float(finals.mean()), std, int(finals.sum())
        )
        checkpoints = sorted({row.nodes for s in runs for row in s.rows})
        for nodes in checkpoints:
            at = [s.at(nodes) for s in runs]
            cost = mean_ci95([r.best_cost for r in at])
            invconn = mean_ci95([float(r.invalid_connections) for r in at])
            invobs = mean_ci95([float(r.invalid_obstacles) for r in at])
            elapsed = mean_ci95([r.elapsed_seconds for r in at])
            rows.append(
                AggregateRow(
                    *cell,
                    nodes,
                    *cost,
                    *invconn,
                    *invobs,
                    *elapsed,
                    totals[cell].mean,
                    std,
                )
            )
    return AggregateResult(rows, totals)


def _series_of(run: RunResult) -> RunSeries:
    return RunSeries(
        run.planner.value,
        run.sampler.value,
        run.env_id,
        run.pair_id,
        run.repeat,
        tuple(run.metrics.rows),
    )


def load_run_csv(path: Path) -> RunSeries:
    match = RUN_FILE.match(path.name)
    if match is None:
        raise ValueError(f"{path} is not named like a run file")
    planner, sampler, env_id, pair_id, repeat = match.groups()
    with open(path, "r", newline="") as f:
        rows = tuple(
            MetricsRow(
                int(r["nodes"]),
                float(r["best_cost"]),
                int(r["invalid_connections"]),
                int(r["invalid_obstacles"]),
                int(r["total_samples"]),
                float(r["elapsed_seconds"]),
            )
            for r in csv.DictReader(f)
        )
    return RunSeries(planner, sampler, int(env_id), int(pair_id), int(repeat), rows)


def aggregate_directory(runs_dir: Path) -> AggregateResult:
    """Recomputes the aggregate from the per-run CSV files in `runs_dir`."""
    return aggregate(load_run_csv(p) for p in sorted(runs_dir.glob("*.csv")))


def load_model(spec: ExperimentSpec) -> FlowModel | None:
    if not any(kind.needs_model for kind in spec.samplers):
        return None
    if spec.checkpoint is None:
        raise ConfigurationError("The flow and mixture samplers need --checkpoint")
    try:
        model = load_checkpoint(spec.checkpoint)
    except FileNotFoundError as e:
        raise ConfigurationError(f"Checkpoint {spec.checkpoint} does not exist") from e
    except CheckpointError as e:
        raise ConfigurationError(str(e)) from e
    if model.dim != spec.robot.dim:
        raise ConfigurationError(
            f"Checkpoint {spec.checkpoint} is a {model.dim}-dimensional flow, "
            f"{spec.robot.value} needs {spec.robot.dim}"
        )
    return model


def check_held_out(problems: Iterable[Problem], model: FlowModel | None) -> None:
    """Raises ConfigurationError when a benchmark environment was trained on.

    Training environments come from the checkpoint's `train_env_seeds`.
    """
    if model is None:
        return
    trained = set(model.metadata.get("train_env_seeds", ()))
    overlap = sorted({p.env.seed for p in problems} & trained)
    if overlap:
        raise ConfigurationError(
            f"Benchmark environment seeds {overlap} were used for training"
        )


def run_experiment(
    spec: ExperimentSpec, out_dir: Path | None = None
) -> AggregateResult:
    """Runs the whole grid.

    Args:
        spec (ExperimentSpec):
            the grid
        out_dir (Path | None):
            where to write problems.json, runs/*.csv, aggregate.csv and
            summary.csv; nothing is written if None

    Returns:
        AggregateResult:
            the aggregate, with the individual runs attached
    """
    model = load_model(spec)
    problems = make_problems(spec)
    check_held_out(problems, model)
    jobs = [
        _RunJob(problem, repeat, planner, sampler, model, spec)
        for planner in spec.planners
        for sampler in spec.samplers
        for problem in problems
        for repeat in range(spec.repeats)
    ]
    logging.info(
        f"Running {len(jobs)} runs: {len(spec.planners)} planners x "
        f"{len(spec.samplers)} samplers x {len(problems)} problems x "
        f"{spec.repeats} repeats"
    )
    runs = []
    for i, run in enumerate(parallel_map(_run_job, jobs, spec.jobs)):
        runs.append(run)
        if run.trajectory_valid is False:
            logging.error(f"Run {run.key} returned an invalid trajectory")
        logging.debug(f"Finished run {i + 1}/{len(jobs)} {run.key}")

    result = aggregate(_series_of(run) for run in runs)
    result.runs = sorted(runs, key=lambda r: r.key)

    if out_dir is not None:
        problems_text = problems_bytes(problems).decode() + "\n"
        write_atomic(out_dir / "problems.json", problems_text)
        for run in result.runs:
            write_atomic(out_dir / "runs" / run.file_name, run.metrics.to_csv())
        write_atomic(out_dir / "aggregate.csv", result.to_csv())
        write_atomic(out_dir / "summary.csv", result.summary_csv())
    return result


PLOT_METRICS = (
    ("cost", "cost_mean", "cost_ci95", "cost"),
    ("invalid_connections", "invconn_mean", "invconn_ci95", "invalid connections"),
    ("invalid_obstacles", "invobs_mean", "invobs_ci95", "invalid obstacles"),
    ("time", "time_mean", "time_ci95", "time [s]"),
)


def _svg_bytes(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with rc_context(SVG_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def emit_plots(result: AggregateResult, out_dir: Path) -> list[Path]:
    """Writes one SVG line chart per metric (mean line, shaded 95% band) and
    the aggregate CSV they are drawn from.

    The cost line of a cell starts at its first finite checkpoint.

    Returns:
        list[Path]:
            the files written
    """
    if not result.rows:
        raise ValueError("Nothing to plot")
    written = []
    for name, mean_field, ci_field, label in PLOT_METRICS:
        with rc_context(SVG_RC):
            fig = Figure(figsize=(6.0, 4.0))
            ax = fig.subplots()
            for planner, sampler in result.cells():
                rows = result.series(planner, sampler)
                x = np.array([r.nodes for r in rows], dtype=np.float64)
                y = np.array([getattr(r, mean_field) for r in rows], dtype=np.float64)
                ci = np.array([getattr(r, ci_field) for r in rows], dtype=np.float64)
                finite = np.flatnonzero(np.isfinite(y))
                if len(finite) == 0:
                    continue
                x, y, ci = x[finite[0] :], y[finite[0] :], ci[finite[0] :]
                (line,) = ax.plot(x, y, label=f"{planner} / {sampler}")
                ax.fill_between(x, y - ci, y + ci, color=line.get_color(), alpha=0.2)
            ax.set_xlabel("nodes")
            ax.set_ylabel(label)
            ax.legend(loc="best")
            fig.tight_layout()
        path = out_dir / f"{name}.svg"
        write_atomic(path, _svg_bytes(fig))
        written.append(path)
    data = out_dir / "plot_data.csv"
    write_atomic(data, result.to_csv())
    written.append(data)
    return written


@dataclass(frozen=True, eq=False)
class ConditioningGallery:
    """Samples of one problem under different conditioning, keyed by panel
    name (see GALLERY_PANELS)."""

    env: Environment
    q_init: Config
    q_target: Config
    panels: dict[str, FloatArray]

    def to_csv(self) -> str:
        dim = self.env.robot.dim
        header = ("panel", *(f"q{i}" for i in range(dim)))
        return csv_text(
            header,
            ((name, *q.tolist()) for name in GALLERY_PANELS for q in self.panels[name]),
        )


def conditioning_gallery(
    model: FlowModel,
    env: Environment,
    q_init: Config,
    q_target: Config,
    n: int = 100,
    seed: int = 0,
) -> ConditioningGallery:
    """Samples the five panels. The four flow panels push one shared latent
    batch through the flow, so they differ only in the conditioning."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dim = env.robot.dim
    if model.dim != dim:
        raise ValueError(
            f"Model dimension {model.dim} does not match {env.robot.value}"
        )
    rng = make_rng(seed, STREAM_BENCH)
    latent = rng.standard_normal((n, dim))
    full = ConditioningContext(encode_workspace(env), dim, q_init, q_target)
    masks = {
        "full": (True, True),
        "init_only": (True, False),
        "target_only": (False, True),
        "omega_only": (False, False),
    }
    panels = {
        name: sample_latent(model, full.masked(*keep), latent)
        for name, keep in masks.items()
    }
    panels["uniform"] = rng.random((n, dim))
    return ConditioningGallery(env, np.asarray(q_init), np.asarray(q_target), panels)


def render_gallery(gallery: ConditioningGallery) -> bytes:
    """Workspace overlays of the panels as one SVG; arm samples are drawn as
    link polylines via forward kinematics."""
    with rc_context(SVG_RC):
        fig = Figure(figsize=(3.0 * len(GALLERY_PANELS), 3.2))
        axes = fig.subplots(1, len(GALLERY_PANELS))
        for ax, name in zip(axes, GALLERY_PANELS):
            for o in gallery.env.obstacles:
                ax.add_patch(Circle((o.cx, o.cy), o.r, color="0.6"))
            qs = gallery.panels[name]
            if gallery.env.robot is Robot.ARM4:
                segments = np.stack(arm_points(qs), axis=1)
                ax.add_collection(LineCollection(segments, linewidths=0.6, alpha=0.3))
                ends = np.stack([gallery.q_init, gallery.q_target])
                ax.add_collection(
                    LineCollection(
                        np.stack(arm_points(ends), axis=1),
                        colors=["tab:green", "tab:red"],
                        linewidths=2.0,
                    )
                )
            else:
                ax.scatter(qs[:, 0], qs[:, 1], s=4, alpha=0.6)
                ax.plot(*gallery.q_init, marker="*", color="tab:green", markersize=10)
                ax.plot(*gallery.q_target, marker="*", color="tab:red", markersize=10)
            ax.set_xlim(0.0, 1.0)
            ax.set_ylim(0.0, 1.0)
            ax.set_aspect("equal")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(name.replace("_", " "))
        fig.tight_layout()
    return _svg_bytes(fig)


def emit_conditioning_gallery(
    model: FlowModel,
    env: Environment,
    q_init: Config,
    q_target: Config,
    n: int = 100,
    seed: int = 0,
    out_dir: Path | None = None,
) -> ConditioningGallery:
    """Samples the gallery and, given `out_dir`, writes gallery.svg and
    gallery.csv there."""
    gallery = conditioning_gallery(model, env, q_init, q_target, n, seed)
    if out_dir is not None:
        write_atomic(out_dir / "gallery.svg", render_gallery(gallery))
        write_atomic(out_dir / "gallery.csv", gallery.to_csv())
    return gallery
