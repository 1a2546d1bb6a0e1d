""" Expert demonstrations and the training set built from them.

An expert demonstration is the final path of a uniform RRT* run with the full
node budget, reduced to at most `MAX_WAYPOINTS` intermediate configurations.
Only configurations on that path become training samples.

Important classes:
    - `Demonstration`: one solved (q_init, q_target) problem.
    - `Dataset`: environments plus demonstrations, stored as JSON lines
      with `save_dataset` and read back with `load_dataset`.
    - `TrainingRows`: one (waypoint, context vector) row per waypoint.

Example:
dataset = build_dataset(20, 30, Robot.POINT2, seed=0, jobs=8)
train, validation = split_dataset(dataset)
rows = training_rows(train)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import numpy.typing as npt

from flowplan.env import (
    Config,
    Environment,
    EnvironmentFileError,
    Robot,
    WorkspaceEncoding,
    edge_valid,
    encode_workspace,
    generate_environment,
    is_valid,
    sample_valid_config,
)
from flowplan.flow import ConditioningContext
from flowplan.planner import NODE_BUDGET, PlannerKind, PlannerRun, plan
from flowplan.sampler import UniformSampler
from flowplan.utils import (
    STREAM_DATASET,
    FloatArray,
    derive_seed,
    make_rng,
    parallel_map,
    write_atomic,
)

DATASET_FILE_VERSION = 1

DESK_ENVS = 20
DESK_PAIRS = 30
FULL_ENVS = 100
FULL_PAIRS = 200

DEFAULT_OBS_RATIO = 0.3
MAX_WAYPOINTS = 12
MIN_SEPARATION = 0.05
MAX_FAILURE_FRACTION = 0.9
MAX_PAIR_TRIES = 1000


class DatasetFileError(Exception):
    """Raised when a dataset file is unreadable or has the wrong version."""


class DatasetGenerationError(Exception):
    """Raised when too many demonstration attempts fail."""


@dataclass(frozen=True, kw_only=True, eq=False)
class Demonstration:
    """A solved planning problem.

    Attributes:
        env_id (int):
            index of the environment in its dataset
        q_init (Config):
            start configuration
        q_target (Config):
            target configuration
        waypoints (FloatArray):
            (k, D) intermediate configurations of the final path, endpoints
            excluded, k may be 0
        path_cost (float):
            length of q_init -> waypoints -> q_target
    """

    env_id: int
    q_init: Config
    q_target: Config
    waypoints: FloatArray
    path_cost: float

    def __post_init__(self) -> None:
        dim = len(self.q_init)
        assert self.q_target.shape == (dim,)
        assert self.waypoints.ndim == 2 and self.waypoints.shape[1] == dim
        assert self.path_cost >= 0.0

    @property
    def path(self) -> FloatArray:
        """The endpoint-augmented path."""
        return np.concatenate(
            [self.q_init[None, :], self.waypoints, self.q_target[None, :]]
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "kind": "demonstration",
            "env_id": self.env_id,
            "q_init": self.q_init.tolist(),
            "q_target": self.q_target.tolist(),
            "waypoints": self.waypoints.tolist(),
            "path_cost": self.path_cost,
        }

    @staticmethod
    def from_json_dict(d: dict[str, Any]) -> Demonstration:
        q_init = np.array(d["q_init"], dtype=np.float64)
        return Demonstration(
            env_id=int(d["env_id"]),
            q_init=q_init,
            q_target=np.array(d["q_target"], dtype=np.float64),
            waypoints=np.array(d["waypoints"], dtype=np.float64).reshape(
                -1, len(q_init)
            ),
            path_cost=float(d["path_cost"]),
        )


def path_length(path: FloatArray) -> float:
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())


def sparsify_path(path: FloatArray, env: Environment) -> FloatArray:
    """Keeps at most MAX_WAYPOINTS intermediate nodes of `path`, spread evenly
    along its arclength.

    Whenever a shortcut between two kept nodes is in collision the dropped
    node halfway between them (by index) is restored, so the result can
    exceed MAX_WAYPOINTS but every edge of it is valid.

    Args:
        path (FloatArray):
            (m, D) path with valid edges, endpoints included
        env (Environment):
            the environment

    Returns:
        FloatArray:
            the kept intermediate nodes
    """
    inner = len(path) - 2
    if inner <= MAX_WAYPOINTS:
        return path[1:-1].copy()
    arclength = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))]
    )
    targets = arclength[-1] * np.arange(1, MAX_WAYPOINTS + 1) / (MAX_WAYPOINTS + 1)
    picks = {
        1 + int(np.argmin(np.abs(arclength[1:-1] - t))) for t in targets
    }
    kept = [0, *sorted(picks), len(path) - 1]

    repaired = [kept[0]]
    pending = kept[1:]
    while pending:
        a, b = repaired[-1], pending[0]
        if b - a > 1 and not edge_valid(path[a], path[b], env):
            pending.insert(0, (a + b) // 2)
        else:
            repaired.append(pending.pop(0))
    return path[repaired[1:-1]].copy()


def collect_demonstration(
    env: Environment,
    q_init: Config,
    q_target: Config,
    budget: int = NODE_BUDGET,
    rng: np.random.Generator | None = None,
    env_id: int = 0,
) -> Demonstration | None:
    """Solves the problem with uniform RRT* and keeps the final path.

    Args:
        env (Environment):
            the environment
        q_init (Config):
            valid start configuration
        q_target (Config):
            valid target configuration
        budget (int):
            node budget of the expert run
        rng (np.random.Generator | None):
            sample source, a fixed seed if None
        env_id (int):
            stored in the demonstration

    Returns:
        Demonstration | None:
            the demonstration, None if the expert found no solution
    """
    if not (is_valid(q_init, env) and is_valid(q_target, env)):
        raise ValueError("Demonstration endpoints must be valid configurations")
    rng = np.random.default_rng(0) if rng is None else rng
    run = PlannerRun(
        env=env,
        q_init=np.asarray(q_init, dtype=np.float64),
        q_target=np.asarray(q_target, dtype=np.float64),
        budget=budget,
        kind=PlannerKind.RRT_STAR,
    )
    trajectory, _ = plan(run, UniformSampler(env.robot.dim, rng))
    if trajectory is None:
        return None
    waypoints = sparsify_path(trajectory, env)
    demo_path = np.concatenate([run.q_init[None, :], waypoints, run.q_target[None, :]])
    return Demonstration(
        env_id=env_id,
        q_init=run.q_init,
        q_target=run.q_target,
        waypoints=waypoints,
        path_cost=path_length(demo_path),
    )


@dataclass(frozen=True, kw_only=True, eq=False)
class Dataset:
    """Environments and the demonstrations collected in them.

    Attributes:
        robot (Robot):
            the robot kind shared by all environments
        seed (int):
            the seed the dataset was built from
        split (str):
            "all", "train" or "validation"
        environments (tuple[Environment, ...]):
            the environments, `Demonstration.env_id` indexes this tuple
        demonstrations (tuple[Demonstration, ...]):
            ordered by (env_id, pair index)
    """

    robot: Robot
    seed: int
    split: str
    environments: tuple[Environment, ...]
    demonstrations: tuple[Demonstration, ...]

    def __post_init__(self) -> None:
        assert self.split in ("all", "train", "validation")
        for demo in self.demonstrations:
            if not 0 <= demo.env_id < len(self.environments):
                raise ValueError(f"Demonstration references env {demo.env_id}")

    @cached_property
    def encodings(self) -> tuple[WorkspaceEncoding, ...]:
        return tuple(encode_workspace(env) for env in self.environments)

    def header(self) -> dict[str, Any]:
        return {
            "kind": "header",
            "version": DATASET_FILE_VERSION,
            "robot": self.robot.value,
            "seed": self.seed,
            "split": self.split,
            "n_environments": len(self.environments),
            "n_demonstrations": len(self.demonstrations),
        }


def sample_problem_pairs(
    env: Environment, n_pairs: int, rng: np.random.Generator
) -> list[tuple[Config, Config]]:
    """Rejection-samples valid (q_init, q_target) pairs.

    Every endpoint is at least MIN_SEPARATION away from its partner and from
    all endpoints drawn earlier in the environment. Once the free space is too
    crowded for that (MAX_PAIR_TRIES rejections in a row), the remaining
    endpoints only have to differ from the earlier ones.
    """
    endpoints = np.empty((0, env.robot.dim))
    crowded = False
    pairs = []
    for _ in range(n_pairs):
        for attempt in range(2 * MAX_PAIR_TRIES):
            a = sample_valid_config(env, rng)
            b = sample_valid_config(env, rng)
            candidates = np.stack([a, b])
            gaps = np.linalg.norm(
                candidates[:, None, :] - endpoints[None, :, :], axis=2
            )
            spacing = 0.0 if crowded else MIN_SEPARATION
            if np.linalg.norm(a - b) >= MIN_SEPARATION and bool(
                (gaps > spacing).all()
            ):
                break
            if not crowded and attempt == MAX_PAIR_TRIES - 1:
                crowded = True
                logging.warning(
                    f"Env seed {env.seed} has no room for {n_pairs} separated "
                    f"pairs, only keeping endpoints distinct after {len(pairs)}"
                )
        else:
            raise DatasetGenerationError(
                f"Could not sample {n_pairs} separated pairs in env seed {env.seed}"
            )
        endpoints = np.concatenate([endpoints, candidates])
        pairs.append((a, b))
    return pairs


@dataclass(frozen=True, eq=False)
class _DemonstrationJob:
    env: Environment
    env_id: int
    pair_id: int
    q_init: Config
    q_target: Config
    budget: int
    seed: int


def _run_demonstration_job(job: _DemonstrationJob) -> Demonstration | None:
    rng = make_rng(job.seed, STREAM_DATASET, job.env_id, job.pair_id, 1)
    return collect_demonstration(
        job.env, job.q_init, job.q_target, job.budget, rng, job.env_id
    )


def build_dataset(
    n_envs: int,
    pairs_per_env: int,
    robot: Robot,
    seed: int,
    obs_ratio: float = DEFAULT_OBS_RATIO,
    budget: int = NODE_BUDGET,
    jobs: int = 1,
) -> Dataset:
    """Generates environments and collects one demonstration per pair.

    Failed pairs are dropped. The result only depends on the arguments other
    than `jobs`.

    Args:
        n_envs (int):
            number of environments
        pairs_per_env (int):
            (q_init, q_target) pairs per environment
        robot (Robot):
            the robot kind
        seed (int):
            the dataset seed
        obs_ratio (float):
            obstacle fraction of every environment
        budget (int):
            node budget of every expert run
        jobs (int):
            worker processes

    Returns:
        Dataset:
            the dataset, split "all"
    """
    if n_envs < 1 or pairs_per_env < 1:
        raise ValueError("n_envs and pairs_per_env must be >= 1")
    environments = tuple(
        generate_environment(derive_seed(seed, STREAM_DATASET, i), robot, obs_ratio)
        for i in range(n_envs)
    )
    job_list = [
        _DemonstrationJob(env, i, j, a, b, budget, seed)
        for i, env in enumerate(environments)
        for j, (a, b) in enumerate(
            sample_problem_pairs(env, pairs_per_env, make_rng(seed, STREAM_DATASET, i))
        )
    ]
    demonstrations = []
    for count, demo in enumerate(parallel_map(_run_demonstration_job, job_list, jobs)):
        if demo is not None:
            demonstrations.append(demo)
        if (count + 1) % max(1, len(job_list) // 10) == 0:
            logging.info(f"Collected {count + 1}/{len(job_list)} demonstrations")

    failures = len(job_list) - len(demonstrations)
    if failures:
        logging.info(f"Dropped {failures} pairs without an expert solution")
    if failures > MAX_FAILURE_FRACTION * len(job_list):
        raise DatasetGenerationError(
            f"{failures} of {len(job_list)} demonstrations failed, "
            f"obs_ratio {obs_ratio} is probably too high"
        )
    return Dataset(
        robot=robot,
        seed=seed,
        split="all",
        environments=environments,
        demonstrations=tuple(demonstrations),
    )


def _row_count(demos: tuple[Demonstration, ...]) -> int:
    return sum(len(d.waypoints) for d in demos)


def split_dataset(
    dataset: Dataset, validation_fraction: float = 0.2
) -> tuple[Dataset, Dataset]:
    """Splits the demonstrations into train and validation parts.

    With two or more environments whole environments are held out (the last
    ⌈fraction · n⌉ of them), so the validation set consists of unseen
    workspaces. When that leaves either part without waypoints, or with a
    single environment, the last demonstrations that have waypoints are held
    out instead. If that isn't possible either, both parts are the whole
    dataset. Both parts keep the full environment list.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(
            f"validation_fraction must be in (0, 1): {validation_fraction}"
        )
    demos = dataset.demonstrations
    n_envs = len(dataset.environments)
    if n_envs >= 2:
        cut = n_envs - max(1, math.ceil(validation_fraction * n_envs))
        train = tuple(d for d in demos if d.env_id < cut)
        validation = tuple(d for d in demos if d.env_id >= cut)
        if _row_count(train) > 0 and _row_count(validation) > 0:
            return _split_parts(dataset, train, validation)
        logging.info(
            "Held-out environments leave a split without waypoints, "
            "holding out demonstrations instead"
        )

    with_rows = [i for i, d in enumerate(demos) if len(d.waypoints) > 0]
    n_held = max(1, math.ceil(validation_fraction * len(with_rows)))
    if len(with_rows) <= n_held:
        return _split_parts(dataset, demos, demos)
    held = set(with_rows[-n_held:])
    return _split_parts(
        dataset,
        tuple(d for i, d in enumerate(demos) if i not in held),
        tuple(d for i, d in enumerate(demos) if i in held),
    )


def _split_parts(
    dataset: Dataset,
    train: tuple[Demonstration, ...],
    validation: tuple[Demonstration, ...],
) -> tuple[Dataset, Dataset]:
    return (
        replace(dataset, split="train", demonstrations=train),
        replace(dataset, split="validation", demonstrations=validation),
    )


@dataclass(frozen=True, eq=False)
class TrainingRows:
    """Training samples: row i is waypoint q[i] with context vector
    contexts[i] (see `ConditioningContext.vector`)."""

    q: FloatArray
    contexts: FloatArray

    def __post_init__(self) -> None:
        if len(self.q) != len(self.contexts):
            raise ValueError(
                f"{len(self.q)} configurations, {len(self.contexts)} contexts"
            )

    def __len__(self) -> int:
        return len(self.q)

    def __iter__(self) -> Iterator[tuple[Config, FloatArray]]:
        return zip(self.q, self.contexts)

    @property
    def dim(self) -> int:
        return int(self.q.shape[1])

    @property
    def context_dim(self) -> int:
        return int(self.contexts.shape[1])

    def subset(self, idx: npt.NDArray[np.int64]) -> TrainingRows:
        return TrainingRows(self.q[idx], self.contexts[idx])


def training_rows(dataset: Dataset) -> TrainingRows:
    """One row per waypoint; rows of a demonstration share its full context."""
    if not dataset.demonstrations:
        raise ValueError("training_rows() needs a dataset with demonstrations")
    dim = dataset.robot.dim
    qs: list[FloatArray] = []
    contexts: list[FloatArray] = []
    for demo in dataset.demonstrations:
        ctx = ConditioningContext(
            dataset.encodings[demo.env_id], dim, demo.q_init, demo.q_target
        ).vector()
        qs.append(demo.waypoints)
        contexts.append(np.broadcast_to(ctx, (len(demo.waypoints), len(ctx))))
    return TrainingRows(np.concatenate(qs), np.concatenate(contexts))


def save_dataset(dataset: Dataset, path: Path) -> None:
    records = [
        dataset.header(),
        *(
            {"kind": "environment", "env_id": i, "environment": env.to_json_dict()}
            for i, env in enumerate(dataset.environments)
        ),
        *(demo.to_json_dict() for demo in dataset.demonstrations),
    ]
    write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def load_dataset(path: Path) -> Dataset:
    try:
        with open(path, "r") as f:
            records = [json.loads(line) for line in f if line.strip()]
        if not records or records[0].get("kind") != "header":
            raise DatasetFileError("missing header record")
        header = records[0]
        if header.get("version") != DATASET_FILE_VERSION:
            raise DatasetFileError(
                f"Unsupported dataset version: {header.get('version')}"
            )
        environments = tuple(
            Environment.from_json_dict(r["environment"])
            for r in records
            if r["kind"] == "environment"
        )
        demonstrations = tuple(
            Demonstration.from_json_dict(r)
            for r in records
            if r["kind"] == "demonstration"
        )
        if len(environments) != header["n_environments"] or len(
            demonstrations
        ) != header["n_demonstrations"]:
            raise DatasetFileError("record counts do not match the header")
        return Dataset(
            robot=Robot(header["robot"]),
            seed=int(header["seed"]),
            split=header["split"],
            environments=environments,
            demonstrations=demonstrations,
        )
    except (DatasetFileError, EnvironmentFileError) as e:
        raise DatasetFileError(f"{path}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AssertionError) as e:
        raise DatasetFileError(f"{path}: corrupt dataset ({e})") from e
