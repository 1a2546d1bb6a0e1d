""" RRT*, bidirectional RRT* and informed RRT* over an `Environment`.

Every sample a planner draws ends in exactly one `StepOutcome`:
`InvalidObstacle` (the sample is in collision), `InvalidConnection` (the
steered edge from the nearest node is in collision) or `NodeAdded`. The
budget counts accepted nodes, not samples.

Important classes:
    - `RoadmapTree`: nodes, parents, cost-to-come and a spatial index.
    - `PlannerParams`: step size η, rewiring constant γ, checkpoint interval.
    - `PlannerRun`: a planning problem plus the budget and planner kind.
    - `RunMetrics`: the checkpointed metric series of one run.

Example:
run = PlannerRun(env=env, q_init=a, q_target=b, kind=PlannerKind.RRT_STAR)
trajectory, metrics = plan(run, UniformSampler(env.robot.dim, rng))
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from flowplan.env import Config, Environment, edge_valid, is_valid
from flowplan.sampler import InformedSampler, MixtureSampler, Sampler
from flowplan.spatial import SpatialIndex
from flowplan.utils import STREAM_PLAN, FloatArray, csv_text, make_rng

NODE_BUDGET = 10_000
DEFAULT_STEP = 0.05
DEFAULT_GAMMA = 3.0
DEFAULT_CHECKPOINT_INTERVAL = 100
DEFAULT_SAMPLE_CAP_FACTOR = 50

COST_TOLERANCE = 1e-12

METRICS_HEADER = (
    "nodes",
    "best_cost",
    "invalid_connections",
    "invalid_obstacles",
    "total_samples",
    "elapsed_seconds",
)


class PlannerKind(Enum):
    RRT_STAR = "rrt_star"
    BI_RRT_STAR = "birrt_star"
    INFORMED_RRT_STAR = "informed_rrt_star"


@dataclass(frozen=True, kw_only=True)
class PlannerParams:
    """Tuning constants shared by all planners.

    Attributes:
        step (float):
            steering step η, also the goal radius and the rewiring radius cap
        gamma (float):
            rewiring constant γ in r_n = min(γ (log n / n)^(1/d), η)
        checkpoint_interval (int):
            record a metrics row every this many accepted nodes
        sample_cap_factor (int):
            a run gives up after sample_cap_factor * budget samples
    """

    step: float = DEFAULT_STEP
    gamma: float = DEFAULT_GAMMA
    checkpoint_interval: int = DEFAULT_CHECKPOINT_INTERVAL
    sample_cap_factor: int = DEFAULT_SAMPLE_CAP_FACTOR

    def __post_init__(self) -> None:
        if self.step <= 0 or self.gamma <= 0:
            raise ValueError(f"step and gamma must be positive: {self}")
        if self.checkpoint_interval < 1 or self.sample_cap_factor < 1:
            raise ValueError(f"Invalid checkpoint interval or sample cap: {self}")


class RoadmapTree:
    """A tree (or, with several roots, a forest) over C-space.

    `costs[i]` is the cost-to-come of node i: the summed Euclidean segment
    lengths along its parent chain. Rewiring a node updates the costs of its
    whole subtree.
    """

    def __init__(self, root: Config):
        root = np.asarray(root, dtype=np.float64)
        self.index = SpatialIndex(len(root))
        self.index.add(root)
        self.parents: list[int] = [-1]
        self.costs: list[float] = [0.0]
        self.children: list[list[int]] = [[]]

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def nodes(self) -> FloatArray:
        return self.index.points

    @property
    def dim(self) -> int:
        return self.index.dim

    def node(self, i: int) -> Config:
        return self.index.points[i]

    def add(self, q: Config, parent: int, cost: float) -> int:
        i = self.index.add(q)
        self.parents.append(parent)
        self.costs.append(cost)
        self.children.append([])
        self.children[parent].append(i)
        return i

    def nearest(self, q: Config) -> int:
        return self.index.nearest(q)

    def near(self, q: Config, radius: float) -> list[int]:
        return self.index.within(q, radius)

    def rewire(self, i: int, parent: int, cost: float) -> None:
        """Makes `parent` the parent of node i with cost-to-come `cost`."""
        old = self.parents[i]
        self.children[old].remove(i)
        self.children[parent].append(i)
        self.parents[i] = parent
        delta = cost - self.costs[i]
        stack = [i]
        while stack:
            j = stack.pop()
            self.costs[j] += delta
            stack.extend(self.children[j])

    def path_to_root(self, i: int) -> list[int]:
        path = [i]
        while self.parents[path[-1]] != -1:
            path.append(self.parents[path[-1]])
            if len(path) > len(self):
                raise ValueError("Cycle in the parent graph")
        path.reverse()
        return path

    def recompute_costs(self) -> list[float]:
        """Cost-to-come of every node recomputed from the parent pointers."""
        nodes = self.nodes
        costs = []
        for i in range(len(self)):
            path = self.path_to_root(i)
            segments = np.diff(nodes[path], axis=0)
            costs.append(float(np.linalg.norm(segments, axis=1).sum()))
        return costs


def nearest(tree: RoadmapTree, q: Config) -> int:
    """Index of the node closest to q, ties broken by the lowest index."""
    return tree.nearest(q)


def steer(start: Config, toward: Config, step: float) -> Config:
    """`toward` if it is within `step` of `start`, else the point at distance
    `step` along the segment."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    delta = np.asarray(toward, dtype=np.float64) - start
    dist = float(np.linalg.norm(delta))
    if dist <= step:
        return np.array(toward, dtype=np.float64)
    steered: Config = start + delta * (step / dist)
    return steered


def rewire_radius(n: int, dim: int, params: PlannerParams) -> float:
    if n < 2:
        return 0.0
    return min(params.gamma * (math.log(n) / n) ** (1.0 / dim), params.step)


@dataclass(frozen=True)
class NodeAdded:
    index: int
    # length of a valid closing edge to the goal, if the new node has one
    goal_distance: float | None = None


@dataclass(frozen=True)
class InvalidObstacle:
    pass


@dataclass(frozen=True)
class InvalidConnection:
    pass


StepOutcome = NodeAdded | InvalidObstacle | InvalidConnection


def _goal_distance(
    q: Config, q_target: Config | None, env: Environment, step: float
) -> float | None:
    if q_target is None:
        return None
    d = float(np.linalg.norm(q_target - q))
    if d <= step and edge_valid(q, q_target, env):
        return d
    return None


def extend_star(
    tree: RoadmapTree,
    q_rand: Config,
    env: Environment,
    params: PlannerParams,
    q_target: Config | None = None,
) -> StepOutcome:
    """One RRT* extension toward an already drawn sample."""
    if not is_valid(q_rand, env):
        return InvalidObstacle()
    i_near = tree.nearest(q_rand)
    q_near = tree.node(i_near)
    q_new = steer(q_near, q_rand, params.step)
    if not edge_valid(q_near, q_new, env):
        return InvalidConnection()

    radius = rewire_radius(len(tree) + 1, tree.dim, params)
    neighbours = tree.near(q_new, radius)
    nodes = tree.nodes
    dists = {j: float(np.linalg.norm(nodes[j] - q_new)) for j in neighbours}

    parent = i_near
    cost = tree.costs[i_near] + float(np.linalg.norm(q_new - q_near))
    candidates = [j for j in neighbours if j != i_near]
    for j in sorted(candidates, key=lambda j: (tree.costs[j] + dists[j], j)):
        candidate = tree.costs[j] + dists[j]
        if candidate >= cost - COST_TOLERANCE:
            break
        if edge_valid(nodes[j], q_new, env):
            parent, cost = j, candidate
            break

    new = tree.add(q_new, parent, cost)
    for j in neighbours:
        if j == parent:
            continue
        candidate = cost + dists[j]
        if candidate < tree.costs[j] - COST_TOLERANCE and edge_valid(
            q_new, tree.node(j), env
        ):
            tree.rewire(j, new, candidate)
    return NodeAdded(new, _goal_distance(q_new, q_target, env, params.step))


def rrt_star_step(
    tree: RoadmapTree,
    sampler: Sampler,
    env: Environment,
    q_target: Config | None,
    params: PlannerParams = PlannerParams(),
) -> StepOutcome:
    """Draws one sample and tries to grow the tree toward it.

    Args:
        tree (RoadmapTree):
            the tree, modified in place on NodeAdded
        sampler (Sampler):
            where the sample comes from
        env (Environment):
            the environment
        q_target (Config | None):
            goal configuration; a new node within η of it with a valid
            closing edge reports its goal distance. None disables the check.
        params (PlannerParams):
            step size and rewiring constants

    Returns:
        StepOutcome:
            what happened to the sample
    """
    return extend_star(tree, sampler.sample_next(), env, params, q_target)


@dataclass(frozen=True)
class MetricsRow:
    nodes: int
    best_cost: float
    invalid_connections: int
    invalid_obstacles: int
    total_samples: int
    elapsed_seconds: float

    def as_tuple(self) -> tuple[int, float, int, int, int, float]:
        return (
            self.nodes,
            self.best_cost,
            self.invalid_connections,
            self.invalid_obstacles,
            self.total_samples,
            self.elapsed_seconds,
        )


@dataclass
class RunMetrics:
    """Accounting of one planner run.

    `rows` holds one `MetricsRow` per checkpoint; the remaining fields are
    totals at the end of the run.
    """

    rows: list[MetricsRow] = field(default_factory=list)
    nodes: int = 0
    invalid_connections: int = 0
    invalid_obstacles: int = 0
    best_cost: float = math.inf
    first_solution_nodes: int | None = None
    first_solution_cost: float | None = None
    batch_draws: int = 0
    draw_seconds: float = 0.0
    uniform_draws: int = 0
    inner_draws: int = 0
    informed_rejections: int = 0
    elapsed_seconds: float = 0.0

    @property
    def total_samples(self) -> int:
        return self.nodes + self.invalid_connections + self.invalid_obstacles

    @property
    def solved(self) -> bool:
        return not math.isinf(self.best_cost)

    def record(self, outcome: StepOutcome) -> None:
        match outcome:
            case NodeAdded():
                self.nodes += 1
            case InvalidObstacle():
                self.invalid_obstacles += 1
            case InvalidConnection():
                self.invalid_connections += 1

    def checkpoint(self, elapsed: float) -> None:
        self.elapsed_seconds = elapsed
        self.rows.append(
            MetricsRow(
                self.nodes,
                self.best_cost,
                self.invalid_connections,
                self.invalid_obstacles,
                self.total_samples,
                elapsed,
            )
        )

    def to_csv(self) -> str:
        return csv_text(METRICS_HEADER, (row.as_tuple() for row in self.rows))


@dataclass(frozen=True, kw_only=True, eq=False)
class PlannerRun:
    """A planning problem plus how to solve it.

    Attributes:
        env (Environment):
            the environment
        q_init (Config):
            valid start configuration
        q_target (Config):
            valid target configuration
        budget (int):
            number of accepted tree nodes
        kind (PlannerKind):
            which planner
        params (PlannerParams):
            planner constants
        seed (int):
            seeds the informed sampler's hyperspheroid draws
    """

    env: Environment
    q_init: Config
    q_target: Config
    budget: int = NODE_BUDGET
    kind: PlannerKind = PlannerKind.RRT_STAR
    params: PlannerParams = field(default_factory=PlannerParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        for name, q in (("q_init", self.q_init), ("q_target", self.q_target)):
            if np.shape(q) != (self.env.robot.dim,):
                raise ValueError(f"{name} must have {self.env.robot.dim} coordinates")


def validate_trajectory(
    trajectory: FloatArray, env: Environment, q_init: Config, q_target: Config
) -> bool:
    """Do the endpoints match the problem and is every segment collision free?"""
    return (
        len(trajectory) >= 2
        and np.array_equal(trajectory[0], q_init)
        and np.array_equal(trajectory[-1], q_target)
        and all(edge_valid(a, b, env) for a, b in zip(trajectory[:-1], trajectory[1:]))
    )


def _close_path(points: FloatArray, q_target: Config) -> FloatArray:
    if np.array_equal(points[-1], q_target):
        return points
    return np.concatenate([points, np.asarray(q_target)[None, :]])


class _Loop:
    """Budget, sample cap, checkpoints and solution bookkeeping of a run."""

    def __init__(self, run: PlannerRun, sampler: Sampler):
        self.run = run
        self.sampler = sampler
        self.metrics = RunMetrics()
        self.sample_cap = run.params.sample_cap_factor * run.budget
        self.start = time.perf_counter()

    def running(self) -> bool:
        if self.metrics.total_samples >= self.sample_cap:
            logging.warning(
                f"Giving up after {self.metrics.total_samples} samples with "
                f"{self.metrics.nodes}/{self.run.budget} nodes"
            )
            return False
        return self.metrics.nodes < self.run.budget

    def record(self, outcome: StepOutcome, best_cost: float) -> None:
        self.metrics.record(outcome)
        if best_cost < self.metrics.best_cost:
            if not self.metrics.solved:
                self.metrics.first_solution_nodes = self.metrics.nodes
                self.metrics.first_solution_cost = best_cost
                logging.debug(
                    f"First solution after {self.metrics.nodes} nodes, "
                    f"cost {best_cost:.4f}"
                )
            self.metrics.best_cost = best_cost
            if isinstance(self.sampler, InformedSampler):
                self.sampler.set_best_cost(best_cost)
        if (
            isinstance(outcome, NodeAdded)
            and self.metrics.nodes % self.run.params.checkpoint_interval == 0
        ):
            self.metrics.checkpoint(time.perf_counter() - self.start)

    def finish(self) -> RunMetrics:
        elapsed = time.perf_counter() - self.start
        if not self.metrics.rows or self.metrics.rows[-1].nodes != self.metrics.nodes:
            self.metrics.checkpoint(elapsed)
        self.metrics.elapsed_seconds = elapsed
        self.metrics.batch_draws = self.sampler.batch_draws
        self.metrics.draw_seconds = self.sampler.draw_seconds
        inner: Sampler = self.sampler
        if isinstance(inner, InformedSampler):
            self.metrics.informed_rejections = inner.rejected
            inner = inner.inner
        if isinstance(inner, MixtureSampler):
            self.metrics.uniform_draws = inner.uniform_draws
            self.metrics.inner_draws = inner.inner_draws
        return self.metrics


def _plan_rrt_star(
    run: PlannerRun, sampler: Sampler
) -> tuple[FloatArray | None, RunMetrics]:
    tree = RoadmapTree(run.q_init)
    loop = _Loop(run, sampler)
    goal_nodes: dict[int, float] = {}
    best = math.inf
    while loop.running():
        outcome = rrt_star_step(tree, sampler, run.env, run.q_target, run.params)
        if isinstance(outcome, NodeAdded) and outcome.goal_distance is not None:
            goal_nodes[outcome.index] = outcome.goal_distance
        if goal_nodes:
            best = min(tree.costs[i] + d for i, d in goal_nodes.items())
        loop.record(outcome, best)

    metrics = loop.finish()
    if not goal_nodes:
        return None, metrics
    end = min(goal_nodes, key=lambda i: (tree.costs[i] + goal_nodes[i], i))
    return _close_path(tree.nodes[tree.path_to_root(end)], run.q_target), metrics


def _plan_bi_rrt_star(
    run: PlannerRun, sampler: Sampler
) -> tuple[FloatArray | None, RunMetrics]:
    trees = (RoadmapTree(run.q_init), RoadmapTree(run.q_target))
    loop = _Loop(run, sampler)
    # (node in the start tree, node in the target tree) -> bridge length
    bridges: dict[tuple[int, int], float] = {}
    best = math.inf
    active = 0
    while loop.running():
        tree, other = trees[active], trees[1 - active]
        outcome = rrt_star_step(tree, sampler, run.env, None, run.params)
        if isinstance(outcome, NodeAdded):
            q_new = tree.node(outcome.index)
            j = other.nearest(q_new)
            d = float(np.linalg.norm(other.node(j) - q_new))
            if d <= run.params.step and edge_valid(q_new, other.node(j), run.env):
                key = (outcome.index, j) if active == 0 else (j, outcome.index)
                bridges[key] = d
        active = 1 - active
        if bridges:
            best = min(
                trees[0].costs[a] + d + trees[1].costs[b]
                for (a, b), d in bridges.items()
            )
        loop.record(outcome, best)

    metrics = loop.finish()
    if not bridges:
        return None, metrics
    a, b = min(
        bridges,
        key=lambda k: (trees[0].costs[k[0]] + bridges[k] + trees[1].costs[k[1]], k),
    )
    head = trees[0].nodes[trees[0].path_to_root(a)]
    tail = trees[1].nodes[trees[1].path_to_root(b)][::-1]
    if np.array_equal(head[-1], tail[0]):
        tail = tail[1:]
    return np.concatenate([head, tail]), metrics


def plan(run: PlannerRun, sampler: Sampler) -> tuple[FloatArray | None, RunMetrics]:
    """Grows the planner's tree(s) until `run.budget` nodes were accepted.

    Metrics are checkpointed every `run.params.checkpoint_interval` nodes and
    at the end of the run. Wall time covers flow batch draws but not the
    construction of the environment.

    Args:
        run (PlannerRun):
            the problem, budget and planner kind
        sampler (Sampler):
            the sampling distribution; for INFORMED_RRT_STAR it is wrapped in
            an `InformedSampler` unless it already is one

    Returns:
        tuple[FloatArray | None, RunMetrics]:
            the best trajectory from q_init to q_target (rows are
            configurations) or None if no solution was found, and the metrics
    """
    match run.kind:
        case PlannerKind.RRT_STAR:
            return _plan_rrt_star(run, sampler)
        case PlannerKind.BI_RRT_STAR:
            return _plan_bi_rrt_star(run, sampler)
        case PlannerKind.INFORMED_RRT_STAR:
            if not isinstance(sampler, InformedSampler):
                sampler = InformedSampler(
                    sampler,
                    run.q_init,
                    run.q_target,
                    make_rng(run.seed, STREAM_PLAN, 1),
                )
            return _plan_rrt_star(run, sampler)
