""" Workspaces, robots and collision checking.

Important classes:
    - `Robot`: the robot kind, a 2 dof point robot or a 4 dof planar arm
      (base x, base y and two revolute joints). Every configuration lives in
      the normalized C-space [0,1]^d.
    - `Obstacle`: a disc in the unit-square workspace.
    - `Environment`: the obstacles, the robot and the seed they came from.
      Built with `generate_environment` and stored with `save_environment`.
    - `WorkspaceEncoding`: the fixed-size obstacle point cloud fed to the
      flow's conditioner networks, built with `encode_workspace`.

Example:
env = generate_environment(7, Robot.POINT2, 0.3)
if is_valid(np.array([0.1, 0.1]), env) and edge_valid(a, b, env):
    ...
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from flowplan.utils import (
    STREAM_ENCODING,
    STREAM_ENV_LAYOUT,
    STREAM_ENV_MONTE_CARLO,
    FloatArray,
    make_rng,
    write_atomic,
)

ENV_FILE_VERSION = 1

MIN_OBS_RATIO = 0.05
MAX_OBS_RATIO = 0.6
MIN_RADIUS = 0.03
MAX_RADIUS = 0.12
MAX_DISCS = 500
MONTE_CARLO_POINTS = 10_000

ENCODING_POINTS = 64
SENTINEL = -1.0

LINK_LENGTHS = (0.15, 0.15)
COLLISION_RESOLUTION = 0.005

Config = FloatArray


class EnvironmentGenerationError(Exception):
    """Raised when the requested obstacle ratio can't be reached with
    `MAX_DISCS` discs."""


class EnvironmentFileError(Exception):
    """Raised when an environment file is unreadable or has the wrong version."""


class Robot(Enum):
    """The robot kind, values are the names used in files and on the CLI."""

    POINT2 = "point2"
    ARM4 = "arm4"

    @property
    def dim(self) -> int:
        """Dimensionality of the robot's C-space."""
        match self:
            case Robot.POINT2:
                return 2
            case Robot.ARM4:
                return 4


@dataclass(frozen=True)
class Obstacle:
    """A disc obstacle in workspace units."""

    cx: float
    cy: float
    r: float

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise ValueError(f"Obstacle radius must be positive, got {self.r}")
        # distance from the center to the unit square
        dx = max(-self.cx, 0.0, self.cx - 1.0)
        dy = max(-self.cy, 0.0, self.cy - 1.0)
        if dx * dx + dy * dy > self.r * self.r:
            raise ValueError(f"{self} does not intersect the unit square")

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.r


@dataclass(frozen=True, kw_only=True)
class Environment:
    """A 2D workspace with disc obstacles together with the robot moving in it.

    Environments are immutable and safe to share between threads and
    processes.

    Attributes:
        robot (Robot):
            the robot kind
        seed (int):
            the seed the environment was generated from, it also seeds the
            workspace encoding
        obs_ratio (float):
            the requested obstacle area fraction
        obstacles (tuple[Obstacle, ...]):
            the obstacles, empty only in the obstacle-free baseline with
            obs_ratio 0
    """

    robot: Robot
    seed: int
    obs_ratio: float
    obstacles: tuple[Obstacle, ...]

    def __post_init__(self) -> None:
        if not self.obstacles and self.obs_ratio != 0.0:
            raise ValueError(
                f"An environment with obs_ratio {self.obs_ratio} needs obstacles"
            )

    @cached_property
    def centers(self) -> FloatArray:
        centers = np.array(
            [(o.cx, o.cy) for o in self.obstacles], dtype=np.float64
        ).reshape(-1, 2)
        centers.flags.writeable = False
        return centers

    @cached_property
    def radii(self) -> FloatArray:
        radii = np.array([o.r for o in self.obstacles], dtype=np.float64)
        radii.flags.writeable = False
        return radii

    def to_json_dict(self) -> dict[str, Any]:
        """Returns a dictionary that can be serialized to json.

        Can be re-parsed with Environment.from_json_dict.

        Returns:
            dict[str, Any]:
                the dictionary
        """
        return {
            "version": ENV_FILE_VERSION,
            "robot": self.robot.value,
            "seed": self.seed,
            "obs_ratio": self.obs_ratio,
            "obstacles": [{"cx": o.cx, "cy": o.cy, "r": o.r} for o in self.obstacles],
        }

    @staticmethod
    def from_json_dict(d: dict[str, Any]) -> Environment:
        """Returns an environment parsed from a json dictionary.

        Args:
            d (dict[str, Any]):
                the dictionary

        Returns:
            Environment:
                the environment
        """
        if d.get("version") != ENV_FILE_VERSION:
            raise EnvironmentFileError(
                f"Unsupported environment version: {d.get('version')}"
            )
        return Environment(
            robot=Robot(d["robot"]),
            seed=int(d["seed"]),
            obs_ratio=float(d["obs_ratio"]),
            obstacles=tuple(
                Obstacle(cx=float(o["cx"]), cy=float(o["cy"]), r=float(o["r"]))
                for o in d["obstacles"]
            ),
        )


@dataclass(frozen=True, eq=False)
class WorkspaceEncoding:
    """The obstacle point cloud ω.

    Attributes:
        points (FloatArray):
            flat (x0, y0, x1, y1, ...) vector of 2 * ENCODING_POINTS values,
            padded slots hold SENTINEL
        mask (npt.NDArray[np.bool_]):
            False for padded slots
    """

    points: FloatArray
    mask: npt.NDArray[np.bool_]

    def __post_init__(self) -> None:
        assert self.points.shape == (2 * ENCODING_POINTS,)
        assert self.mask.shape == (ENCODING_POINTS,)


def empty_environment(robot: Robot, seed: int = 0) -> Environment:
    """The obstacle-free baseline.

    Used as the default workspace of `flowplan plan` and `flowplan gallery`
    and as an oracle in tests, where optimal point robot paths are straight
    lines.
    """
    return Environment(robot=robot, seed=seed, obs_ratio=0.0, obstacles=())


def generate_environment(seed: int, robot: Robot, obs_ratio: float) -> Environment:
    """Procedurally generates an environment.

    Discs with uniform centers and radii uniform in [MIN_RADIUS, MAX_RADIUS]
    are added until a fixed Monte-Carlo probe set reports an obstacle fraction
    of at least `obs_ratio`. Ratios below MIN_OBS_RATIO are raised to it,
    ratios above MAX_OBS_RATIO are rejected.

    Args:
        seed (int):
            non-negative seed, the result only depends on it and the arguments
        robot (Robot):
            the robot kind
        obs_ratio (float):
            requested obstacle area fraction, at most MAX_OBS_RATIO

    Returns:
        Environment:
            the environment
    """
    if not 0.0 <= obs_ratio <= MAX_OBS_RATIO:
        raise ValueError(
            f"obs_ratio must be in [0, {MAX_OBS_RATIO}], got {obs_ratio}"
        )
    target = max(obs_ratio, MIN_OBS_RATIO)

    rng = make_rng(seed, STREAM_ENV_LAYOUT)
    probe = make_rng(seed, STREAM_ENV_MONTE_CARLO).random((MONTE_CARLO_POINTS, 2))
    covered = np.zeros(MONTE_CARLO_POINTS, dtype=bool)
    obstacles: list[Obstacle] = []
    while covered.mean() < target:
        if len(obstacles) == MAX_DISCS:
            raise EnvironmentGenerationError(
                f"obs_ratio {obs_ratio} not reached with {MAX_DISCS} discs "
                f"(seed {seed}), the request is too dense"
            )
        cx, cy = rng.random(2)
        r = rng.uniform(MIN_RADIUS, MAX_RADIUS)
        obstacles.append(Obstacle(cx=float(cx), cy=float(cy), r=float(r)))
        covered |= ((probe - (cx, cy)) ** 2).sum(axis=1) <= r * r

    logging.debug(
        f"Generated environment seed={seed} with {len(obstacles)} discs, "
        f"fraction {covered.mean():.3f}"
    )
    return Environment(
        robot=robot, seed=seed, obs_ratio=target, obstacles=tuple(obstacles)
    )


def obstacle_fraction(
    env: Environment, n: int = MONTE_CARLO_POINTS, seed: int = 0
) -> float:
    """Monte-Carlo estimate of the workspace area covered by obstacles."""
    if not env.obstacles:
        return 0.0
    probe = np.random.default_rng(seed).random((n, 2))
    d2 = ((probe[:, None, :] - env.centers[None, :, :]) ** 2).sum(axis=2)
    return float((d2 <= env.radii**2).any(axis=1).mean())


def _largest_remainder(weights: FloatArray, total: int) -> npt.NDArray[np.int64]:
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[: total - int(counts.sum())]] += 1
    return counts


def encode_workspace(env: Environment) -> WorkspaceEncoding:
    """Samples the obstacle boundaries into a fixed-size point cloud.

    Points are distributed over the discs proportionally to their perimeter
    (largest-remainder rounding) and spaced evenly around each disc starting
    at a random phase seeded by `env.seed`. Boundary points outside the unit
    square are dropped, the kept points are packed first and the tail is
    padded with SENTINEL.
    """
    points = np.full((ENCODING_POINTS, 2), SENTINEL)
    mask = np.zeros(ENCODING_POINTS, dtype=bool)
    if env.obstacles:
        rng = make_rng(env.seed, STREAM_ENCODING)
        counts = _largest_remainder(2.0 * np.pi * env.radii, ENCODING_POINTS)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=len(env.obstacles))
        parts = []
        for center, r, k, phase in zip(env.centers, env.radii, counts, phases):
            angles = phase + 2.0 * np.pi * np.arange(k) / max(k, 1)
            parts.append(center + r * np.stack([np.cos(angles), np.sin(angles)], 1))
        cloud = np.concatenate(parts)
        cloud = cloud[np.all((cloud >= 0.0) & (cloud <= 1.0), axis=1)]
        points[: len(cloud)] = cloud
        mask[: len(cloud)] = True
    flat = points.reshape(-1)
    flat.flags.writeable = False
    mask.flags.writeable = False
    return WorkspaceEncoding(points=flat, mask=mask)


def _check_dim(configs: FloatArray, robot: Robot) -> None:
    if configs.shape[-1] != robot.dim:
        raise ValueError(
            f"{robot.value} configurations have {robot.dim} coordinates, "
            f"got {configs.shape[-1]}"
        )


def arm_points(configs: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Base, elbow and tip positions of a batch of planar arm configurations.

    Args:
        configs (FloatArray):
            (n, 4) array of (x_base, y_base, φ0, φ1), angles mapped from [0,1]
            to [-π, π]

    Returns:
        tuple[FloatArray, FloatArray, FloatArray]:
            three (n, 2) arrays
    """
    base = configs[:, :2]
    phi0 = -np.pi + 2.0 * np.pi * configs[:, 2]
    phi01 = phi0 - np.pi + 2.0 * np.pi * configs[:, 3]
    elbow = base + LINK_LENGTHS[0] * np.stack([np.cos(phi0), np.sin(phi0)], axis=1)
    tip = elbow + LINK_LENGTHS[1] * np.stack([np.cos(phi01), np.sin(phi01)], axis=1)
    return base, elbow, tip


def forward_kinematics(
    config: Config, robot: Robot = Robot.ARM4
) -> list[tuple[FloatArray, FloatArray]]:
    """The two link segments of a planar arm configuration.

    Returns:
        list[tuple[FloatArray, FloatArray]]:
            [(base, elbow), (elbow, tip)]
    """
    if robot is not Robot.ARM4:
        raise ValueError(f"forward kinematics is defined for arm4, not {robot.value}")
    _check_dim(config, robot)
    base, elbow, tip = arm_points(np.asarray(config, dtype=np.float64)[None, :])
    return [(base[0], elbow[0]), (elbow[0], tip[0])]


def _segments_hit(
    p0: FloatArray, p1: FloatArray, centers: FloatArray, radii: FloatArray
) -> npt.NDArray[np.bool_]:
    """Which of the n segments p0[i]→p1[i] touch any disc."""
    d = p1 - p0
    dd = (d * d).sum(axis=1)
    rel = centers[None, :, :] - p0[:, None, :]
    t = (rel * d[:, None, :]).sum(axis=2) / np.where(dd > 0, dd, 1.0)[:, None]
    t = np.clip(t, 0.0, 1.0)
    closest = p0[:, None, :] + t[..., None] * d[:, None, :]
    dist2 = ((centers[None, :, :] - closest) ** 2).sum(axis=2)
    hit: npt.NDArray[np.bool_] = (dist2 <= radii**2).any(axis=1)
    return hit


def valid_mask(configs: FloatArray, env: Environment) -> npt.NDArray[np.bool_]:
    """Vectorized `is_valid` over the rows of an (n, d) array."""
    configs = np.atleast_2d(np.asarray(configs, dtype=np.float64))
    _check_dim(configs, env.robot)
    if not env.obstacles:
        return np.ones(len(configs), dtype=bool)
    match env.robot:
        case Robot.POINT2:
            d2 = ((configs[:, None, :] - env.centers[None, :, :]) ** 2).sum(axis=2)
            inside: npt.NDArray[np.bool_] = (d2 <= env.radii**2).any(axis=1)
            return ~inside
        case Robot.ARM4:
            base, elbow, tip = arm_points(configs)
            hit = _segments_hit(base, elbow, env.centers, env.radii)
            hit |= _segments_hit(elbow, tip, env.centers, env.radii)
            return ~hit


def is_valid(config: Config, env: Environment) -> bool:
    """Is the configuration collision free?

    A point robot is valid outside every disc, an arm is valid when neither
    link segment (and therefore not its base) touches a disc.
    """
    config = np.asarray(config, dtype=np.float64)
    if config.ndim != 1:
        raise ValueError(f"expected a single configuration, got shape {config.shape}")
    return bool(valid_mask(config[None, :], env)[0])


def interpolate(a: Config, b: Config, resolution: float) -> FloatArray:
    """Points along the segment a→b, endpoints included, no further apart
    than `resolution`."""
    steps = max(1, math.ceil(float(np.linalg.norm(b - a)) / resolution))
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    points: FloatArray = a + t * (b - a)
    return points


def edge_valid(
    a: Config, b: Config, env: Environment, resolution: float = COLLISION_RESOLUTION
) -> bool:
    """Is the straight C-space segment between a and b collision free?

    The segment is discretized with spacing at most `resolution`; the
    endpoints are ordered first so the check is symmetric bit for bit.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if tuple(b.tolist()) < tuple(a.tolist()):
        a, b = b, a
    return bool(valid_mask(interpolate(a, b, resolution), env).all())


def sample_valid_config(
    env: Environment, rng: np.random.Generator, max_tries: int = 100_000
) -> Config:
    """Rejection-samples a uniformly distributed valid configuration."""
    for _ in range(max_tries):
        q = rng.random(env.robot.dim)
        if is_valid(q, env):
            return q
    raise EnvironmentGenerationError(
        f"No valid configuration found in {max_tries} tries (seed {env.seed})"
    )


def save_environment(env: Environment, path: Path) -> None:
    write_atomic(path, json.dumps(env.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_environment(path: Path) -> Environment:
    try:
        with open(path, "r") as f:
            return Environment.from_json_dict(json.load(f))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise EnvironmentFileError(f"{path}: {e}") from e
    except EnvironmentFileError as e:
        raise EnvironmentFileError(f"{path}: {e}") from e
