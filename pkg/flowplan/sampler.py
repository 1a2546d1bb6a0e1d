""" Sampling distributions for the RRT* family.

Important classes:
    - `UniformSampler`: i.i.d. U(0,1)^d.
    - `FlowSampler`: draws from a trained `FlowModel` in batches and hands the
      batch out one configuration at a time, redrawing once it is used up.
    - `MixtureSampler`: uniform with probability ε, the inner flow sampler
      otherwise. Keeps the planner probabilistically complete.
    - `InformedSampler`: restricts an inner sampler to the informed set
      {x : |x - q_init| + |x - q_target| <= c_best} once a solution exists.

Every sampler owns its `np.random.Generator`, so a run is reproducible from
its seed.

Example:
flow = FlowSampler(model, ctx, make_rng(seed, STREAM_PLAN))
sampler = MixtureSampler(flow, MIXTURE_EPSILON, make_rng(seed, STREAM_PLAN, 1))
q = sampler.sample_next()
"""

from __future__ import annotations

import logging
import math
import time
from abc import ABC, abstractmethod

import numpy as np

from flowplan.env import Config
from flowplan.flow import ContextLike, FlowModel, sample
from flowplan.utils import FloatArray

MIXTURE_EPSILON = 0.1
FLOW_BATCH_SIZE = 10_000
MAX_INFORMED_TRIES = 10_000


class Sampler(ABC):
    """Source of candidate configurations for a planner."""

    def __init__(self, dim: int):
        self.dim = dim

    @abstractmethod
    def sample_next(self) -> Config:
        """Returns the next candidate configuration in [0,1]^dim."""
        raise NotImplementedError

    @property
    def batch_draws(self) -> int:
        """How many flow batches were drawn so far."""
        return 0

    @property
    def draw_seconds(self) -> float:
        """Wall time spent drawing flow batches."""
        return 0.0


class UniformSampler(Sampler):
    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__(dim)
        self.rng = rng

    def sample_next(self) -> Config:
        return self.rng.random(self.dim)


class FlowSampler(Sampler):
    """Hands out a pre-drawn batch of flow samples.

    The first batch is drawn lazily on the first request. Every later batch
    is a "redraw" and is logged at INFO level.
    """

    def __init__(
        self,
        model: FlowModel,
        ctx: ContextLike,
        rng: np.random.Generator,
        batch_size: int = FLOW_BATCH_SIZE,
    ):
        super().__init__(model.dim)
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.model = model
        self.ctx = ctx
        self.rng = rng
        self.batch_size = batch_size
        self._batch: FloatArray | None = None
        self._cursor = 0
        self._batch_draws = 0
        self._draw_seconds = 0.0

    @property
    def batch_draws(self) -> int:
        return self._batch_draws

    @property
    def draw_seconds(self) -> float:
        return self._draw_seconds

    def _draw(self) -> None:
        start = time.perf_counter()
        self._batch = sample(self.model, self.ctx, self.batch_size, self.rng)
        self._draw_seconds += time.perf_counter() - start
        self._cursor = 0
        self._batch_draws += 1
        if self._batch_draws == 1:
            logging.debug(f"Drew initial flow batch of {self.batch_size}")
        else:
            logging.info(
                f"Flow batch exhausted, redraw #{self._batch_draws - 1} "
                f"of {self.batch_size} samples"
            )

    def sample_next(self) -> Config:
        if self._batch is None or self._cursor == len(self._batch):
            self._draw()
        assert self._batch is not None
        q = self._batch[self._cursor]
        self._cursor += 1
        return q


class MixtureSampler(Sampler):
    """Uniform with probability `epsilon`, otherwise `inner`."""

    def __init__(self, inner: Sampler, epsilon: float, rng: np.random.Generator):
        super().__init__(inner.dim)
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
        self.inner = inner
        self.epsilon = epsilon
        self.rng = rng
        self.uniform_draws = 0
        self.inner_draws = 0

    @property
    def batch_draws(self) -> int:
        return self.inner.batch_draws

    @property
    def draw_seconds(self) -> float:
        return self.inner.draw_seconds

    def sample_next(self) -> Config:
        if self.rng.random() < self.epsilon:
            self.uniform_draws += 1
            return self.rng.random(self.dim)
        self.inner_draws += 1
        return self.inner.sample_next()


def in_informed_set(
    x: FloatArray, q_init: Config, q_target: Config, c_best: float
) -> bool:
    heuristic = np.linalg.norm(x - q_init) + np.linalg.norm(x - q_target)
    return bool(heuristic <= c_best)


def rotation_to_world_frame(q_init: Config, q_target: Config) -> FloatArray:
    """Rotation taking the first axis onto the start-to-target direction."""
    dim = len(q_init)
    a1 = (q_target - q_init) / np.linalg.norm(q_target - q_init)
    e1 = np.zeros(dim)
    e1[0] = 1.0
    u, _, vt = np.linalg.svd(np.outer(a1, e1))
    det_factor = np.linalg.det(u) * np.linalg.det(vt)
    rotation: FloatArray = u @ np.diag([1.0] * (dim - 1) + [det_factor]) @ vt
    return rotation


class InformedSampler(Sampler):
    """Restricts `inner` to the informed set of the current best cost.

    Until `set_best_cost` reports a finite cost, draws pass through
    unchanged. Afterwards a uniform inner sampler is replaced by direct
    sampling of the prolate hyperspheroid (points falling outside the unit
    cube are rejected); any other inner sampler is rejection-filtered.
    Rejected draws are counted in `rejected` and never reach the planner.
    """

    def __init__(
        self,
        inner: Sampler,
        q_init: Config,
        q_target: Config,
        rng: np.random.Generator,
    ):
        super().__init__(inner.dim)
        self.inner = inner
        self.q_init = np.asarray(q_init, dtype=np.float64)
        self.q_target = np.asarray(q_target, dtype=np.float64)
        self.rng = rng
        self.c_best = math.inf
        self.c_min = float(np.linalg.norm(self.q_target - self.q_init))
        self.rejected = 0
        self._center = (self.q_init + self.q_target) / 2.0
        self._rotation = (
            rotation_to_world_frame(self.q_init, self.q_target)
            if self.c_min > 0.0
            else np.eye(self.dim)
        )

    @property
    def batch_draws(self) -> int:
        return self.inner.batch_draws

    @property
    def draw_seconds(self) -> float:
        return self.inner.draw_seconds

    def set_best_cost(self, c_best: float) -> None:
        self.c_best = min(self.c_best, c_best)

    def _sample_hyperspheroid(self) -> Config:
        r1 = self.c_best / 2.0
        r2 = math.sqrt(max(self.c_best**2 - self.c_min**2, 0.0)) / 2.0
        scale = np.array([r1] + [r2] * (self.dim - 1))
        while True:
            direction = self.rng.standard_normal(self.dim)
            direction /= np.linalg.norm(direction)
            ball = direction * self.rng.random() ** (1.0 / self.dim)
            x = self._rotation @ (scale * ball) + self._center
            if np.all((x >= 0.0) & (x <= 1.0)):
                return x
            self.rejected += 1

    def sample_next(self) -> Config:
        if math.isinf(self.c_best):
            return self.inner.sample_next()
        if isinstance(self.inner, UniformSampler):
            return self._sample_hyperspheroid()
        for _ in range(MAX_INFORMED_TRIES):
            x = self.inner.sample_next()
            if in_informed_set(x, self.q_init, self.q_target, self.c_best):
                return x
            self.rejected += 1
        logging.debug(
            f"No inner sample inside the informed set after {MAX_INFORMED_TRIES} "
            "tries, sampling the hyperspheroid directly"
        )
        return self._sample_hyperspheroid()
