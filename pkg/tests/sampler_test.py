import logging

import numpy as np
import pytest
from scipy import stats

from flowplan.env import Robot, empty_environment, encode_workspace
from flowplan.flow import ConditioningContext, FlowLayout, context_dim, init_flow
from flowplan.sampler import (
    FlowSampler,
    InformedSampler,
    MixtureSampler,
    UniformSampler,
    in_informed_set,
    rotation_to_world_frame,
)


def identity_flow_sampler(dim: int, seed: int = 0) -> FlowSampler:
    model = init_flow(
        FlowLayout(dim=dim, context_dim=context_dim(dim), hidden=(8,)),
        np.random.default_rng(0),
    )
    ctx = ConditioningContext(encode_workspace(empty_environment(Robot.POINT2)), dim)
    return FlowSampler(model, ctx, np.random.default_rng(seed))


def test_uniform_is_deterministic() -> None:
    a = UniformSampler(4, np.random.default_rng(3))
    b = UniformSampler(4, np.random.default_rng(3))
    for _ in range(10):
        assert np.array_equal(a.sample_next(), b.sample_next())


def test_mixture_fraction() -> None:
    sampler = MixtureSampler(
        UniformSampler(2, np.random.default_rng(0)), 0.1, np.random.default_rng(1)
    )
    n = 100_000
    for _ in range(n):
        sampler.sample_next()
    assert sampler.uniform_draws + sampler.inner_draws == n
    assert sampler.uniform_draws / n == pytest.approx(0.1, abs=0.01)


def test_degenerate_mixture_is_uniform() -> None:
    sampler = MixtureSampler(identity_flow_sampler(2), 1.0, np.random.default_rng(2))
    draws = np.array([sampler.sample_next() for _ in range(10_000)])
    assert sampler.inner_draws == 0
    assert sampler.batch_draws == 0
    for axis in range(2):
        assert stats.kstest(draws[:, axis], "uniform").pvalue > 0.01


def test_mixture_epsilon_range() -> None:
    with pytest.raises(ValueError):
        MixtureSampler(
            UniformSampler(2, np.random.default_rng(0)), 1.5, np.random.default_rng(0)
        )


def test_flow_sampler_redraws_once(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.INFO)
    sampler = identity_flow_sampler(2)
    for _ in range(10_001):
        q = sampler.sample_next()
        assert np.all((q > 0.0) & (q < 1.0))
    redraws = [r for r in caplog.records if "redraw" in r.getMessage()]
    assert len(redraws) == 1
    assert sampler.batch_draws == 2
    assert sampler.draw_seconds > 0.0


def test_flow_sampler_is_deterministic() -> None:
    a, b = identity_flow_sampler(3, seed=5), identity_flow_sampler(3, seed=5)
    for _ in range(20):
        assert np.array_equal(a.sample_next(), b.sample_next())


def test_rotation_to_world_frame() -> None:
    q_init, q_target = np.array([0.1, 0.2, 0.3]), np.array([0.7, 0.1, 0.9])
    rotation = rotation_to_world_frame(q_init, q_target)
    direction = (q_target - q_init) / np.linalg.norm(q_target - q_init)
    assert np.allclose(rotation @ np.array([1.0, 0.0, 0.0]), direction)
    assert np.allclose(rotation @ rotation.T, np.eye(3))
    assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_informed_passes_through_without_solution() -> None:
    q_init, q_target = np.array([0.1, 0.1]), np.array([0.9, 0.9])
    plain = UniformSampler(2, np.random.default_rng(4))
    informed = InformedSampler(
        UniformSampler(2, np.random.default_rng(4)),
        q_init,
        q_target,
        np.random.default_rng(5),
    )
    for _ in range(10):
        assert np.array_equal(informed.sample_next(), plain.sample_next())
    assert informed.rejected == 0


@pytest.mark.parametrize("flow_inner", [False, True])
def test_informed_samples_stay_in_set(flow_inner: bool) -> None:
    q_init, q_target = np.array([0.2, 0.3]), np.array([0.8, 0.6])
    inner = (
        identity_flow_sampler(2)
        if flow_inner
        else UniformSampler(2, np.random.default_rng(6))
    )
    informed = InformedSampler(inner, q_init, q_target, np.random.default_rng(7))
    c_best = 1.1 * np.linalg.norm(q_target - q_init)
    informed.set_best_cost(c_best)
    informed.set_best_cost(2.0)
    assert informed.c_best == c_best
    draws = [informed.sample_next() for _ in range(500)]
    assert all(in_informed_set(x, q_init, q_target, c_best) for x in draws)
    assert all(np.all((x >= 0.0) & (x <= 1.0)) for x in draws)
    if flow_inner:
        assert informed.rejected > 0


if __name__ == "__main__":
    test_mixture_fraction()
