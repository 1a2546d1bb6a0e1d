import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowplan import env as env_module
from flowplan.env import (
    ENCODING_POINTS,
    MAX_OBS_RATIO,
    SENTINEL,
    Environment,
    EnvironmentFileError,
    EnvironmentGenerationError,
    Obstacle,
    Robot,
    edge_valid,
    empty_environment,
    encode_workspace,
    forward_kinematics,
    generate_environment,
    is_valid,
    load_environment,
    obstacle_fraction,
    save_environment,
)


def single_disc(robot: Robot = Robot.POINT2, r: float = 0.1) -> Environment:
    return Environment(
        robot=robot, seed=3, obs_ratio=0.05, obstacles=(Obstacle(0.5, 0.5, r),)
    )


def test_generate_environment_is_deterministic() -> None:
    a = generate_environment(7, Robot.POINT2, 0.3)
    b = generate_environment(7, Robot.POINT2, 0.3)
    assert a == b
    assert a.to_json_dict() == b.to_json_dict()
    assert generate_environment(8, Robot.POINT2, 0.3) != a


def test_generate_environment_reaches_ratio() -> None:
    env = generate_environment(7, Robot.POINT2, 0.3)
    assert 0.25 <= obstacle_fraction(env) <= 0.35


def test_generate_environment_floor() -> None:
    env = generate_environment(1, Robot.POINT2, 0.0)
    assert len(env.obstacles) >= 1
    assert env.obs_ratio == 0.05


def test_generate_environment_too_dense(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(env_module, "MAX_DISCS", 3)
    with pytest.raises(EnvironmentGenerationError):
        generate_environment(1, Robot.POINT2, MAX_OBS_RATIO)


@pytest.mark.parametrize("obs_ratio", [MAX_OBS_RATIO + 0.01, 0.99, -0.1])
def test_generate_environment_rejects_ratio(obs_ratio: float) -> None:
    with pytest.raises(ValueError):
        generate_environment(1, Robot.POINT2, obs_ratio)


def test_generate_environment_densest_ratio() -> None:
    env = generate_environment(5, Robot.POINT2, MAX_OBS_RATIO)
    assert len(env.obstacles) <= 500
    assert obstacle_fraction(env) >= MAX_OBS_RATIO - 0.05


def test_only_the_baseline_has_no_obstacles() -> None:
    baseline = empty_environment(Robot.ARM4, seed=2)
    assert baseline.obstacles == () and baseline.obs_ratio == 0.0
    assert obstacle_fraction(baseline) == 0.0
    with pytest.raises(ValueError):
        Environment(robot=Robot.POINT2, seed=0, obs_ratio=0.3, obstacles=())


def test_obstacle_must_touch_unit_square() -> None:
    with pytest.raises(ValueError):
        Obstacle(2.0, 2.0, 0.1)
    with pytest.raises(ValueError):
        Obstacle(0.5, 0.5, 0.0)


def test_encoding_single_disc() -> None:
    enc = encode_workspace(single_disc())
    assert enc.points.shape == (2 * ENCODING_POINTS,)
    assert enc.mask.all()
    pts = enc.points.reshape(-1, 2)
    dist = np.linalg.norm(pts - (0.5, 0.5), axis=1)
    assert np.allclose(dist, 0.1, atol=1e-9)


def test_encoding_is_deterministic() -> None:
    env = generate_environment(5, Robot.POINT2, 0.2)
    a, b = encode_workspace(env), encode_workspace(env)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.mask, b.mask)


def test_encoding_perimeter_allocation() -> None:
    env = Environment(
        robot=Robot.POINT2,
        seed=0,
        obs_ratio=0.05,
        obstacles=(Obstacle(0.3, 0.3, 0.1), Obstacle(0.7, 0.7, 0.05)),
    )
    pts = encode_workspace(env).points.reshape(-1, 2)
    near_first = np.isclose(np.linalg.norm(pts - (0.3, 0.3), axis=1), 0.1)
    near_second = np.isclose(np.linalg.norm(pts - (0.7, 0.7), axis=1), 0.05)
    assert abs(int(near_first.sum()) - 43) <= 1
    assert abs(int(near_second.sum()) - 21) <= 1
    assert near_first.sum() + near_second.sum() == ENCODING_POINTS


def test_encoding_padding() -> None:
    # mostly outside the unit square, the clipped points become padding
    env = Environment(
        robot=Robot.POINT2, seed=0, obs_ratio=0.05, obstacles=(Obstacle(0.0, 0.0, 0.1),)
    )
    enc = encode_workspace(env)
    assert 0 < enc.mask.sum() < ENCODING_POINTS
    pts = enc.points.reshape(-1, 2)
    assert np.all(pts[~enc.mask] == SENTINEL)
    assert np.all(pts[enc.mask] >= 0.0)

    empty = encode_workspace(empty_environment(Robot.POINT2))
    assert not empty.mask.any()
    assert np.all(empty.points == SENTINEL)


@pytest.mark.parametrize(
    "config, tip",
    [
        ((0.5, 0.5, 0.5, 0.5), (0.8, 0.5)),
        ((0.5, 0.5, 0.75, 0.5), (0.5, 0.8)),
        ((0.5, 0.5, 0.75, 0.75), (0.35, 0.65)),
    ],
)
def test_forward_kinematics(
    config: tuple[float, ...], tip: tuple[float, float]
) -> None:
    (base, elbow), (elbow2, end) = forward_kinematics(np.array(config))
    assert np.allclose(base, config[:2])
    assert np.array_equal(elbow, elbow2)
    assert np.linalg.norm(elbow - base) == pytest.approx(0.15)
    assert np.allclose(end, tip, atol=1e-12)


def test_forward_kinematics_needs_arm() -> None:
    with pytest.raises(ValueError):
        forward_kinematics(np.array([0.5, 0.5]), Robot.POINT2)


def test_is_valid_point() -> None:
    env = single_disc()
    assert not is_valid(np.array([0.5, 0.5]), env)
    assert is_valid(np.array([0.0, 0.0]), env)
    with pytest.raises(ValueError):
        is_valid(np.array([0.5, 0.5, 0.5]), env)


def test_is_valid_arm() -> None:
    # both links lie on y=0.5, link 2 runs from x=0.65 to x=0.8
    config = np.array([0.5, 0.5, 0.5, 0.5])
    assert is_valid(config, empty_environment(Robot.ARM4))
    link2_mid = Environment(
        robot=Robot.ARM4,
        seed=0,
        obs_ratio=0.05,
        obstacles=(Obstacle(0.725, 0.5, 0.02),),
    )
    assert not is_valid(config, link2_mid)
    assert is_valid(np.array([0.5, 0.2, 0.5, 0.5]), link2_mid)
    base_inside = Environment(
        robot=Robot.ARM4, seed=0, obs_ratio=0.05, obstacles=(Obstacle(0.5, 0.5, 0.01),)
    )
    assert not is_valid(np.array([0.5, 0.5, 0.0, 0.5]), base_inside)


def test_edge_valid() -> None:
    env = single_disc()
    a = np.array([0.1, 0.1])
    assert edge_valid(a, a, env)
    assert not edge_valid(np.array([0.2, 0.5]), np.array([0.8, 0.5]), env)
    assert not edge_valid(np.array([0.5, 0.5]), np.array([0.5, 0.5]), env)


def test_edge_valid_grazing_matches_fine_oracle() -> None:
    env = single_disc()
    a, b = np.array([0.2, 0.399]), np.array([0.8, 0.399])
    assert edge_valid(a, b, env) == edge_valid(a, b, env, resolution=1e-5)
    assert edge_valid(a, b, env)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4),
)
def test_edge_valid_symmetric(coords: list[float]) -> None:
    env = generate_environment(11, Robot.POINT2, 0.3)
    a, b = np.array(coords[:2]), np.array(coords[2:])
    assert edge_valid(a, b, env) == edge_valid(b, a, env)
    assert edge_valid(a, a, env) == is_valid(a, env)


def test_environment_file_round_trip(tmp_path: Path) -> None:
    env = generate_environment(13, Robot.ARM4, 0.2)
    path = tmp_path / "env.json"
    save_environment(env, path)
    loaded = load_environment(path)
    assert loaded == env
    assert all(
        math.isclose(o.r, p.r, rel_tol=0, abs_tol=0)
        for o, p in zip(env.obstacles, loaded.obstacles)
    )

    path.write_text('{"version": 99}')
    with pytest.raises(EnvironmentFileError, match="env.json"):
        load_environment(path)


if __name__ == "__main__":
    test_generate_environment_is_deterministic()
    test_encoding_single_disc()
    test_edge_valid()
