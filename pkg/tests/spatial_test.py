import numpy as np
import pytest

from flowplan.spatial import SpatialIndex


def linear_scan(points: np.ndarray, q: np.ndarray) -> int:
    return int(np.argmin(((points - q) ** 2).sum(axis=1)))


def test_single_point() -> None:
    index = SpatialIndex(2)
    assert index.add(np.array([0.3, 0.4])) == 0
    assert index.nearest(np.array([0.9, 0.9])) == 0
    assert len(index) == 1


def test_empty_index() -> None:
    with pytest.raises(ValueError):
        SpatialIndex(2).nearest(np.zeros(2))
    assert SpatialIndex(2).within(np.zeros(2), 1.0) == []


@pytest.mark.parametrize("dim", [2, 4])
def test_nearest_matches_linear_scan(dim: int) -> None:
    rng = np.random.default_rng(dim)
    points = rng.random((1000, dim))
    index = SpatialIndex(dim, capacity=8)
    for p in points:
        index.add(p)
    assert np.array_equal(index.points, points)
    for q in rng.random((1000, dim)):
        assert index.nearest(q) == linear_scan(points, q)


def test_nearest_while_growing() -> None:
    rng = np.random.default_rng(1)
    index = SpatialIndex(2)
    points = rng.random((700, 2))
    for i, p in enumerate(points):
        index.add(p)
        q = rng.random(2)
        assert index.nearest(q) == linear_scan(points[: i + 1], q)


def test_ties_go_to_lowest_index() -> None:
    index = SpatialIndex(2)
    for _ in range(600):
        index.add(np.array([0.5, 0.5]))
    index.add(np.array([0.1, 0.1]))
    assert index.nearest(np.array([0.6, 0.6])) == 0

    sym = SpatialIndex(1)
    sym.add(np.array([0.4]))
    sym.add(np.array([0.6]))
    assert sym.nearest(np.array([0.5])) == 0


def test_within() -> None:
    rng = np.random.default_rng(2)
    points = rng.random((900, 3))
    index = SpatialIndex(3)
    for p in points:
        index.add(p)
    q = np.array([0.5, 0.5, 0.5])
    expected = np.flatnonzero(np.linalg.norm(points - q, axis=1) <= 0.2).tolist()
    assert index.within(q, 0.2) == expected


def test_points_view_is_read_only() -> None:
    index = SpatialIndex(2)
    index.add(np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        index.points[0, 0] = 1.0
    with pytest.raises(ValueError):
        index.add(np.zeros(3))


if __name__ == "__main__":
    test_nearest_matches_linear_scan(2)
