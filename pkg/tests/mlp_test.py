import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowplan.mlp import (
    DenseNet,
    DivergenceError,
    OptimizerState,
    init_dense_net,
    net_backward,
    net_forward,
    optimizer_step,
    param_count,
)


def scalar_forward(net: DenseNet, x: list[float]) -> list[float]:
    """Loop-by-loop evaluation of the same arithmetic."""
    h = list(x)
    layers = net.layers()
    for i, (w, b) in enumerate(layers):
        out = []
        for j in range(w.shape[0]):
            acc = float(b[j])
            for k in range(w.shape[1]):
                acc += float(w[j, k]) * h[k]
            out.append(math.tanh(acc) if i < len(layers) - 1 else acc)
        h = out
    return h


def finite_difference_grads(
    net: DenseNet, x: np.ndarray, dy: np.ndarray, h: float = 1e-5
) -> tuple[np.ndarray, np.ndarray]:
    def objective(params: np.ndarray, inp: np.ndarray) -> float:
        return float(net_forward(net.with_params(params), inp) @ dy)

    p_grad = np.zeros(net.n_params)
    for i in range(net.n_params):
        e = np.zeros(net.n_params)
        e[i] = h
        p_grad[i] = (objective(net.params + e, x) - objective(net.params - e, x)) / (
            2 * h
        )
    x_grad = np.zeros(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        x_grad[i] = (objective(net.params, x + e) - objective(net.params, x - e)) / (
            2 * h
        )
    return p_grad, x_grad


@pytest.mark.parametrize(
    "sizes, expected",
    [((2, 4, 1), 17), ((3, 64, 64, 2), 256 + 4160 + 130), ((5, 1), 6)],
)
def test_param_count(sizes: tuple[int, ...], expected: int) -> None:
    assert param_count(sizes) == expected
    net = init_dense_net(sizes, np.random.default_rng(0))
    assert net.n_params == expected


def test_zero_net() -> None:
    net = DenseNet((3, 5, 2), np.zeros(param_count((3, 5, 2))))
    assert np.array_equal(net_forward(net, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_identity_output_layer() -> None:
    net = DenseNet((2, 2), np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    assert np.array_equal(net_forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_forward_matches_scalar_evaluation() -> None:
    net = init_dense_net((2, 4, 1), np.random.default_rng(0), zero_output=False)
    y = net_forward(net, np.array([0.5, -0.5]))
    assert y[0] == pytest.approx(scalar_forward(net, [0.5, -0.5])[0], abs=1e-14)


def test_batched_forward() -> None:
    net = init_dense_net((3, 8, 2), np.random.default_rng(1), zero_output=False)
    xs = np.random.default_rng(2).normal(size=(5, 3))
    batch = net_forward(net, xs)
    for x, y in zip(xs, batch):
        assert np.allclose(net_forward(net, x), y, atol=1e-15)


def test_input_width_mismatch() -> None:
    net = init_dense_net((3, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        net_forward(net, np.zeros(2))
    with pytest.raises(ValueError):
        net_backward(net, np.zeros(3), np.zeros(3))


def test_backward_zero_output_gradient() -> None:
    net = init_dense_net((2, 4, 3), np.random.default_rng(0), zero_output=False)
    p_grad, x_grad = net_backward(net, np.array([0.1, 0.2]), np.zeros(3))
    assert not p_grad.any()
    assert not x_grad.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences(seed: int) -> None:
    rng = np.random.default_rng(seed)
    net = init_dense_net((3, 5, 4, 2), rng, zero_output=False)
    net = net.with_params(net.params + rng.normal(scale=0.1, size=net.n_params))
    x, dy = rng.normal(size=3), rng.normal(size=2)
    p_grad, x_grad = net_backward(net, x, dy)
    p_fd, x_fd = finite_difference_grads(net, x, dy)
    np.testing.assert_allclose(p_grad, p_fd, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(x_grad, x_fd, rtol=1e-4, atol=1e-8)


def test_symmetric_net_has_symmetric_gradient() -> None:
    # both inputs share every weight, so swapping them changes nothing
    w1 = np.array([[0.3, 0.3], [-0.7, -0.7], [0.2, 0.2]])
    b1 = np.array([0.1, 0.0, -0.2])
    w2 = np.array([[0.5, -1.0, 0.25]])
    b2 = np.array([0.05])
    net = DenseNet((2, 3, 1), np.concatenate([w1.ravel(), b1, w2.ravel(), b2]))
    p_grad, x_grad = net_backward(net, np.array([0.4, 0.4]), np.array([1.0]))
    assert x_grad[0] == x_grad[1]
    w1_grad = p_grad[:6].reshape(3, 2)
    assert np.array_equal(w1_grad[:, 0], w1_grad[:, 1])


def test_optimizer_zero_gradient() -> None:
    params = np.array([1.0, -2.0, 3.0])
    state = OptimizerState.zeros(3)
    new_params, new_state = optimizer_step(state, params, np.zeros(3))
    assert np.array_equal(new_params, params)
    assert new_state.step == 1
    assert state.step == 0


def test_optimizer_first_step() -> None:
    params = np.zeros(3)
    grads = np.array([0.5, -3.0, 1e-3])
    state = OptimizerState.zeros(3, step_size=1e-3)
    new_params, _ = optimizer_step(state, params, grads)
    expected = -1e-3 * np.sign(grads) * np.abs(grads) / (np.abs(grads) + 1e-8)
    assert np.allclose(new_params, expected, rtol=1e-12, atol=0)
    assert np.allclose(new_params, -1e-3 * np.sign(grads), rtol=1e-4)


def test_optimizer_symmetric_drift() -> None:
    params = np.zeros(2)
    state = OptimizerState.zeros(2)
    g = np.array([0.7, -0.7])
    for _ in range(2):
        params, state = optimizer_step(state, params, g)
    assert params[0] == -params[1]
    assert len(params) == len(state.m) == len(state.v)


def test_optimizer_non_finite_gradient() -> None:
    state = OptimizerState.zeros(2)
    with pytest.raises(DivergenceError):
        optimizer_step(state, np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        optimizer_step(state, np.zeros(2), np.zeros(3))


def test_non_finite_parameters_rejected() -> None:
    with pytest.raises(DivergenceError):
        DenseNet((1, 1), np.array([np.inf, 0.0]))


if __name__ == "__main__":
    test_forward_matches_scalar_evaluation()
    test_optimizer_first_step()
