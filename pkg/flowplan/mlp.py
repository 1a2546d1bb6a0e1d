""" A minimal dense network with hand-written reverse-mode gradients and an
adaptive-moment optimizer.

The flow's scale and translation conditioners are `DenseNet`s: tanh hidden
layers and an identity output layer. All arithmetic is float64. A net stores
its parameters in one flat vector, per layer the row-major weight matrix
(n_out, n_in) followed by the bias (n_out,).

Example:
net = init_dense_net((2, 64, 64, 1), np.random.default_rng(0))
y, cache = forward_with_cache(net, x)
param_grad, input_grad = backward_from_cache(net, cache, dy)
params, state = optimizer_step(state, params, param_grad)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from flowplan.utils import FloatArray

DEFAULT_STEP_SIZE = 1e-3


class DivergenceError(Exception):
    """Raised when a gradient, loss or parameter becomes non-finite."""


def param_count(sizes: tuple[int, ...]) -> int:
    """Σ (n_in + 1) · n_out over the layers."""
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True, eq=False)
class DenseNet:
    """A fully connected network.

    Attributes:
        sizes (tuple[int, ...]):
            layer widths, input first, output last
        params (FloatArray):
            flat parameter vector of length param_count(sizes)
    """

    sizes: tuple[int, ...]
    params: FloatArray

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ValueError(f"Invalid layer sizes {self.sizes}")
        if self.params.shape != (param_count(self.sizes),):
            raise ValueError(
                f"Expected {param_count(self.sizes)} parameters for {self.sizes}, "
                f"got shape {self.params.shape}"
            )
        if not np.all(np.isfinite(self.params)):
            raise DivergenceError("Non-finite network parameters")

    @property
    def n_params(self) -> int:
        return len(self.params)

    def layers(self) -> list[tuple[FloatArray, FloatArray]]:
        """(weight, bias) views into `params`, one pair per layer."""
        layers = []
        offset = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.params[offset : offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = self.params[offset : offset + n_out]
            offset += n_out
            layers.append((w, b))
        return layers

    def output_layer_is_zero(self) -> bool:
        w, b = self.layers()[-1]
        return not (np.any(w) or np.any(b))

    def with_params(self, params: FloatArray) -> DenseNet:
        return replace(self, params=np.asarray(params, dtype=np.float64))


def init_dense_net(
    sizes: tuple[int, ...], rng: np.random.Generator, zero_output: bool = True
) -> DenseNet:
    """Glorot-uniform weights and zero biases.

    Args:
        sizes (tuple[int, ...]):
            layer widths
        rng (np.random.Generator):
            source of the initial weights
        zero_output (bool):
            zero the output layer so the net computes the zero map
    """
    chunks = []
    n_layers = len(sizes) - 1
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=n_in * n_out)
        if zero_output and i == n_layers - 1:
            w = np.zeros_like(w)
        chunks.extend((w, np.zeros(n_out)))
    return DenseNet(tuple(sizes), np.concatenate(chunks))


def forward_with_cache(
    net: DenseNet, x: FloatArray
) -> tuple[FloatArray, list[FloatArray]]:
    """Evaluates the net and keeps every layer's output for the backward pass.

    Args:
        net (DenseNet):
            the network
        x (FloatArray):
            a single input (n_in,) or a batch (n, n_in)

    Returns:
        tuple[FloatArray, list[FloatArray]]:
            the output (same batch shape as `x`) and the cache
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != net.sizes[0]:
        raise ValueError(f"Expected input width {net.sizes[0]}, got shape {x.shape}")
    activations = [h]
    layers = net.layers()
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        activations.append(h)
    return (h[0] if single else h), activations


def backward_from_cache(
    net: DenseNet, activations: list[FloatArray], output_gradient: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Reverse-mode pass over a cached forward evaluation.

    Gradients of batched evaluations are summed over the batch.

    Returns:
        tuple[FloatArray, FloatArray]:
            the parameter gradient (flat, laid out like `net.params`) and the
            input gradient (same shape as the forward input)
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != activations[-1].shape:
        raise ValueError(
            f"Output gradient shape {np.shape(output_gradient)} does not match "
            f"output shape {activations[-1].shape}"
        )
    layers = net.layers()
    grads: list[FloatArray] = []
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (1.0 - activations[i + 1] ** 2)
        grads.append(g.sum(axis=0))
        grads.append((g.T @ activations[i]).reshape(-1))
        g = g @ w
    grads.reverse()
    return np.concatenate(grads), (g[0] if single else g)


def net_forward(net: DenseNet, x: FloatArray) -> FloatArray:
    return forward_with_cache(net, x)[0]


def net_backward(
    net: DenseNet, x: FloatArray, output_gradient: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Gradients of <output_gradient, net(x)> w.r.t. the parameters and x."""
    _, activations = forward_with_cache(net, x)
    return backward_from_cache(net, activations, output_gradient)


@dataclass(frozen=True, kw_only=True, eq=False)
class OptimizerState:
    """Adaptive-moment optimizer state.

    Attributes:
        m (FloatArray):
            first moment estimate
        v (FloatArray):
            second moment estimate
        step (int):
            number of completed steps
        step_size (float):
            learning rate
        beta1 (float):
            first moment decay
        beta2 (float):
            second moment decay
        eps (float):
            added to the denominator
    """

    m: FloatArray
    v: FloatArray
    step: int = 0
    step_size: float = DEFAULT_STEP_SIZE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        assert self.m.shape == self.v.shape
        assert self.step >= 0
        assert self.step_size > 0

    @staticmethod
    def zeros(n: int, step_size: float = DEFAULT_STEP_SIZE) -> OptimizerState:
        return OptimizerState(m=np.zeros(n), v=np.zeros(n), step_size=step_size)


def optimizer_step(
    state: OptimizerState, params: FloatArray, grads: FloatArray
) -> tuple[FloatArray, OptimizerState]:
    """One bias-corrected adaptive-moment update.

    Returns:
        tuple[FloatArray, OptimizerState]:
            the new parameters and the new state, the inputs are untouched
    """
    if not (params.shape == grads.shape == state.m.shape):
        raise ValueError(
            f"Length mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(f"Non-finite gradient at step {state.step + 1}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)
