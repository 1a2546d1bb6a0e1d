""" The conditional normalizing flow Q_θ(q | ω, q_init, q_target).

A configuration q in the unit cube is first mapped to R^D with a clamped
logit, then pushed through K affine coupling blocks. The latent z = f(q) is
scored under a standard Gaussian, so

    log Q(q | ctx) = log N(f(q); 0, I) + log|det ∂f/∂q|

and samples are drawn by inverting the flow on Gaussian noise. Conditioning
information enters every conditioner network as a fixed-length context vector
(see `ConditioningContext.vector`); an absent start or target is replaced by
a sentinel block with its mask bit cleared.

Important classes:
    - `ConditioningContext`: ω plus optional q_init / q_target.
    - `CouplingBlock`: one two-sided affine coupling with four conditioners.
    - `FlowLayout`: the architecture (D, context width, K, hidden widths, α, ε_b).
    - `FlowModel`: layout + blocks + training metadata. Saved and loaded with
      `save_checkpoint` / `load_checkpoint`.

Example:
model = init_flow(FlowLayout(dim=2, context_dim=context_dim(2)), rng)
ctx = ConditioningContext(omega=encode_workspace(env), dim=2, q_init=a, q_target=b)
qs = sample(model, ctx, 1000, rng_seed=0)
lp = log_prob(model, qs[0], ctx)
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from flowplan.env import ENCODING_POINTS, SENTINEL, Config, WorkspaceEncoding
from flowplan.mlp import (
    DenseNet,
    DivergenceError,
    backward_from_cache,
    forward_with_cache,
    init_dense_net,
    net_forward,
)
from flowplan.utils import FloatArray, write_atomic

FLOW_FILE_VERSION = 1

DEFAULT_BLOCKS = 8
DEFAULT_HIDDEN = (64, 64)
DEFAULT_ALPHA = 2.0
DEFAULT_EPS_B = 1e-4

OMEGA_DIM = 2 * ENCODING_POINTS


class NumericalBlowUpError(DivergenceError):
    """Raised when a coupling produces a non-finite value."""


class CheckpointError(Exception):
    """Raised when a checkpoint file is corrupt or has the wrong version."""


def context_dim(dim: int, omega_dim: int = OMEGA_DIM) -> int:
    """Length of the context vector for a robot of dimensionality `dim`."""
    return omega_dim + 2 * dim + 2


@dataclass(frozen=True, eq=False)
class ConditioningContext:
    """Planning information the flow is conditioned on.

    Attributes:
        omega (WorkspaceEncoding):
            the workspace encoding ω
        dim (int):
            the robot's C-space dimensionality
        q_init (Config | None):
            start configuration, None if not conditioned on
        q_target (Config | None):
            target configuration, None if not conditioned on
    """

    omega: WorkspaceEncoding
    dim: int
    q_init: Config | None = None
    q_target: Config | None = None

    def __post_init__(self) -> None:
        for name, q in (("q_init", self.q_init), ("q_target", self.q_target)):
            if q is not None and np.shape(q) != (self.dim,):
                raise ValueError(f"{name} must have {self.dim} coordinates")

    @property
    def init_mask(self) -> bool:
        return self.q_init is not None

    @property
    def target_mask(self) -> bool:
        return self.q_target is not None

    def vector(self) -> FloatArray:
        """[ω, q_init or sentinels, init bit, q_target or sentinels, target bit]"""

        def part(q: Config | None) -> list[FloatArray]:
            if q is None:
                return [np.full(self.dim, SENTINEL), np.zeros(1)]
            return [np.asarray(q, dtype=np.float64), np.ones(1)]

        return np.concatenate(
            [self.omega.points, *part(self.q_init), *part(self.q_target)]
        )

    def masked(self, keep_init: bool, keep_target: bool) -> ConditioningContext:
        return replace(
            self,
            q_init=self.q_init if keep_init else None,
            q_target=self.q_target if keep_target else None,
        )


ContextLike = Union[ConditioningContext, FloatArray]


def mask_context_rows(
    contexts: FloatArray,
    dim: int,
    drop_init: npt.NDArray[np.bool_],
    drop_target: npt.NDArray[np.bool_],
) -> FloatArray:
    """Returns a copy of the (n, C) context matrix with the start and/or target
    entries of the selected rows replaced by sentinels and mask bits cleared."""
    out = contexts.copy()
    omega_dim = contexts.shape[1] - 2 * dim - 2
    init = slice(omega_dim, omega_dim + dim)
    target = slice(omega_dim + dim + 1, omega_dim + 2 * dim + 1)
    out[drop_init, init] = SENTINEL
    out[drop_init, omega_dim + dim] = 0.0
    out[drop_target, target] = SENTINEL
    out[drop_target, omega_dim + 2 * dim + 1] = 0.0
    return out


@dataclass(frozen=True, kw_only=True)
class FlowLayout:
    """Architecture of a flow.

    Attributes:
        dim (int):
            C-space dimensionality D
        context_dim (int):
            length of the context vector
        n_blocks (int):
            number of coupling blocks K
        hidden (tuple[int, ...]):
            hidden layer widths of every conditioner
        alpha (float):
            scale clamp amplitude α
        eps_b (float):
            boundary epsilon of the logit pre-transform
    """

    dim: int
    context_dim: int
    n_blocks: int = DEFAULT_BLOCKS
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    alpha: float = DEFAULT_ALPHA
    eps_b: float = DEFAULT_EPS_B

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValueError(f"A coupling flow needs dim >= 2, got {self.dim}")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.context_dim < 0 or self.alpha <= 0 or not 0 < self.eps_b < 0.5:
            raise ValueError(f"Invalid flow layout {self}")

    @property
    def split(self) -> int:
        """d_a, the first ⌈D/2⌉ coordinates form part a."""
        return (self.dim + 1) // 2

    @property
    def permutation(self) -> npt.NDArray[np.int64]:
        """Applied between consecutive blocks: swaps the two halves."""
        return np.concatenate(
            [np.arange(self.split, self.dim), np.arange(0, self.split)]
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "context_dim": self.context_dim,
            "n_blocks": self.n_blocks,
            "hidden": list(self.hidden),
            "alpha": self.alpha,
            "eps_b": self.eps_b,
        }

    @staticmethod
    def from_json_dict(d: dict[str, Any]) -> FlowLayout:
        return FlowLayout(
            dim=int(d["dim"]),
            context_dim=int(d["context_dim"]),
            n_blocks=int(d["n_blocks"]),
            hidden=tuple(int(h) for h in d["hidden"]),
            alpha=float(d["alpha"]),
            eps_b=float(d["eps_b"]),
        )


@dataclass(frozen=True, eq=False)
class CouplingBlock:
    """z_a' = z_a ⊙ exp(s_a(z_b | c)) + t_a(z_b | c), then
    z_b' = z_b ⊙ exp(s_b(z_a' | c)) + t_b(z_a' | c), with every s clamped to
    α·tanh(s/α)."""

    split: int
    s_a: DenseNet
    t_a: DenseNet
    s_b: DenseNet
    t_b: DenseNet
    alpha: float

    def __post_init__(self) -> None:
        dim = self.split + self.s_b.sizes[-1]
        assert 1 <= self.split < dim
        assert self.s_a.sizes[-1] == self.t_a.sizes[-1] == self.split
        assert self.t_b.sizes[-1] == dim - self.split
        assert self.s_a.sizes[0] - (dim - self.split) == self.s_b.sizes[0] - self.split

    @property
    def nets(self) -> tuple[DenseNet, DenseNet, DenseNet, DenseNet]:
        return (self.s_a, self.t_a, self.s_b, self.t_b)

    def clamp(self, s: FloatArray) -> FloatArray:
        clamped: FloatArray = self.alpha * np.tanh(s / self.alpha)
        return clamped


def init_coupling_block(
    layout: FlowLayout, rng: np.random.Generator, zero_output: bool = True
) -> CouplingBlock:
    d_a = layout.split
    d_b = layout.dim - d_a
    sizes_a = (d_b + layout.context_dim, *layout.hidden, d_a)
    sizes_b = (d_a + layout.context_dim, *layout.hidden, d_b)
    return CouplingBlock(
        split=d_a,
        s_a=init_dense_net(sizes_a, rng, zero_output),
        t_a=init_dense_net(sizes_a, rng, zero_output),
        s_b=init_dense_net(sizes_b, rng, zero_output),
        t_b=init_dense_net(sizes_b, rng, zero_output),
        alpha=layout.alpha,
    )


@dataclass(frozen=True, eq=False)
class FlowModel:
    """A trained or freshly initialized flow. Immutable; `with_params` returns
    a new model."""

    layout: FlowLayout
    blocks: tuple[CouplingBlock, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        assert len(self.blocks) == self.layout.n_blocks

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def n_params(self) -> int:
        return sum(net.n_params for block in self.blocks for net in block.nets)

    def params(self) -> FloatArray:
        """All parameters, block by block, nets in (s_a, t_a, s_b, t_b) order."""
        return np.concatenate(
            [net.params for block in self.blocks for net in block.nets]
        )

    def with_params(self, theta: FloatArray) -> FlowModel:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"Expected {self.n_params} parameters, got {theta.shape}")
        offset = 0
        blocks = []
        for block in self.blocks:
            nets = []
            for net in block.nets:
                chunk = theta[offset : offset + net.n_params].copy()
                nets.append(net.with_params(chunk))
                offset += net.n_params
            s_a, t_a, s_b, t_b = nets
            blocks.append(replace(block, s_a=s_a, t_a=t_a, s_b=s_b, t_b=t_b))
        return replace(self, blocks=tuple(blocks))

    def with_metadata(self, **metadata: Any) -> FlowModel:
        return replace(self, metadata={**self.metadata, **metadata})

    def conditioner_outputs_zero(self) -> bool:
        """True for an identity-initialized model."""
        return all(net.output_layer_is_zero() for b in self.blocks for net in b.nets)


def init_flow(layout: FlowLayout, rng: np.random.Generator) -> FlowModel:
    """A flow whose conditioners have zero output layers, i.e., every coupling
    block starts as the identity map."""
    return FlowModel(
        layout, tuple(init_coupling_block(layout, rng) for _ in range(layout.n_blocks))
    )


def _check_finite(what: str, *arrays: FloatArray) -> None:
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise NumericalBlowUpError(f"Non-finite {what}")


@dataclass(frozen=True, eq=False)
class CouplingCache:
    """Intermediates of a batched coupling evaluation kept for backprop."""

    a: FloatArray
    b: FloatArray
    sa: FloatArray
    sb: FloatArray
    exp_sa: FloatArray
    exp_sb: FloatArray
    acts: tuple[list[FloatArray], ...]


def _coupling_forward_batch(
    block: CouplingBlock, z: FloatArray, c: FloatArray
) -> tuple[FloatArray, FloatArray, CouplingCache]:
    d = block.split
    a, b = z[:, :d], z[:, d:]
    h_b = np.concatenate([b, c], axis=1)
    sa_raw, sa_acts = forward_with_cache(block.s_a, h_b)
    ta, ta_acts = forward_with_cache(block.t_a, h_b)
    sa = block.clamp(sa_raw)
    exp_sa = np.exp(sa)
    a_new = a * exp_sa + ta

    h_a = np.concatenate([a_new, c], axis=1)
    sb_raw, sb_acts = forward_with_cache(block.s_b, h_a)
    tb, tb_acts = forward_with_cache(block.t_b, h_a)
    sb = block.clamp(sb_raw)
    exp_sb = np.exp(sb)
    b_new = b * exp_sb + tb

    out = np.concatenate([a_new, b_new], axis=1)
    logdet = sa.sum(axis=1) + sb.sum(axis=1)
    _check_finite("coupling output", out, logdet)
    acts = (sa_acts, ta_acts, sb_acts, tb_acts)
    cache = CouplingCache(a, b, sa, sb, exp_sa, exp_sb, acts)
    return out, logdet, cache


def _coupling_inverse_batch(
    block: CouplingBlock, y: FloatArray, c: FloatArray
) -> tuple[FloatArray, FloatArray]:
    d = block.split
    a_new, b_new = y[:, :d], y[:, d:]
    h_a = np.concatenate([a_new, c], axis=1)
    sb = block.clamp(net_forward(block.s_b, h_a))
    b = (b_new - net_forward(block.t_b, h_a)) * np.exp(-sb)

    h_b = np.concatenate([b, c], axis=1)
    sa = block.clamp(net_forward(block.s_a, h_b))
    a = (a_new - net_forward(block.t_a, h_b)) * np.exp(-sa)

    out = np.concatenate([a, b], axis=1)
    logdet = -(sa.sum(axis=1) + sb.sum(axis=1))
    _check_finite("coupling inverse", out, logdet)
    return out, logdet


def _coupling_backward(
    block: CouplingBlock, cache: CouplingCache, g_out: FloatArray, g_logdet: FloatArray
) -> tuple[FloatArray, list[FloatArray]]:
    """Backprop through one block. `g_logdet` holds the loss gradient w.r.t.
    each row's log-determinant."""
    d = block.split
    g_a_new = g_out[:, :d]
    g_b_new = g_out[:, d:]
    sa_acts, ta_acts, sb_acts, tb_acts = cache.acts

    g_b = g_b_new * cache.exp_sb
    g_sb = g_b_new * cache.b * cache.exp_sb + g_logdet[:, None]
    g_sb_raw = g_sb * (1.0 - (cache.sb / block.alpha) ** 2)
    p_sb, gh_sb = backward_from_cache(block.s_b, sb_acts, g_sb_raw)
    p_tb, gh_tb = backward_from_cache(block.t_b, tb_acts, g_b_new)
    g_a_new = g_a_new + (gh_sb + gh_tb)[:, :d]

    g_a = g_a_new * cache.exp_sa
    g_sa = g_a_new * cache.a * cache.exp_sa + g_logdet[:, None]
    g_sa_raw = g_sa * (1.0 - (cache.sa / block.alpha) ** 2)
    p_sa, gh_sa = backward_from_cache(block.s_a, sa_acts, g_sa_raw)
    p_ta, gh_ta = backward_from_cache(block.t_a, ta_acts, g_a_new)
    g_b = g_b + (gh_sa + gh_ta)[:, : g_b.shape[1]]

    return np.concatenate([g_a, g_b], axis=1), [p_sa, p_ta, p_sb, p_tb]


def _as_batch(x: FloatArray) -> tuple[FloatArray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _context_rows(ctx: ContextLike, n: int, width: int) -> FloatArray:
    c = ctx.vector() if isinstance(ctx, ConditioningContext) else np.asarray(ctx)
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != width:
        raise ValueError(f"Expected context width {width}, got {c.shape[-1]}")
    if c.ndim == 1:
        return np.broadcast_to(c, (n, width))
    if c.shape[0] != n:
        raise ValueError(f"Got {c.shape[0]} contexts for {n} inputs")
    return c


def coupling_forward(
    block: CouplingBlock, z: FloatArray, ctx: ContextLike
) -> tuple[FloatArray, FloatArray]:
    """Applies one coupling block.

    Args:
        block (CouplingBlock):
            the block
        z (FloatArray):
            a single point (D,) or a batch (n, D)
        ctx (ContextLike):
            a ConditioningContext, a context vector or an (n, C) matrix

    Returns:
        tuple[FloatArray, FloatArray]:
            the transformed point(s) and the log-determinant(s)
    """
    zb, single = _as_batch(z)
    c = _context_rows(ctx, len(zb), block.s_a.sizes[0] - (zb.shape[1] - block.split))
    out, logdet, _ = _coupling_forward_batch(block, zb, c)
    return (out[0], logdet[0]) if single else (out, logdet)


def coupling_inverse(
    block: CouplingBlock, z_next: FloatArray, ctx: ContextLike
) -> tuple[FloatArray, FloatArray]:
    """Exact inverse of `coupling_forward`; the log-determinant is negated."""
    zb, single = _as_batch(z_next)
    c = _context_rows(ctx, len(zb), block.s_a.sizes[0] - (zb.shape[1] - block.split))
    out, logdet = _coupling_inverse_batch(block, zb, c)
    return (out[0], logdet[0]) if single else (out, logdet)


def _logit(model: FlowModel, q: FloatArray) -> tuple[FloatArray, FloatArray]:
    eps = model.layout.eps_b
    q = np.clip(q, eps, 1.0 - eps)
    log_q, log_1mq = np.log(q), np.log1p(-q)
    return log_q - log_1mq, -(log_q + log_1mq).sum(axis=1)


def flow_forward(
    model: FlowModel, q: FloatArray, c: FloatArray
) -> tuple[FloatArray, FloatArray, list[CouplingCache]]:
    """Batched map from C-space to the latent space.

    Args:
        model (FlowModel):
            the flow
        q (FloatArray):
            (n, D) configurations
        c (FloatArray):
            (n, C) context rows

    Returns:
        tuple[FloatArray, FloatArray, list[CouplingCache]]:
            z (n, D), log|det ∂z/∂q| per row (logit term included) and the
            per-block caches for `flow_backward`
    """
    x, logdet = _logit(model, q)
    perm = model.layout.permutation
    caches = []
    for k, block in enumerate(model.blocks):
        if k > 0:
            x = x[:, perm]
        x, block_logdet, cache = _coupling_forward_batch(block, x, c)
        logdet = logdet + block_logdet
        caches.append(cache)
    return x, logdet, caches


def flow_backward(
    model: FlowModel,
    caches: list[CouplingCache],
    g_z: FloatArray,
    g_logdet: FloatArray,
) -> FloatArray:
    """Parameter gradient of a loss given its gradients w.r.t. the latent
    rows and w.r.t. each row's log-determinant. Laid out like `model.params()`."""
    inverse_perm = np.argsort(model.layout.permutation)
    grads: list[list[FloatArray]] = [[] for _ in model.blocks]
    g = g_z
    for k in reversed(range(len(model.blocks))):
        g, grads[k] = _coupling_backward(model.blocks[k], caches[k], g, g_logdet)
        if k > 0:
            g = g[:, inverse_perm]
    return np.concatenate([p for block_grads in grads for p in block_grads])


def flow_inverse(model: FlowModel, z: FloatArray, c: FloatArray) -> FloatArray:
    """Batched map from the latent space to the open unit cube."""
    inverse_perm = np.argsort(model.layout.permutation)
    x = z
    for k in reversed(range(len(model.blocks))):
        x, _ = _coupling_inverse_batch(model.blocks[k], x, c)
        if k > 0:
            x = x[:, inverse_perm]
    eps = model.layout.eps_b
    q: FloatArray = np.clip(expit(x), eps, 1.0 - eps)
    return q


def forward_map(
    model: FlowModel, q: FloatArray, ctx: ContextLike
) -> tuple[FloatArray, FloatArray]:
    """z = f(q | ctx) and the analytic log|det ∂f/∂q|."""
    qb, single = _as_batch(q)
    rows = _context_rows(ctx, len(qb), model.layout.context_dim)
    z, logdet, _ = flow_forward(model, qb, rows)
    return (z[0], logdet[0]) if single else (z, logdet)


def log_prob(model: FlowModel, q: FloatArray, ctx: ContextLike) -> Any:
    """log Q_θ(q | ctx) for a configuration (D,) or a batch (n, D).

    Coordinates are clamped into [ε_b, 1 - ε_b] first.
    """
    z, logdet = forward_map(model, q, ctx)
    dim = model.dim
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * dim * math.log(2.0 * math.pi) + logdet


def sample_latent(model: FlowModel, ctx: ContextLike, z: FloatArray) -> FloatArray:
    """Pushes the given latent rows (n, D) through the inverse flow."""
    zb, _ = _as_batch(z)
    rows = _context_rows(ctx, len(zb), model.layout.context_dim)
    return flow_inverse(model, zb, rows)


def sample(
    model: FlowModel,
    ctx: ContextLike,
    n: int,
    rng_seed: int | np.random.Generator,
) -> FloatArray:
    """Draws n configurations from Q_θ(· | ctx).

    Returns:
        FloatArray:
            (n, D) configurations, every coordinate strictly inside (0, 1)
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    return sample_latent(model, ctx, rng.standard_normal((n, model.dim)))


def logdet_numeric_check(
    model: FlowModel, q: Config, ctx: ContextLike, h: float = 1e-5
) -> float:
    """log|det ∂f/∂q| from a central-difference Jacobian, for validating the
    analytic sum on small dimensions."""
    if model.dim > 4:
        raise ValueError("The finite-difference Jacobian is meant for D <= 4")
    q = np.asarray(q, dtype=np.float64)
    steps = h * np.eye(model.dim)
    points = np.concatenate([q + steps, q - steps])
    z, _ = forward_map(model, points, ctx if np.ndim(ctx) < 2 else ctx[0])
    jacobian = (z[: model.dim] - z[model.dim :]).T / (2.0 * h)
    _, logabsdet = np.linalg.slogdet(jacobian)
    return float(logabsdet)


def to_json_dict(model: FlowModel) -> dict[str, Any]:
    """Checkpoint document: versioned header plus the parameters as base64
    little-endian float64."""
    raw = model.params().astype("<f8").tobytes()
    return {
        "version": FLOW_FILE_VERSION,
        "layout": model.layout.to_json_dict(),
        "n_params": model.n_params,
        "metadata": model.metadata,
        "params": base64.b64encode(raw).decode("ascii"),
    }


def from_json_dict(d: dict[str, Any]) -> FlowModel:
    if d.get("version") != FLOW_FILE_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version: {d.get('version')}")
    layout = FlowLayout.from_json_dict(d["layout"])
    theta = np.frombuffer(base64.b64decode(d["params"]), dtype="<f8").astype(np.float64)
    skeleton = init_flow(layout, np.random.default_rng(0))
    expected = skeleton.n_params
    if theta.shape != (expected,) or d.get("n_params") != expected:
        raise CheckpointError(
            f"Checkpoint holds {theta.size} parameters, layout needs {expected}"
        )
    return replace(skeleton.with_params(theta), metadata=dict(d.get("metadata", {})))


def save_checkpoint(model: FlowModel, path: Path) -> None:
    write_atomic(path, json.dumps(to_json_dict(model), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Path) -> FlowModel:
    try:
        with open(path, "r") as f:
            return from_json_dict(json.load(f))
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
