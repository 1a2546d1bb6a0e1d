import json
import math
from pathlib import Path

import numpy as np
import pytest

from flowplan.env import (
    SENTINEL,
    Robot,
    empty_environment,
    encode_workspace,
    generate_environment,
)
from flowplan.flow import (
    CheckpointError,
    ConditioningContext,
    CouplingBlock,
    FlowLayout,
    FlowModel,
    NumericalBlowUpError,
    context_dim,
    coupling_forward,
    coupling_inverse,
    forward_map,
    init_coupling_block,
    init_flow,
    load_checkpoint,
    log_prob,
    logdet_numeric_check,
    mask_context_rows,
    sample,
    sample_latent,
    save_checkpoint,
)
from flowplan.mlp import DenseNet

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def make_context(dim: int, seed: int = 4) -> ConditioningContext:
    env = generate_environment(seed, Robot.POINT2, 0.2)
    rng = np.random.default_rng(seed)
    return ConditioningContext(
        encode_workspace(env), dim, rng.random(dim), rng.random(dim)
    )


def random_model(
    dim: int, seed: int = 0, scale: float = 0.3, n_blocks: int = 4
) -> FlowModel:
    layout = FlowLayout(
        dim=dim, context_dim=context_dim(dim), n_blocks=n_blocks, hidden=(8,)
    )
    model = init_flow(layout, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    return model.with_params(rng.normal(scale=scale, size=model.n_params))


def constant_net(value: float) -> DenseNet:
    return DenseNet((1, 1), np.array([0.0, value]))


def hand_block() -> CouplingBlock:
    alpha = 2.0
    # the clamp maps this raw output to exactly ln 2
    s_a = alpha * math.atanh(math.log(2.0) / alpha)
    return CouplingBlock(
        1,
        constant_net(s_a),
        constant_net(0.5),
        constant_net(0.0),
        constant_net(-1.0),
        alpha,
    )


def test_context_vector_layout() -> None:
    ctx = make_context(2)
    vec = ctx.vector()
    assert vec.shape == (context_dim(2),) == (134,)
    assert np.array_equal(vec[128:130], ctx.q_init)
    assert vec[130] == 1.0 and vec[-1] == 1.0

    partial = ctx.masked(keep_init=False, keep_target=True).vector()
    assert np.all(partial[128:130] == SENTINEL)
    assert partial[130] == 0.0
    assert np.array_equal(partial[131:133], ctx.q_target)

    rows = np.stack([vec, vec])
    masked = mask_context_rows(
        rows, 2, np.array([True, False]), np.array([False, True])
    )
    assert np.array_equal(masked[0], partial)
    assert np.array_equal(
        masked[1], ctx.masked(keep_init=True, keep_target=False).vector()
    )
    assert np.array_equal(rows[0], vec)

    with pytest.raises(ValueError):
        ConditioningContext(ctx.omega, 2, q_init=np.zeros(3))


@pytest.mark.parametrize(
    "dim, split, permutation",
    [(2, 1, [1, 0]), (3, 2, [2, 0, 1]), (4, 2, [2, 3, 0, 1])],
)
def test_layout(dim: int, split: int, permutation: list[int]) -> None:
    layout = FlowLayout(dim=dim, context_dim=context_dim(dim))
    assert layout.split == split
    assert layout.permutation.tolist() == permutation
    assert FlowLayout.from_json_dict(layout.to_json_dict()) == layout
    with pytest.raises(ValueError):
        FlowLayout(dim=dim, context_dim=1, n_blocks=0)


def test_identity_block() -> None:
    layout = FlowLayout(dim=2, context_dim=context_dim(2))
    block = init_coupling_block(layout, np.random.default_rng(0))
    z = np.array([0.3, -1.7])
    out, logdet = coupling_forward(block, z, make_context(2))
    assert np.array_equal(out, z)
    assert logdet == 0.0
    back, inv_logdet = coupling_inverse(block, z, make_context(2))
    assert np.array_equal(back, z)
    assert inv_logdet == 0.0


def test_hand_evaluated_block() -> None:
    block = hand_block()
    no_context = np.zeros(0)
    out, logdet = coupling_forward(block, np.array([1.0, 2.0]), no_context)
    assert np.allclose(out, [2.5, 1.0], atol=1e-12)
    assert logdet == pytest.approx(math.log(2.0), abs=1e-12)

    back, inv_logdet = coupling_inverse(block, np.array([2.5, 1.0]), no_context)
    assert np.allclose(back, [1.0, 2.0], atol=1e-12)
    assert inv_logdet == pytest.approx(-math.log(2.0), abs=1e-12)


def test_block_round_trip() -> None:
    layout = FlowLayout(dim=3, context_dim=context_dim(3), hidden=(16,))
    block = init_coupling_block(layout, np.random.default_rng(3), zero_output=False)
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1000, 3))
    contexts = rng.normal(size=(1000, context_dim(3)))
    out, logdet = coupling_forward(block, z, contexts)
    back, inv_logdet = coupling_inverse(block, out, contexts)
    assert np.max(np.abs(back - z)) < 1e-12
    assert np.allclose(logdet, -inv_logdet)


def test_block_blow_up() -> None:
    block = hand_block()
    with pytest.raises(NumericalBlowUpError):
        coupling_forward(block, np.array([np.inf, 0.0]), np.zeros(0))


def test_identity_log_prob() -> None:
    model = init_flow(
        FlowLayout(dim=2, context_dim=context_dim(2)), np.random.default_rng(0)
    )
    assert model.conditioner_outputs_zero()
    value = log_prob(model, np.array([0.5, 0.5]), make_context(2))
    assert value == pytest.approx(-math.log(2 * math.pi) + 2 * math.log(4), abs=1e-6)
    assert value == pytest.approx(0.93471, abs=1e-5)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_flow_round_trip(dim: int) -> None:
    model = random_model(dim)
    rng = np.random.default_rng(dim)
    q = rng.uniform(0.01, 0.99, size=(1000, dim))
    ctx = make_context(dim)
    keep = rng.random((1000, 2)) < 0.5
    contexts = np.stack([ctx.masked(bool(i), bool(t)).vector() for i, t in keep])
    z, _ = forward_map(model, q, contexts)
    back = sample_latent(model, contexts, z)
    assert np.max(np.abs(back - q)) < 1e-9


@pytest.mark.parametrize("dim", [2, 4])
@pytest.mark.parametrize("seed", range(20))
def test_analytic_logdet_matches_finite_differences(dim: int, seed: int) -> None:
    model = random_model(dim, seed=100 * dim + seed)
    ctx = make_context(dim, seed=seed)
    rng = np.random.default_rng(seed)
    for q in rng.uniform(0.05, 0.95, size=(20, dim)):
        c = ctx.masked(keep_init=True, keep_target=bool(rng.random() < 0.5))
        _, analytic = forward_map(model, q, c)
        numeric = logdet_numeric_check(model, q, c)
        assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic))


def test_identity_logdet_is_logit_term() -> None:
    model = init_flow(
        FlowLayout(dim=2, context_dim=context_dim(2)), np.random.default_rng(0)
    )
    q = np.array([0.2, 0.7])
    expected = -np.sum(np.log(q * (1 - q)))
    assert logdet_numeric_check(model, q, make_context(2)) == pytest.approx(
        expected, rel=1e-6
    )
    assert forward_map(model, q, make_context(2))[1] == pytest.approx(expected)


def test_clamped_logdet_is_bounded() -> None:
    dim, n_blocks = 2, 4
    model = random_model(dim, scale=10.0, n_blocks=n_blocks)
    q = np.random.default_rng(0).uniform(0.05, 0.95, size=(200, dim))
    _, logdet = forward_map(model, q, make_context(dim))
    logit_term = -np.sum(np.log(q * (1 - q)), axis=1)
    alpha = model.layout.alpha
    assert np.all(np.abs(logdet - logit_term) <= dim * alpha * n_blocks + 1e-9)


def test_sample_range_and_determinism() -> None:
    model = random_model(2, scale=1.0)
    ctx = make_context(2)
    a = sample(model, ctx, 500, 42)
    b = sample(model, ctx, 500, 42)
    assert a.shape == (500, 2)
    assert np.array_equal(a, b)
    assert np.all((a > 0.0) & (a < 1.0))
    assert not np.array_equal(a, sample(model, ctx, 500, 43))
    with pytest.raises(ValueError):
        sample(model, ctx, 0, 42)


def test_identity_sample_of_zero_latent() -> None:
    model = init_flow(
        FlowLayout(dim=4, context_dim=context_dim(4)), np.random.default_rng(0)
    )
    q = sample_latent(model, make_context(4), np.zeros((1, 4)))
    assert np.array_equal(q, np.full((1, 4), 0.5))


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    model = random_model(3).with_metadata(robot="point2", epochs=3)
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.params(), model.params())
    assert loaded.layout == model.layout
    assert loaded.metadata == model.metadata
    q = np.random.default_rng(0).random((10, 3))
    ctx = make_context(3)
    assert np.array_equal(log_prob(loaded, q, ctx), log_prob(model, q, ctx))

    again = tmp_path / "again.json"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_corrupt_checkpoint(tmp_path: Path) -> None:
    path = tmp_path / "model.json"
    save_checkpoint(random_model(2), path)
    doc = json.loads(path.read_text())

    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)

    doc["version"] = 1
    doc["params"] = doc["params"][:16]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    path.write_text("not json")
    with pytest.raises(CheckpointError, match="model.json"):
        load_checkpoint(path)


def test_context_width_checked() -> None:
    model = init_flow(
        FlowLayout(dim=2, context_dim=context_dim(2)), np.random.default_rng(0)
    )
    with pytest.raises(ValueError):
        log_prob(model, np.array([0.5, 0.5]), np.zeros(5))
    empty = ConditioningContext(encode_workspace(empty_environment(Robot.POINT2)), 2)
    assert log_prob(model, np.array([0.5, 0.5]), empty) == pytest.approx(
        2 * math.log(4) - 2 * HALF_LOG_2PI
    )


if __name__ == "__main__":
    test_hand_evaluated_block()
    test_identity_log_prob()
