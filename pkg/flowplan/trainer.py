""" Maximum a posteriori fitting of a flow to demonstration waypoints.

The per-row objective is ½‖f_θ(q | ctx)‖² − log|J|, where log|J| contains
the logit pre-transform and every coupling block, plus the Gaussian weight
prior ‖θ‖² / (2σ_θ²). During training the start and target entries of each
row's context are dropped independently with the configured probabilities
so one model also serves partially conditioned queries.

Example:
model, report = train(dataset, TrainConfig(epochs=200, seed=0))
write_atomic(Path("report.csv"), report.to_csv())
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from flowplan.dataset import Dataset, TrainingRows, split_dataset, training_rows
from flowplan.flow import (
    DEFAULT_BLOCKS,
    DEFAULT_HIDDEN,
    FlowLayout,
    FlowModel,
    flow_backward,
    flow_forward,
    init_flow,
    mask_context_rows,
)
from flowplan.mlp import DivergenceError, OptimizerState, optimizer_step
from flowplan.utils import STREAM_TRAIN, FloatArray, csv_text, make_rng

DESK_EPOCHS = 200
FULL_EPOCHS = 1500
MAX_STEP_REDUCTIONS = 3
EVAL_CHUNK = 4096

REPORT_HEADER = ("epoch", "train_loss", "val_nll", "grad_norm", "seconds")


@dataclass(frozen=True, kw_only=True)
class TrainConfig:
    """Training hyperparameters.

    Attributes:
        epochs (int):
            passes over the training rows, no early stopping
        batch_size (int):
            minibatch size
        step_size (float):
            initial optimizer step size
        prior_variance (float):
            σ_θ² of the Gaussian weight prior
        p_mask_init (float):
            probability of dropping q_init from a row's context
        p_mask_target (float):
            probability of dropping q_target from a row's context
        seed (int):
            seeds initialization, shuffling and masking
        n_blocks (int):
            coupling blocks of a new model
        hidden (tuple[int, ...]):
            conditioner hidden widths of a new model
    """

    epochs: int = DESK_EPOCHS
    batch_size: int = 128
    step_size: float = 1e-3
    prior_variance: float = 1.0
    p_mask_init: float = 0.25
    p_mask_target: float = 0.25
    seed: int = 0
    n_blocks: int = DEFAULT_BLOCKS
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"Invalid epochs/batch size in {self}")
        if self.step_size <= 0 or self.prior_variance <= 0:
            raise ValueError(f"step_size and prior_variance must be positive: {self}")
        for p in (self.p_mask_init, self.p_mask_target):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"Mask probabilities must be in [0, 1), got {p}")


@dataclass
class TrainReport:
    """Per-epoch series of a training run; `initial_val_nll` is the
    validation NLL before the first epoch."""

    initial_val_nll: float
    train_loss: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    step_size_reductions: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_nll(self) -> float:
        return min([self.initial_val_nll, *self.val_nll])

    def to_csv(self) -> str:
        rows = zip(
            range(1, self.epochs + 1),
            self.train_loss,
            self.val_nll,
            self.grad_norm,
            self.seconds,
        )
        return csv_text(REPORT_HEADER, rows)


def loss(
    model: FlowModel,
    rows: TrainingRows,
    prior_variance: float,
    dataset_size: int = 1,
) -> tuple[float, FloatArray]:
    """The MAP objective on a minibatch and its parameter gradient.

    Args:
        model (FlowModel):
            the flow
        rows (TrainingRows):
            nonempty minibatch
        prior_variance (float):
            σ_θ² of the weight prior
        dataset_size (int):
            the prior term is divided by this, pass the number of training
            rows to get the full-data objective divided by its size

    Returns:
        tuple[float, FloatArray]:
            the loss and its gradient, laid out like `model.params()`
    """
    if len(rows) == 0:
        raise ValueError("loss() needs at least one row")
    n = len(rows)
    z, logdet, caches = flow_forward(model, rows.q, rows.contexts)
    theta = model.params()
    prior_scale = 1.0 / (prior_variance * dataset_size)
    value = float(
        np.mean(0.5 * (z * z).sum(axis=1) - logdet) + 0.5 * prior_scale * theta @ theta
    )
    if not math.isfinite(value):
        raise DivergenceError(f"Non-finite loss {value}")
    grad = flow_backward(model, caches, z / n, np.full(n, -1.0 / n))
    return value, grad + prior_scale * theta


def evaluate_nll(model: FlowModel, rows: TrainingRows) -> float:
    """Mean −log Q_θ(q | ctx) over the rows, without the weight prior."""
    if len(rows) == 0:
        raise ValueError("evaluate_nll() needs at least one row")
    total = 0.0
    for start in range(0, len(rows), EVAL_CHUNK):
        chunk = rows.subset(np.arange(start, min(start + EVAL_CHUNK, len(rows))))
        z, logdet, _ = flow_forward(model, chunk.q, chunk.contexts)
        total += float((0.5 * (z * z).sum(axis=1) - logdet).sum())
    return total / len(rows) + 0.5 * model.dim * math.log(2.0 * math.pi)


def _masked_batch(
    rows: TrainingRows, config: TrainConfig, rng: np.random.Generator
) -> TrainingRows:
    drop_init = rng.random(len(rows)) < config.p_mask_init
    drop_target = rng.random(len(rows)) < config.p_mask_target
    contexts = mask_context_rows(rows.contexts, rows.dim, drop_init, drop_target)
    return TrainingRows(rows.q, contexts)


def _run_epoch(
    model: FlowModel,
    state: OptimizerState,
    rows: TrainingRows,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[FlowModel, OptimizerState, float, float]:
    order = rng.permutation(len(rows))
    params = model.params()
    losses, norms, sizes = [], [], []
    for start in range(0, len(rows), config.batch_size):
        chunk = rows.subset(order[start : start + config.batch_size])
        batch = _masked_batch(chunk, config, rng)
        value, grad = loss(model, batch, config.prior_variance, len(rows))
        params, state = optimizer_step(state, params, grad)
        model = model.with_params(params)
        losses.append(value)
        norms.append(float(np.linalg.norm(grad)))
        sizes.append(len(batch))
    epoch_loss = float(np.average(losses, weights=sizes))
    return model, state, epoch_loss, float(np.mean(norms))


def train_on_rows(
    train_rows: TrainingRows,
    validation_rows: TrainingRows,
    config: TrainConfig,
    metadata: dict[str, Any] | None = None,
) -> tuple[FlowModel, TrainReport]:
    """Trains a fresh identity-initialized flow.

    A divergent epoch is retried from its starting point with a ten times
    smaller step size; the fourth divergence is raised.

    Returns:
        tuple[FlowModel, TrainReport]:
            the model with the lowest validation NLL seen (the initial model
            included) and the report
    """
    layout = FlowLayout(
        dim=train_rows.dim,
        context_dim=train_rows.context_dim,
        n_blocks=config.n_blocks,
        hidden=config.hidden,
    )
    model = init_flow(layout, make_rng(config.seed, STREAM_TRAIN))
    rng = make_rng(config.seed, STREAM_TRAIN, 1)
    state = OptimizerState.zeros(model.n_params, config.step_size)

    report = TrainReport(initial_val_nll=evaluate_nll(model, validation_rows))
    best_model, best_nll = model, report.initial_val_nll
    logging.info(f"Initial validation NLL {best_nll:.4f}, {model.n_params} parameters")

    epoch = 1
    while epoch <= config.epochs:
        start = time.perf_counter()
        try:
            new_model, new_state, epoch_loss, grad_norm = _run_epoch(
                model, state, train_rows, config, rng
            )
            val_nll = evaluate_nll(new_model, validation_rows)
            if not math.isfinite(val_nll):
                raise DivergenceError(f"Non-finite validation NLL in epoch {epoch}")
        except DivergenceError as e:
            if report.step_size_reductions == MAX_STEP_REDUCTIONS:
                raise
            report.step_size_reductions += 1
            state = replace(state, step_size=state.step_size / 10.0)
            logging.warning(
                f"{e}; retrying epoch {epoch} with step size {state.step_size:g}"
            )
            continue

        model, state = new_model, new_state
        report.train_loss.append(epoch_loss)
        report.val_nll.append(val_nll)
        report.grad_norm.append(grad_norm)
        report.seconds.append(time.perf_counter() - start)
        if val_nll < best_nll:
            best_model, best_nll, report.best_epoch = model, val_nll, epoch
        logging.info(
            f"epoch {epoch}/{config.epochs}: loss {epoch_loss:.4f}, "
            f"val nll {val_nll:.4f}, grad norm {grad_norm:.3g}"
        )
        epoch += 1

    return (
        best_model.with_metadata(
            **(metadata or {}),
            epochs=report.epochs,
            best_epoch=report.best_epoch,
            best_val_nll=best_nll,
            seed=config.seed,
            train_rows=len(train_rows),
        ),
        report,
    )


def train(
    dataset: Dataset, config: TrainConfig, validation: Dataset | None = None
) -> tuple[FlowModel, TrainReport]:
    """Trains one model for the dataset's robot kind.

    Args:
        dataset (Dataset):
            the demonstrations; split with `split_dataset` when `validation`
            is None
        config (TrainConfig):
            hyperparameters
        validation (Dataset | None):
            held-out demonstrations

    Returns:
        tuple[FlowModel, TrainReport]:
            the best-validation model and the report
    """
    if validation is None:
        dataset, validation = split_dataset(dataset)
    rows = training_rows(dataset)
    if len(rows) == 0:
        raise ValueError("the dataset has no waypoints to train on")
    return train_on_rows(
        rows,
        training_rows(validation),
        config,
        {
            "robot": dataset.robot.value,
            "dataset_seed": dataset.seed,
            "train_env_seeds": sorted(
                {dataset.environments[d.env_id].seed for d in dataset.demonstrations}
            ),
        },
    )
