"""Adam training loop over view sequences with validation checkpointing.

Training consumes the first ``train_views`` frames of each sequence (the
3/6/12-view ablation knob); validation runs the streaming path over full
sequences. The best-validation checkpoint is retained. Non-finite losses or
gradients skip the step; ten consecutive failures abort the run.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import jaccard_values
from .model import (
    BCE_EPS,
    ModelConfig,
    MvpModel,
    bce_from_predictions,
    build_model,
    forward_step,
    sequence_predictions,
)
from .optim import AdamState, adam_update, gradients_of, zero_gradients
from .voxel import VoxelGrid

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_FAILURES = 10


class TrainingDiverged(RuntimeError):
    """Ten consecutive non-finite losses/gradients."""


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)   # (step, split, loss, jaccard)
    steps_run: int = 0
    best_val_jaccard: float = float("nan")
    final_train_jaccard: float = float("nan")
    checkpoint_path: str = ""
    model: MvpModel | None = None


def _values(grid) -> np.ndarray:
    return grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)


def _mean_bce(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def evaluate_sequences(model: MvpModel, sequences: list, views: int | None = None
                       ) -> tuple[float, float]:
    """(mean BCE, mean Jaccard) over sequences via the streaming path."""
    losses, jaccards = [], []
    for frames, targets in sequences:
        if views is not None:
            frames, targets = frames[:views], targets[:views]
        state = model.init_state()
        for frame, target in zip(frames, targets):
            grid = frame if isinstance(frame, VoxelGrid) else VoxelGrid(
                _values(frame), np.zeros(3), 1.0)
            pred, state = forward_step(model, state, grid)
            losses.append(_mean_bce(pred.values, _values(target)))
            jaccards.append(jaccard_values(pred.values, _values(target)))
    return float(np.mean(losses)), float(np.mean(jaccards))


def train(config: ModelConfig, train_data: list, val_data: list, steps: int,
          checkpoint_path, metrics_path=None, learning_rate: float = 1e-3,
          val_every: int = 100, stop_at_train_jaccard: float | None = None
          ) -> TrainResult:
    """Shuffled single-sequence Adam steps on the BCE objective.

    ``train_data`` / ``val_data`` are lists of (frames, targets) pairs. The
    trained model, metrics rows and the retained checkpoint are returned.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    model = build_model(config)
    state = AdamState(learning_rate=learning_rate)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(checkpoint_path=str(checkpoint_path), model=model)

    # zero steps must leave the checkpoint at initialization
    save_checkpoint(checkpoint_path, config, model.params)
    best_val = -np.inf
    consecutive_failures = 0
    order: list[int] = []

    def run_validation(step: int):
        nonlocal best_val
        if not val_data:
            return
        val_loss, val_jacc = evaluate_sequences(model, val_data)
        result.rows.append((step, "val", val_loss, val_jacc))
        if val_jacc > best_val:
            best_val = val_jacc
            result.best_val_jaccard = val_jacc
            save_checkpoint(checkpoint_path, config, model.params)

    for step in range(1, steps + 1):
        if not order:
            order = list(rng.permutation(len(train_data)))
        frames, targets = train_data[order.pop()]
        frames = frames[: config.train_views]
        targets = targets[: config.train_views]

        preds = sequence_predictions(model, frames)
        target_values = [_values(t) for t in targets]
        loss_t = bce_from_predictions(preds, target_values)
        loss = loss_t.item()

        if not np.isfinite(loss):
            logger.warning("step %d: non-finite loss, skipping", step)
            consecutive_failures += 1
            if consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingDiverged(
                    f"{MAX_CONSECUTIVE_FAILURES} consecutive non-finite steps")
            continue
        loss_t.backward()
        grads = gradients_of(model.params)
        zero_gradients(model.params)
        if not adam_update(model.params, grads, state):
            consecutive_failures += 1
            if consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingDiverged(
                    f"{MAX_CONSECUTIVE_FAILURES} consecutive non-finite steps")
            continue
        consecutive_failures = 0
        result.steps_run = step

        step_jacc = float(np.mean([
            jaccard_values(pred.data, tv) for pred, tv in zip(preds, target_values)
        ]))
        result.rows.append((step, "train", loss, step_jacc))

        if step % val_every == 0 or step == steps:
            run_validation(step)
            if stop_at_train_jaccard is not None:
                _, train_jacc = evaluate_sequences(model, train_data,
                                                   views=config.train_views)
                result.final_train_jaccard = train_jacc
                if train_jacc >= stop_at_train_jaccard:
                    logger.info("step %d: train jaccard %.3f reached target %.3f",
                                step, train_jacc, stop_at_train_jaccard)
                    break

    if steps == 0:
        run_validation(0)
    if not val_data and steps > 0:
        save_checkpoint(checkpoint_path, config, model.params)
    if np.isnan(result.final_train_jaccard) and train_data:
        _, result.final_train_jaccard = evaluate_sequences(
            model, train_data, views=config.train_views)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, result.rows)
    return result


def write_metrics_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "split", "loss", "jaccard"])
        for step, split, loss, jacc in rows:
            writer.writerow([step, split, f"{loss:.6f}", f"{jacc:.6f}"])
