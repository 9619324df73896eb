"""Optimizer, learning-rate schedule, gradient clipping, training loop.

The step size follows a linear warmup then inverse square-root decay:

    lr(t) = alpha * min(t ** -0.5, t * warmup_steps ** -1.5)

Gradients are clipped to a global norm bound before the Adam update; the
PAD embedding row is excluded from updates and stays zero. With one worker
and a fixed seed, training is bitwise reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from .autodiff import Tape, scale, softmax_xent_smoothed


class NumericError(RuntimeError):
    """Raised on non-finite losses or gradients; carries diagnostics."""


@dataclass(frozen=True)
class ScheduleConfig:
    alpha: float
    warmup_steps: int

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def lr_at(t: int, schedule: ScheduleConfig) -> float:
    """Step size at step t (1-based); undefined (an error) at t = 0."""
    if t < 1:
        raise ValueError(f"the schedule is undefined at t = {t}; steps start at 1")
    return schedule.alpha * min(t ** -0.5, t * schedule.warmup_steps ** -1.5)


def global_grad_norm(grads: Sequence[tuple[str, np.ndarray]]) -> float:
    total = 0.0
    for name, g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_global_norm(
    grads: Sequence[tuple[str, np.ndarray]], max_norm: float
) -> tuple[float, float]:
    """Scale all gradients in place so their joint norm is at most max_norm.

    Returns (norm before clipping, scale factor applied).
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    scale = 1.0
    if norm > max_norm:
        scale = max_norm / norm
        for _, g in grads:
            g *= scale
    return norm, scale


class OptimizerState:
    """Adam first/second moment buffers plus the shared step counter."""

    def __init__(
        self,
        params: mdl.ModelParameters,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}


def adam_step(params: mdl.ModelParameters, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients stored on params.

    The PAD embedding row's gradient is discarded so the row and its
    moments stay exactly zero.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params:
        g = tensor.grad
        if g is None:
            continue
        if g.shape != tensor.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {tensor.data.shape}"
            )
        if name == "embedding":
            g[0] = 0.0
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 250
    smoothing: float = 0.1
    clip_norm: float = 0.1
    dropout_rate: float | None = None  # None: use the model config's rate
    total_steps: int = 1000
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic validation
    workers: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.total_steps < 1 or self.workers < 1:
            raise ValueError("batch_size, total_steps and workers must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class HistoryRow:
    step: int
    loss: float
    lr: float
    grad_norm: float
    val_accuracy: float | None = None


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "lr", "grad_norm", "val_accuracy"])
            for row in self.rows:
                writer.writerow([
                    row.step,
                    f"{row.loss:.12g}",
                    f"{row.lr:.12g}",
                    f"{row.grad_norm:.12g}",
                    "" if row.val_accuracy is None else f"{row.val_accuracy:.12g}",
                ])

    def final_val_accuracy(self) -> float | None:
        for row in reversed(self.rows):
            if row.val_accuracy is not None:
                return row.val_accuracy
        return None


def smoothed_target_entropy(v: int, epsilon: float) -> float:
    """Entropy of the smoothed label distribution; a hard loss lower bound."""
    p_true = (1.0 - epsilon) + epsilon / v
    p_other = epsilon / v
    h = -p_true * math.log(p_true)
    if v > 1 and p_other > 0:
        h -= (v - 1) * p_other * math.log(p_other)
    return h


def eval_accuracy(
    params: mdl.ModelParameters,
    grids: np.ndarray,
    demos: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy of eval-mode forwards over a labeled encoded dataset."""
    hits = 0
    for lo in range(0, len(labels), batch_size):
        hi = min(lo + batch_size, len(labels))
        out = mdl.forward(params, grids[lo:hi], demos[lo:hi], mode="eval")
        pred = mdl.top_indices(out.probabilities, 1)[:, 0] + 1
        hits += int((pred == labels[lo:hi]).sum())
    return hits / len(labels)


def _shard_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, workers)
    bounds = []
    lo = 0
    for w in range(workers):
        hi = lo + base + (1 if w < extra else 0)
        if hi > lo:
            bounds.append((lo, hi))
        lo = hi
    return bounds


def train(
    params: mdl.ModelParameters,
    data: tuple[np.ndarray, np.ndarray, np.ndarray],
    train_cfg: TrainConfig,
    schedule: ScheduleConfig,
    val_data: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    state: OptimizerState | None = None,
) -> History:
    """Run the training loop over an encoded dataset (grids, demos, labels).

    Batches come from a per-epoch seeded shuffle; the last short batch of an
    epoch is kept. With workers > 1 each batch is split into that many
    shards whose gradients are reduced in a fixed order (a two-shard run
    emulates a two-device mirrored setup); worker count changes rounding,
    so the deterministic reference mode is workers = 1.
    """
    grids, demos, labels = data
    n = len(labels)
    if n == 0:
        raise ValueError("training dataset is empty")
    if labels.min() < 1:
        raise ValueError("all training records must carry a label")
    v = params.config.vocab_size
    state = state if state is not None else OptimizerState(params)
    history = History()
    loss_floor = smoothed_target_entropy(v, train_cfg.smoothing)

    order = np.empty(0, dtype=np.int64)
    epoch = 0
    cursor = 0
    for step in range(1, train_cfg.total_steps + 1):
        if cursor >= len(order):
            order = np.random.default_rng([train_cfg.seed, 7, epoch]).permutation(n)
            epoch += 1
            cursor = 0
        batch = order[cursor : cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size

        params.zero_grads()
        batch_loss = 0.0
        for lo, hi in _shard_bounds(len(batch), train_cfg.workers):
            shard = batch[lo:hi]
            weight = len(shard) / len(batch)
            with Tape() as tape:
                out = mdl.forward(
                    params, grids[shard], demos[shard], mode="train",
                    seed=train_cfg.seed, step=step,
                    dropout_rate=train_cfg.dropout_rate,
                )
                loss, _ = softmax_xent_smoothed(out.logits, labels[shard],
                                                train_cfg.smoothing)
                # Weight so shard gradients sum to the full-batch mean gradient.
                root = loss if weight == 1.0 else scale(loss, weight)
            shard_loss = float(loss.data)
            if not math.isfinite(shard_loss):
                raise NumericError(
                    f"non-finite loss {shard_loss} at step {step} "
                    f"(lr {lr_at(step, schedule):.3e}, batch size {len(shard)})"
                )
            tape.backward(root)
            batch_loss += shard_loss * weight

        if batch_loss < loss_floor - 1e-9:
            raise NumericError(
                f"loss {batch_loss} at step {step} fell below the smoothed-target "
                f"entropy {loss_floor}; the loss computation is inconsistent"
            )

        params.embedding.grad[0] = 0.0
        grads = [(name, t.grad) for name, t in params if t.grad is not None]
        norm, _ = clip_global_norm(grads, train_cfg.clip_norm)
        lr = lr_at(step, schedule)
        adam_step(params, state, lr)
        params.pin_pad_row()

        row = HistoryRow(step=step, loss=batch_loss, lr=lr, grad_norm=norm)
        if (
            val_data is not None
            and train_cfg.eval_every > 0
            and (step % train_cfg.eval_every == 0 or step == train_cfg.total_steps)
        ):
            row.val_accuracy = eval_accuracy(params, *val_data)
        history.rows.append(row)
    return history
