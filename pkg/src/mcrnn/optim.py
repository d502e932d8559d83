"""Training: SGD with global-norm clipping, truncated BPTT with state
carryover, plateau-halving learning-rate schedule, early stop.

Metric rows are fully deterministic (no timestamps), so two runs with the
same config and seed write byte-identical logs; wall-clock time goes to a
separate timing file.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DataError, ShapeError
from .model import AddingBatch, Batch, Model, ModelCarry, perplexity, save_checkpoint
from .numerics import make_rng


@dataclass
class OptimConfig:
    lr: float = 1.0
    clip: float = 5.0
    window: int = 16  # tbptt length; must cover at least one block (>= n)
    batch_size: int = 32
    patience: int = 1
    halvings: int = 6
    max_epochs: int = 20
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        for name in ("lr", "clip", "window", "batch_size", "patience", "halvings", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class TrainState:
    lr: float
    seed: int
    step: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    since_improve: int = 0
    halvings_done: int = 0
    stop: bool = False


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients by threshold/norm when the global L2 norm
    exceeds the threshold; direction is preserved exactly."""
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """In-place p <- p - lr*g (optionally with heavy-ball momentum).
    Returns the velocity dict so callers can thread it between steps."""
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        if momentum > 0.0:
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v *= momentum
            v += g
            velocity[name] = v
            p -= lr * v
        else:
            p -= lr * g
    return velocity


def plateau_schedule(state: TrainState, val_loss: float, patience: int, halvings: int) -> TrainState:
    """Halve the lr after `patience` evaluations without a new best; once the
    halving budget is spent, the next plateau stops training instead."""
    if not np.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.since_improve = 0
        return state
    state.since_improve += 1
    if state.since_improve >= patience:
        if state.halvings_done < halvings:
            state.lr /= 2.0
            state.halvings_done += 1
            state.since_improve = 0
        else:
            state.stop = True
    return state


def time_slices(batch, window: int) -> list[tuple[object, bool]]:
    """Split a batch along time into tbptt windows.

    Returns (piece, live) pairs in order; live marks windows holding at
    least one scored target. Dead windows (a fully masked span, or every
    regression window before the last) only exist to advance the states.
    """
    if isinstance(batch, Batch):
        T = batch.targets.shape[1]
        if T <= window:
            return [(batch, True)]
        out = []
        for a in range(0, T, window):
            b = min(a + window, T)
            m = batch.mask[:, a:b] if batch.mask is not None else None
            piece = Batch(inputs=batch.inputs[:, a:b], targets=batch.targets[:, a:b], mask=m)
            out.append((piece, m is None or bool(np.any(m))))
        return out
    if not isinstance(batch, AddingBatch):  # unknown batch types pass through whole
        return [(batch, True)]
    T = batch.features.shape[1]
    if T <= window:
        return [(batch, True)]
    return [(AddingBatch(features=batch.features[:, a : min(a + window, T), :],
                         targets=batch.targets), min(a + window, T) == T)
            for a in range(0, T, window)]


def train_epoch(
    model: Model,
    stream: Iterable,
    cfg: OptimConfig,
    state: TrainState,
    rng: np.random.Generator | None = None,
    velocity: dict[str, np.ndarray] | None = None,
    workers: int = 1,
    carry_over: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """One pass over the stream; hidden states carry across windows (data
    only, gradients stop at window boundaries). Batches longer than the
    window are sliced on the way through; one update per live slice.
    Returns the token-weighted mean train loss and the momentum state."""
    params = dict(model.trainable_params())
    carry: ModelCarry | None = None
    total_loss = 0.0
    total_weight = 0.0
    seen = False
    for batch in stream:
        seen = True
        pieces = time_slices(batch, cfg.window)
        if carry_over and carry is None:
            b = batch.inputs.shape[0] if isinstance(batch, Batch) else batch.features.shape[0]
            carry = model.init_carry(b)
        if carry_over:
            local = carry
        elif len(pieces) > 1:
            # independent instances: chain state only between this batch's own slices
            b = batch.inputs.shape[0] if isinstance(batch, Batch) else batch.features.shape[0]
            local = model.init_carry(b)
        else:
            local = None
        for piece, live in pieces:
            if not live:
                local = model.forward_states(piece, carry=local, workers=workers)
                continue
            loss, tape = model.forward_loss(piece, mode="train", rng=rng, carry=local, workers=workers)
            grads = model.backward(tape, workers=workers)
            grads = clip_gradients(grads, cfg.clip)
            velocity = sgd_step(params, grads, state.lr, cfg.momentum, velocity)
            if local is not None:
                local = model.carry_forward(tape, local)
            weight = tape.mask_total if tape.mask_total else piece.targets.shape[0]
            total_loss += loss * weight
            total_weight += weight
            state.step += 1
        if carry_over:
            carry = local
    if not seen:
        raise DataError("training stream yielded no batches")
    state.epoch += 1
    return total_loss / total_weight, velocity or {}


def evaluate(model: Model, stream: Iterable, workers: int = 1, carry_over: bool = True) -> float:
    """Token-weighted mean eval-mode loss over the stream."""
    carry: ModelCarry | None = None
    total = 0.0
    weight = 0.0
    for batch in stream:
        if carry is None and carry_over:
            b = batch.inputs.shape[0] if isinstance(batch, Batch) else batch.features.shape[0]
            carry = model.init_carry(b)
        loss, tape = model.forward_loss(batch, mode="eval", carry=carry, workers=workers)
        if carry_over:
            carry = model.carry_forward(tape, carry)
        w = tape.mask_total if tape.mask_total else batch.targets.shape[0]
        total += loss * w
        weight += w
    if weight == 0:
        raise DataError("evaluation stream yielded no batches")
    return total / weight


class MetricsLog:
    """Append-only CSV of evaluation rows. Deterministic columns only; wall
    time is written beside it in timing.csv so the main log is reproducible
    byte for byte."""

    COLUMNS = "epoch,step,lr,train_loss,val_loss,val_ppl"

    def __init__(self, path: str | None, timing_path: str | None = None):
        self.path = path
        self.timing_path = timing_path
        self.rows: list[str] = []
        if path:
            with open(path, "w") as f:
                f.write(self.COLUMNS + "\n")
        if timing_path:
            with open(timing_path, "w") as f:
                f.write("epoch,wall_time_s\n")

    def log(self, epoch: int, step: int, lr: float, train_loss: float, val_loss: float, wall: float) -> None:
        row = (
            f"{epoch},{step},{lr:.12g},{train_loss:.12g},"
            f"{val_loss:.12g},{perplexity(val_loss):.12g}"
        )
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(row + "\n")
        if self.timing_path:
            with open(self.timing_path, "a") as f:
                f.write(f"{epoch},{wall:.3f}\n")


def fit(
    model: Model,
    train_stream: Callable[[int], Iterator],
    valid_stream: Callable[[], Iterator],
    cfg: OptimConfig,
    log: MetricsLog | None = None,
    checkpoint_path: str | None = None,
    checkpoint_meta: dict | None = None,
    workers: int = 1,
    carry_over: bool = True,
) -> TrainState:
    """Epoch loop: train, evaluate, log, keep the best-by-validation
    checkpoint, adjust lr on plateaus, stop on budget or max epochs.

    train_stream(epoch) must rebuild the epoch's batch iterator; dropout
    noise is seeded per epoch so runs replay exactly.
    """
    state = TrainState(lr=cfg.lr, seed=cfg.seed)
    velocity: dict[str, np.ndarray] | None = None
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        rng = make_rng((cfg.seed, epoch))
        train_loss, velocity = train_epoch(
            model, train_stream(epoch), cfg, state, rng=rng,
            velocity=velocity, workers=workers, carry_over=carry_over,
        )
        val_loss = evaluate(model, valid_stream(), workers=workers, carry_over=carry_over)
        if log is not None:
            log.log(state.epoch, state.step, state.lr, train_loss, val_loss, time.perf_counter() - start)
        improved = val_loss < state.best_val
        if improved and checkpoint_path:
            save_checkpoint(checkpoint_path, model, checkpoint_meta)
        plateau_schedule(state, val_loss, cfg.patience, cfg.halvings)
        if state.stop:
            break
    return state
