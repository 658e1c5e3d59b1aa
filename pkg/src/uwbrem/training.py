"""Adam optimizer and the training loop.

Training is deterministic for a fixed seed: the same initial weights, shuffle
order and dropout draws give bit-identical parameters on every run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import ModelWeights, RemnetConfig
from .nn import NonFiniteError
from .rng import Rng


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle_seed: int = 0
    dropout_seed: int = 1
    loss: str = "mae"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.loss != "mae":
            raise ValueError(f"unsupported loss {self.loss!r}")


class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, weights: ModelWeights):
        self.m = weights.zeros_like()
        self.v = weights.zeros_like()
        self.t = 0


def adam_step(weights: ModelWeights, grads: ModelWeights, state: AdamState,
              plan: TrainPlan) -> None:
    """One in-place Adam update.

    With bias correction the per-element step is bounded by roughly the
    learning rate; constant gradients hit the bound exactly.
    """
    state.t += 1
    b1, b2 = plan.beta1, plan.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in weights.names:
        g = grads.data[name]
        if not np.isfinite(np.sum(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = state.m.data[name]
        v = state.v.data[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        weights.data[name] -= plan.learning_rate * (m / bc1) / (
            np.sqrt(v / bc2) + plan.epsilon)


@dataclass
class EpochStats:
    epoch: int
    train_mae: float
    val_mae: float
    wall_ms: float


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[EpochStats] = field(default_factory=list)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit_loop(grads_fn, weights: ModelWeights, x: np.ndarray, y: np.ndarray,
             plan: TrainPlan, predict_fn=None, x_val=None, y_val=None,
             log_path=None, verbose: bool = False) -> TrainResult:
    """Generic minibatch loop shared by every trainable model.

    grads_fn(weights, xb, yb, rng) -> (loss, grads). Per epoch: Fisher-Yates
    reshuffle of the sample order (one Rng seeded with shuffle_seed, consumed
    across epochs), then sequential minibatches; the last batch may be short.
    Dropout draws come from a separate Rng seeded with dropout_seed. Trains a
    copy of `weights` and returns it with per-epoch stats.
    """
    plan.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad training set shapes {x.shape} / {y.shape}")
    if x.shape[0] == 0:
        raise ValueError("training set is empty")

    weights = weights.copy()
    state = AdamState(weights)
    shuffle_rng = Rng(plan.shuffle_seed)
    dropout_rng = Rng(plan.dropout_seed)
    result = TrainResult(weights)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mae", "val_mae", "wall_ms"])

    try:
        for epoch in range(plan.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(x.shape[0])
            total = 0.0
            for idx in _batches(x.shape[0], plan.batch_size, order):
                loss, grads = grads_fn(weights, x[idx], y[idx], dropout_rng)
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became non-finite at epoch {epoch}")
                adam_step(weights, grads, state, plan)
                total += loss * idx.size
            train_mae = total / x.shape[0]
            val_mae = float("nan")
            if predict_fn is not None and x_val is not None and len(x_val):
                pred = predict_fn(weights, x_val)
                val_mae = float(np.mean(np.abs(pred - y_val)))
            wall_ms = (time.perf_counter() - t0) * 1e3
            stats = EpochStats(epoch, train_mae, val_mae, wall_ms)
            result.history.append(stats)
            if writer is not None:
                writer.writerow([epoch, f"{train_mae:.9f}", f"{val_mae:.9f}",
                                 f"{wall_ms:.3f}"])
            if verbose:
                print(f"epoch {epoch:3d}  train_mae {train_mae:.6f}"
                      f"  val_mae {val_mae:.6f}  {wall_ms:.0f} ms")
    finally:
        if fh is not None:
            fh.close()
    return result


def fit(cfg: RemnetConfig, weights: ModelWeights, x: np.ndarray, y: np.ndarray,
        plan: TrainPlan, x_val: np.ndarray | None = None,
        y_val: np.ndarray | None = None, log_path=None,
        verbose: bool = False) -> TrainResult:
    """Train the convolutional model with Adam on mean absolute error."""

    def grads_fn(w, xb, yb, rng):
        return model_mod.mae_loss_and_grads(cfg, w, xb, yb, training=True, rng=rng)

    return fit_loop(grads_fn, weights, x, y, plan,
                    predict_fn=lambda w, xv: model_mod.predict(cfg, w, xv),
                    x_val=x_val, y_val=y_val, log_path=log_path, verbose=verbose)


def fit_mlp(cfg, weights: ModelWeights, x: np.ndarray, y: np.ndarray,
            plan: TrainPlan, **kwargs) -> TrainResult:
    """Same loop for the dense baseline."""

    def grads_fn(w, xb, yb, rng):
        return model_mod.mlp_loss_and_grads(cfg, w, xb, yb)

    return fit_loop(grads_fn, weights, x, y, plan,
                    predict_fn=lambda w, xv: model_mod.mlp_forward_batch(cfg, w, xv)[0],
                    **kwargs)
