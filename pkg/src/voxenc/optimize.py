"""MSE loss, Adam optimizer, and the training loop with validation-based
early stopping.

Training is single-threaded and deterministic: init and shuffle order are
seeded, batches accumulate in a fixed order, and the returned parameters are
the checkpoint of the epoch with the best validation accuracy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data_io import SplitAssignment, StimulusSet
from .encoder import EncoderConfig, EncoderParams, backward, forward_batch, init_params, predict
from .metrics import accuracy


class NonFiniteLossError(RuntimeError):
    """Training diverged: the loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        # lower bound relaxed to 0 so the degenerate beta=0 diagnostic mode is constructible
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size/max_epochs must be >= 1 and patience >= 0")


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: EncoderParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t) for k, t in params.tensors().items()},
        v={k: np.zeros_like(t) for k, t in params.tensors().items()},
    )


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over voxels and its gradient 2(pred - target)/V."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must be equal vectors")
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.shape[0]


def adam_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.t + 1
    new_m, new_v, new_tensors = {}, {}, {}
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, theta in params.tensors().items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {theta.shape}")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        new_tensors[name] = theta - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return EncoderParams(params.config, **new_tensors), AdamState(new_m, new_v, t)


@dataclass
class TrainReport:
    """Per-epoch training losses and validation accuracies; epochs are 1-based."""

    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "wall_time_s": self.wall_time_s,
        }


def _predict_matrix(params: EncoderParams, feats: np.ndarray, batch_size: int) -> np.ndarray:
    preds = [predict(params, feats[i: i + batch_size]) for i in range(0, feats.shape[0], batch_size)]
    return np.concatenate(preds, axis=0)


def train(
    stimuli: StimulusSet,
    nc: np.ndarray,
    split: SplitAssignment,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
) -> tuple[EncoderParams, TrainReport]:
    """Fit the encoder on the train split, early-stopping on validation accuracy.

    Returns the parameters of the best validation epoch. Stops once the
    validation accuracy has failed to improve for `patience` consecutive
    epochs (patience=0 stops at the first non-improving epoch).
    """
    if not split.train or not split.validation:
        raise ValueError("train and validation splits must be non-empty")
    if encoder_config.n_queries != stimuli.n_queries or encoder_config.feat_dim != stimuli.feat_dim:
        raise ValueError(
            f"encoder config expects ({encoder_config.n_queries}, {encoder_config.feat_dim}) "
            f"features but data has ({stimuli.n_queries}, {stimuli.feat_dim})"
        )
    if encoder_config.n_voxels != stimuli.n_voxels:
        raise ValueError(
            f"encoder config has {encoder_config.n_voxels} voxels but data has {stimuli.n_voxels}"
        )

    t_start = time.perf_counter()
    x_train = stimuli.feature_matrix(split.train)
    y_train = stimuli.response_matrix(split.train)
    x_val = stimuli.feature_matrix(split.validation)
    y_val = stimuli.response_matrix(split.validation)
    n_train, n_voxels = y_train.shape

    params = init_params(encoder_config, train_config.seed)
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng(train_config.seed)

    report = TrainReport()
    best_params = params.copy()
    best_acc = -np.inf
    bad_epochs = 0

    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(n_train)
        batch_losses = []
        for start in range(0, n_train, train_config.batch_size):
            sel = order[start: start + train_config.batch_size]
            preds, trace = forward_batch(params, x_train[sel])
            diff = preds - y_train[sel]
            loss = float((diff * diff).mean())
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {start // train_config.batch_size}"
                )
            grad = 2.0 * diff / diff.size
            grads = backward(params, trace, grad)
            try:
                params, state = adam_step(params, grads, state, train_config)
            except ValueError as exc:
                # overflowing updates surface as non-finite parameter values
                raise NonFiniteLossError(
                    f"diverged at epoch {epoch}, batch {start // train_config.batch_size}: {exc}"
                ) from exc
            batch_losses.append(loss)

        val_pred = _predict_matrix(params, x_val, train_config.batch_size)
        val_report, _ = accuracy(y_val, val_pred, nc)
        report.train_loss.append(float(np.mean(batch_losses)))
        report.val_accuracy.append(val_report.overall)
        report.epochs_run = epoch

        if val_report.overall > best_acc:
            best_acc = val_report.overall
            best_params = params.copy()
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= max(train_config.patience, 1):
                break

    report.wall_time_s = time.perf_counter() - t_start
    return best_params, report
