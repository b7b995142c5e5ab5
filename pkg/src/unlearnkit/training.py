"""Deterministic training with per-point gradient traces.

Every run is a pure function of (data, arch, l2_lambda, config): the seeded
initialization depends only on architecture and seed, so retraining on a
reduced dataset starts from the identical point, and mini-batch shuffling
draws from its own seeded stream. Convergence is declared when the norm of
the average-loss gradient drops below ``convergence_grad_tol``; hitting the
epoch cap without converging is allowed and reported, divergence is not.

At checkpoint epochs (0, a configurable stride, and the final epoch) the
trainer records every point's loss-gradient norm, in both l2 and l-infinity
flavors, together with a copy of the weights. Those traces feed the
gradient-norm scoring methods and the low-gradient count curve downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ParameterError, TrainingError
from .models import ArchSpec, ModelParams, gradient_matrix, init_params, mean_gradient, mean_loss

OPTIMIZERS = ("gd", "sgd", "adam")

# Default checkpoint schedule: dense early (every epoch through 12), then
# every 5 epochs.
_DENSE_CHECKPOINT_LIMIT = 12
_SPARSE_CHECKPOINT_STRIDE = 5


@dataclass
class TrainConfig:
    optimizer: str = "gd"
    learning_rate: float = 0.5
    epochs: int = 2000
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int | None = None
    convergence_grad_tol: float = 1e-7
    track_loss: bool = True

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ParameterError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.convergence_grad_tol <= 0:
            raise ParameterError("convergence_grad_tol must be positive")


@dataclass
class GradientTrace:
    """Per-point gradient norms recorded at checkpoint epochs.

    ``norms[k]`` aligns with ``epochs[k]`` and holds one value per point in
    the order of ``ids``.
    """

    norm_kind: str
    epochs: list[int]
    ids: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        if self.norm_kind not in ("l2", "linf"):
            raise ParameterError(f"norm_kind must be 'l2' or 'linf', got {self.norm_kind!r}")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.norms = np.asarray(self.norms, dtype=np.float64)
        if self.norms.shape != (len(self.epochs), len(self.ids)):
            raise ParameterError(
                f"norms shape {self.norms.shape} does not match "
                f"{len(self.epochs)} checkpoints x {len(self.ids)} points"
            )

    @property
    def n_checkpoints(self) -> int:
        return len(self.epochs)

    def norms_for(self, point_id: int) -> np.ndarray:
        idx = np.nonzero(self.ids == point_id)[0]
        if len(idx) == 0:
            raise ParameterError(f"point id {point_id} not in trace")
        return self.norms[:, idx[0]]


@dataclass
class TrainResult:
    """Trained weights plus everything recorded along the way."""

    params: ModelParams
    traces: dict[str, GradientTrace]
    checkpoints: list[tuple[int, ModelParams]] = field(repr=False)
    converged: bool = False
    final_grad_norm: float = float("nan")
    epochs_run: int = 0
    loss_history: list[float] = field(default_factory=list, repr=False)
    adam_second_moment: np.ndarray | None = None

    @property
    def trace(self) -> GradientTrace:
        return self.traces["l2"]


def _checkpoint_epochs(max_epochs: int, every: int | None) -> set[int]:
    if every is not None:
        sched = set(range(0, max_epochs + 1, every))
    else:
        sched = set(range(0, min(_DENSE_CHECKPOINT_LIMIT, max_epochs) + 1))
        sched.update(range(_DENSE_CHECKPOINT_LIMIT, max_epochs + 1, _SPARSE_CHECKPOINT_STRIDE))
    sched.add(0)
    sched.add(max_epochs)
    return sched


def train(
    dataset: Dataset, arch: ArchSpec, l2_lambda: float, config: TrainConfig
) -> TrainResult:
    """Fit the model and record gradient traces at checkpoint epochs."""
    if dataset.n_points < 1:
        raise ParameterError("cannot train on an empty dataset")
    if dataset.n_features != arch.n_features:
        raise ParameterError(
            f"dataset has {dataset.n_features} features, arch expects {arch.n_features}"
        )
    if dataset.n_classes is not None and dataset.n_classes > arch.n_classes:
        raise ParameterError(
            f"dataset has {dataset.n_classes} classes, arch only {arch.n_classes}"
        )
    x, y = dataset.features, dataset.labels
    n = dataset.n_points
    params = init_params(arch, l2_lambda, config.seed)
    w = params.weights.copy()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    schedule = _checkpoint_epochs(config.epochs, config.checkpoint_every)

    ck_epochs: list[int] = []
    ck_params: list[tuple[int, ModelParams]] = []
    norms_l2: list[np.ndarray] = []
    norms_linf: list[np.ndarray] = []
    loss_history: list[float] = []
    adam_m = adam_v = None
    adam_t = 0

    def record(epoch: int, p: ModelParams) -> None:
        g = gradient_matrix(p, x, y)
        ck_epochs.append(epoch)
        ck_params.append((epoch, p))
        norms_l2.append(np.sqrt((g * g).sum(axis=1)))
        norms_linf.append(np.abs(g).max(axis=1))

    converged = False
    final_grad_norm = float("nan")
    epoch = 0
    record(0, params.replace_weights(w))
    if config.track_loss:
        loss_history.append(mean_loss(params.replace_weights(w), x, y))

    for epoch in range(1, config.epochs + 1):
        p = params.replace_weights(w)
        if config.optimizer == "gd":
            g = mean_gradient(p, x, y)
            final_grad_norm = float(np.linalg.norm(g))
            if not np.isfinite(final_grad_norm):
                raise TrainingError(f"gradient became non-finite at epoch {epoch}", epoch=epoch)
            if final_grad_norm <= config.convergence_grad_tol:
                converged = True
                epoch -= 1
                break
            w = w - config.learning_rate * g
        else:
            order = shuffle_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                if not np.all(np.isfinite(w)):
                    raise TrainingError(f"weights became non-finite at epoch {epoch}", epoch=epoch)
                rows = order[start:start + config.batch_size]
                g = mean_gradient(params.replace_weights(w), x[rows], y[rows])
                if config.optimizer == "sgd":
                    w = w - config.learning_rate * g
                else:
                    if adam_m is None:
                        adam_m = np.zeros_like(w)
                        adam_v = np.zeros_like(w)
                    adam_t += 1
                    adam_m = 0.9 * adam_m + 0.1 * g
                    adam_v = 0.999 * adam_v + 0.001 * g * g
                    m_hat = adam_m / (1 - 0.9 ** adam_t)
                    v_hat = adam_v / (1 - 0.999 ** adam_t)
                    w = w - config.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
            g = mean_gradient(params.replace_weights(w), x, y)
            final_grad_norm = float(np.linalg.norm(g))
            if not np.isfinite(final_grad_norm):
                raise TrainingError(f"gradient became non-finite at epoch {epoch}", epoch=epoch)
            if final_grad_norm <= config.convergence_grad_tol:
                converged = True
        if not np.all(np.isfinite(w)):
            raise TrainingError(f"weights became non-finite at epoch {epoch}", epoch=epoch)
        if config.track_loss:
            loss_history.append(mean_loss(params.replace_weights(w), x, y))
        if epoch in schedule or converged:
            record(epoch, params.replace_weights(w))
        if converged:
            break

    final = params.replace_weights(w)
    if ck_epochs[-1] != epoch:
        record(epoch, final)
    if not converged:
        # Cap reached; report the last full-gradient norm honestly.
        final_grad_norm = float(np.linalg.norm(mean_gradient(final, x, y)))

    traces = {
        "l2": GradientTrace("l2", list(ck_epochs), dataset.ids, np.vstack(norms_l2)),
        "linf": GradientTrace("linf", list(ck_epochs), dataset.ids, np.vstack(norms_linf)),
    }
    return TrainResult(
        params=final,
        traces=traces,
        checkpoints=ck_params,
        converged=converged,
        final_grad_norm=final_grad_norm,
        epochs_run=epoch,
        loss_history=loss_history,
        adam_second_moment=adam_v,
    )


def retrain_without(
    dataset: Dataset,
    removed_ids,
    arch: ArchSpec,
    l2_lambda: float,
    config: TrainConfig,
) -> ModelParams:
    """Train from the same seeded initialization with some points removed.

    ``removed_ids`` may be empty, in which case this reproduces train()
    bit for bit.
    """
    removed = set(int(i) for i in removed_ids)
    reduced = dataset.without(removed) if removed else dataset
    if reduced.n_points == 0:
        raise ParameterError("removal would leave an empty training set")
    return train(reduced, arch, l2_lambda, config).params
