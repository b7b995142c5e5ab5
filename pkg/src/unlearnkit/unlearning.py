"""Unlearning algorithms and the filtered five-step pipeline.

The pipeline: score training points, keep the bottom x fraction as the
low-influence pool D_LI, shrink both sides of the forget/retain partition
(S_HI = S - D_LI, R_HI = R - D_LI), then hand the reduced sets to an
algorithm. Three desk-scale algorithms are provided:

* ``retrain_full``: train from the seeded initialization on train - S_HI.
  Filtered-out forget points stay in the training data; that is the whole
  bet the filtering makes.
* ``finetune_retain``: continue from the current weights with mini-batch
  steps on R_HI only.
* ``noise_finetune``: perturb the weights (or re-draw the last layer), then
  finetune on R_HI.

Per-epoch cost of the finetuning variants is linear in |R_HI|, which is
where the wall-clock savings from shrinking the sets come from.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, ForgetSpec
from .errors import ParameterError, TrainingError
from .influence import InfluenceScores
from .models import ModelParams, init_params, mean_gradient
from .ranking import SelectionResult, make_selection, reduce_sets, select_bottom
from .training import TrainConfig, train

ALGORITHM_KINDS = ("retrain_full", "finetune_retain", "noise_finetune")


@dataclass(frozen=True)
class UnlearnAlgorithm:
    """Descriptor for one unlearning algorithm and its knobs.

    ``epochs``, ``learning_rate``, and ``batch_size`` drive the finetuning
    variants; ``noise_sigma`` and ``reinit_last_layer`` only apply to
    ``noise_finetune``. ``seed`` covers noise draws and batch shuffling.
    """

    kind: str
    epochs: int = 20
    learning_rate: float = 0.1
    batch_size: int = 32
    noise_sigma: float = 0.0
    reinit_last_layer: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALGORITHM_KINDS:
            raise ParameterError(
                f"unknown algorithm {self.kind!r}, expected one of {ALGORITHM_KINDS}"
            )
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "epochs": self.epochs,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "noise_sigma": self.noise_sigma,
            "reinit_last_layer": self.reinit_last_layer, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "UnlearnAlgorithm":
        return UnlearnAlgorithm(**d)


@dataclass
class UnlearnRun:
    """One unlearning execution: the reduced sets it saw and what came out."""

    algorithm: UnlearnAlgorithm
    forget_ids: frozenset[int]
    retain_ids: frozenset[int]
    removed_ids: frozenset[int]
    x: float | None
    model: ModelParams
    wall_clock_seconds: float
    metadata: dict = field(default_factory=dict)


def _finetune(
    start: ModelParams, retain: Dataset, algorithm: UnlearnAlgorithm
) -> ModelParams:
    x, y = retain.features, retain.labels
    n = retain.n_points
    w = start.weights.copy()
    rng = np.random.default_rng([algorithm.seed, 2])
    for epoch in range(algorithm.epochs):
        order = rng.permutation(n)
        for s in range(0, n, algorithm.batch_size):
            rows = order[s:s + algorithm.batch_size]
            # check before replace_weights, which refuses non-finite entries
            if not np.all(np.isfinite(w)):
                raise TrainingError(
                    f"finetuning diverged at epoch {epoch + 1}", epoch=epoch + 1
                )
            g = mean_gradient(start.replace_weights(w), x[rows], y[rows])
            w = w - algorithm.learning_rate * g
        if not np.all(np.isfinite(w)):
            raise TrainingError(
                f"finetuning diverged at epoch {epoch + 1}", epoch=epoch + 1
            )
    return start.replace_weights(w)


def _perturb(params: ModelParams, algorithm: UnlearnAlgorithm) -> ModelParams:
    rng = np.random.default_rng([algorithm.seed, 3])
    w = params.weights.copy()
    if algorithm.noise_sigma > 0:
        w = w + algorithm.noise_sigma * rng.standard_normal(w.shape)
    if algorithm.reinit_last_layer:
        fresh = 0.01 * rng.standard_normal(w.shape)
        arch = params.arch
        if arch.kind == "mlp":
            # Only the output layer: blocks W2 and b2.
            start = (arch.n_features + 1) * arch.hidden
            w[start:] = fresh[start:]
        else:
            # Logistic regression is a single layer; reinit everything.
            w = fresh
    return params.replace_weights(w)


def unlearn(
    model: ModelParams,
    train_data: Dataset,
    forget_ids,
    retain_ids,
    algorithm: UnlearnAlgorithm,
    train_config: TrainConfig,
) -> UnlearnRun:
    """Apply one algorithm to (possibly reduced) forget/retain sets.

    ``retrain_full`` needs ``train_config`` to reproduce the original seeded
    initialization; the finetuning variants start from ``model``. An empty
    retain set is an error for the finetuning variants, while an empty
    forget set just means there is nothing to unlearn.
    """
    forget_ids = frozenset(int(i) for i in forget_ids)
    retain_ids = frozenset(int(i) for i in retain_ids)
    if forget_ids & retain_ids:
        raise ParameterError("forget and retain sets overlap")
    all_ids = set(int(i) for i in train_data.ids)
    if not (forget_ids <= all_ids and retain_ids <= all_ids):
        raise ParameterError("forget/retain ids must come from the training set")

    started = time.perf_counter()
    if algorithm.kind == "retrain_full":
        cfg = replace(train_config, track_loss=False)
        reduced = train_data.without(forget_ids) if forget_ids else train_data
        if reduced.n_points == 0:
            raise ParameterError("removing the forget set leaves nothing to train on")
        out = train(reduced, model.arch, model.l2_lambda, cfg).params
    else:
        if not retain_ids:
            raise ParameterError(f"{algorithm.kind} requires a nonempty retain set")
        retain = train_data.subset(retain_ids)
        start = model if algorithm.kind == "finetune_retain" else _perturb(model, algorithm)
        out = _finetune(start, retain, algorithm)
    elapsed = time.perf_counter() - started

    return UnlearnRun(
        algorithm=algorithm,
        forget_ids=forget_ids,
        retain_ids=retain_ids,
        removed_ids=frozenset(),
        x=None,
        model=out,
        wall_clock_seconds=elapsed,
    )


def filtered_unlearn(
    model: ModelParams,
    train_data: Dataset,
    spec: ForgetSpec,
    scores: InfluenceScores,
    x: float,
    algorithm: UnlearnAlgorithm,
    train_config: TrainConfig,
    x_retain: float | None = None,
) -> tuple[UnlearnRun, SelectionResult]:
    """Score-filtered unlearning: select D_LI, reduce both sets, run.

    ``x`` applies to both sides; pass ``x_retain`` to reduce the retain set
    at a different fraction than the forget set. At x=0 nothing is filtered
    and the run is identical to ``unlearn`` on the full partition.
    """
    spec.validate_against(train_data)
    selection = make_selection(scores, x)
    s_hi, _ = reduce_sets(spec, selection.selected_ids)
    if x_retain is None:
        _, r_hi = reduce_sets(spec, selection.selected_ids)
        removed = selection.selected_ids
    else:
        retain_selection = select_bottom(scores, x_retain)
        _, r_hi = reduce_sets(spec, retain_selection)
        removed = selection.selected_ids | retain_selection
    run = unlearn(model, train_data, s_hi, r_hi, algorithm, train_config)
    run.x = x
    run.removed_ids = frozenset(removed)
    if x_retain is not None:
        run.metadata["x_retain"] = x_retain
    return run, selection
