"""Evaluation: accuracies, a loss-threshold membership attack, and the
accuracy-on-removed curves that justify influence-ranked removal.

The membership attack follows the competition-style recipe: one scalar
feature per point (its loss under the evaluated model), balanced member and
non-member sets, a logistic-regression attacker, and stratified k-fold
cross-validation. Attack accuracy near one half means the model does not
give membership away.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold

from .data import Dataset, ForgetSpec
from .errors import ParameterError
from .influence import InfluenceScores
from .models import ArchSpec, ModelParams, per_sample_losses, predict_labels
from .ranking import rank_ids
from .training import TrainConfig, retrain_without, train
from .unlearning import UnlearnRun

DEFAULT_MIA_FOLDS = 10

ACCURACY_KEYS = ("forget_full", "forget_kept", "removed_li", "retain_full", "test")


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    """Fraction of points whose argmax prediction matches the label."""
    if dataset.n_points == 0:
        raise ParameterError("cannot evaluate accuracy on an empty set")
    return float(np.mean(predict_labels(params, dataset.features) == dataset.labels))


def accuracy_on_ids(params: ModelParams, dataset: Dataset, ids) -> float | None:
    """Accuracy on an id subset; None when the subset is empty."""
    ids = list(ids)
    if not ids:
        return None
    return accuracy(params, dataset.subset(ids))


@dataclass(frozen=True)
class MIAResult:
    """Cross-validated membership-attack accuracy with its uncertainty."""

    attack_accuracy: float
    stderr: float
    ci95: float
    n_folds: int
    n_member: int
    n_nonmember: int
    feature_kind: str = "per-sample-loss"

    def to_dict(self) -> dict:
        return {
            "attack_accuracy": self.attack_accuracy, "stderr": self.stderr,
            "ci95": self.ci95, "n_folds": self.n_folds,
            "n_member": self.n_member, "n_nonmember": self.n_nonmember,
            "feature_kind": self.feature_kind,
        }

    @staticmethod
    def from_dict(d: dict) -> "MIAResult":
        return MIAResult(**d)


def mia_attack(
    params: ModelParams,
    member_data: Dataset,
    nonmember_data: Dataset,
    n_folds: int = DEFAULT_MIA_FOLDS,
    seed: int = 0,
) -> MIAResult:
    """Loss-feature membership inference with a logistic attacker.

    The larger side is subsampled (seeded) to balance the classes; the
    reported ci95 is 1.96 times the standard error of the fold accuracies.
    """
    mem_loss = per_sample_losses(params, member_data.features, member_data.labels)
    non_loss = per_sample_losses(params, nonmember_data.features, nonmember_data.labels)
    return attack_on_losses(mem_loss, non_loss, n_folds=n_folds, seed=seed)


def attack_on_losses(
    mem_loss: np.ndarray,
    non_loss: np.ndarray,
    n_folds: int = DEFAULT_MIA_FOLDS,
    seed: int = 0,
) -> MIAResult:
    """The attack itself, on precomputed per-sample loss features."""
    if n_folds < 2:
        raise ParameterError(f"n_folds must be >= 2, got {n_folds}")
    mem_loss = np.asarray(mem_loss, dtype=np.float64)
    non_loss = np.asarray(non_loss, dtype=np.float64)
    n_mem, n_non = len(mem_loss), len(non_loss)
    m = min(n_mem, n_non)
    if m < n_folds:
        raise ParameterError(
            f"balanced set size {m} is smaller than n_folds={n_folds}"
        )
    rng = np.random.default_rng(seed)
    if n_mem > m:
        mem_loss = mem_loss[np.sort(rng.choice(n_mem, size=m, replace=False))]
    if n_non > m:
        non_loss = non_loss[np.sort(rng.choice(n_non, size=m, replace=False))]

    feats = np.concatenate([mem_loss, non_loss]).reshape(-1, 1)
    labels = np.concatenate([np.ones(m, dtype=int), np.zeros(m, dtype=int)])
    # folds pair index i on the member side with index i on the nonmember
    # side, so every fold is exactly balanced and swapping the two roles
    # presents the attacker with the same split under flipped labels
    folds = KFold(n_splits=n_folds, shuffle=True, random_state=seed)
    accs = []
    for train_pos, test_pos in folds.split(np.arange(m)):
        train_idx = np.concatenate([train_pos, m + train_pos])
        test_idx = np.concatenate([test_pos, m + test_pos])
        clf = LogisticRegression(max_iter=1000)
        clf.fit(feats[train_idx], labels[train_idx])
        accs.append(float(np.mean(clf.predict(feats[test_idx]) == labels[test_idx])))
    accs = np.array(accs)
    stderr = float(accs.std(ddof=1) / np.sqrt(n_folds))
    return MIAResult(
        attack_accuracy=float(accs.mean()),
        stderr=stderr,
        ci95=1.96 * stderr,
        n_folds=n_folds,
        n_member=m,
        n_nonmember=m,
    )


@dataclass(frozen=True)
class RemovalCurvePoint:
    n_removed: int
    acc_removed: float | None
    acc_test: float
    acc_removed_random: float | None


def removal_curve(
    train_data: Dataset,
    test_data: Dataset,
    scores: InfluenceScores,
    removal_sizes,
    arch: ArchSpec,
    l2_lambda: float,
    train_config: TrainConfig,
    baseline_seed: int = 0,
) -> list[RemovalCurvePoint]:
    """Retrain after removing the n lowest-influence points, for each n.

    Each grid point reports accuracy on the removed points themselves and on
    the test set, next to a matched-cardinality random baseline (a seeded
    permutation's prefix, so baseline sets nest across the grid).
    """
    sizes = [int(n) for n in removal_sizes]
    n_train = train_data.n_points
    for n in sizes:
        if not 0 <= n < n_train:
            raise ParameterError(f"removal size {n} outside [0, {n_train})")
    order = rank_ids(scores)
    random_order = [int(i) for i in
                    np.random.default_rng(baseline_seed).permutation(train_data.ids)]
    points = []
    for n in sizes:
        if n == 0:
            base = train(train_data, arch, l2_lambda, train_config).params
            points.append(RemovalCurvePoint(0, None, accuracy(base, test_data), None))
            continue
        removed = order[:n]
        model = retrain_without(train_data, removed, arch, l2_lambda, train_config)
        acc_removed = accuracy(model, train_data.subset(removed))
        acc_test = accuracy(model, test_data)
        rand_removed = random_order[:n]
        rand_model = retrain_without(train_data, rand_removed, arch, l2_lambda, train_config)
        acc_rand = accuracy(rand_model, train_data.subset(rand_removed))
        points.append(RemovalCurvePoint(n, acc_removed, acc_test, acc_rand))
    return points


@dataclass
class UnlearnReport:
    """Everything measured about one unlearning run, ready to serialize."""

    method: str
    mode: str
    algorithm: dict
    x: float
    accuracies: dict[str, float | None]
    mia: MIAResult
    wall_clock_seconds: float
    set_sizes: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in ACCURACY_KEYS if k not in self.accuracies]
        if missing:
            raise ParameterError(f"report is missing accuracy keys {missing}")
        for k, v in self.accuracies.items():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ParameterError(f"accuracy {k}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method, "mode": self.mode, "algorithm": self.algorithm,
            "x": self.x, "accuracies": dict(self.accuracies),
            "mia": self.mia.to_dict(),
            "wall_clock_seconds": self.wall_clock_seconds,
            "set_sizes": dict(self.set_sizes), "metadata": dict(self.metadata),
        }

    @staticmethod
    def from_dict(d: dict) -> "UnlearnReport":
        return UnlearnReport(
            method=d["method"], mode=d["mode"], algorithm=d["algorithm"],
            x=d["x"], accuracies=d["accuracies"],
            mia=MIAResult.from_dict(d["mia"]),
            wall_clock_seconds=d["wall_clock_seconds"],
            set_sizes=d.get("set_sizes", {}), metadata=d.get("metadata", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @staticmethod
    def load(path) -> "UnlearnReport":
        return UnlearnReport.from_dict(json.loads(Path(path).read_text()))


def build_report(
    run: UnlearnRun,
    train_data: Dataset,
    test_data: Dataset,
    spec: ForgetSpec,
    method: str,
    mode: str,
    mia_folds: int = DEFAULT_MIA_FOLDS,
    mia_seed: int = 0,
) -> UnlearnReport:
    """Evaluate one run: the five accuracy slices plus the membership attack.

    The attack always pits the *full* forget set against the test set,
    regardless of how much of it was filtered away, because that is the set
    whose members asked to be forgotten.
    """
    model = run.model
    accuracies = {
        "forget_full": accuracy_on_ids(model, train_data, spec.forget_ids),
        "forget_kept": accuracy_on_ids(model, train_data, run.forget_ids),
        "removed_li": accuracy_on_ids(model, train_data, run.removed_ids),
        "retain_full": accuracy_on_ids(model, train_data, spec.retain_ids),
        "test": accuracy(model, test_data),
    }
    mia = mia_attack(
        model, train_data.subset(spec.forget_ids), test_data,
        n_folds=mia_folds, seed=mia_seed,
    )
    return UnlearnReport(
        method=method, mode=mode, algorithm=run.algorithm.to_dict(),
        x=run.x if run.x is not None else 0.0,
        accuracies=accuracies, mia=mia,
        wall_clock_seconds=run.wall_clock_seconds,
        set_sizes={
            "forget_full": len(spec.forget_ids),
            "forget_kept": len(run.forget_ids),
            "retain_kept": len(run.retain_ids),
            "removed_li": len(run.removed_ids),
            "train": train_data.n_points,
            "test": test_data.n_points,
        },
        metadata=dict(run.metadata),
    )
