"""Datasets: synthetic Gaussian blobs, CSV ingestion, and forget/retain splits.

All features are float64, labels are small nonnegative ints, and every point
carries a stable integer id that survives subsetting. Ids are how the rest of
the package refers to points; row order is an implementation detail.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ParameterError

FORGET_STRATEGIES = ("random", "class_balanced")


@dataclass
class Dataset:
    """An immutable-by-convention collection of labeled points.

    Parameters
    ----------
    features : (n, d) float64 array
    labels : (n,) integer array with values in [0, n_classes)
    ids : (n,) integer array, unique within the dataset
    split_tag : "train" or "test", carried through for bookkeeping
    n_classes : explicit class count; inferred as max(labels)+1 when omitted.
        Subsets can lose classes, so pass it explicitly when slicing.
    """

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    split_tag: str = "train"
    n_classes: int | None = None
    _id_to_row: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ParameterError(f"features must be 2-d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ParameterError(
                f"row-count mismatch: {n} feature rows, {self.labels.shape[0]} labels, "
                f"{self.ids.shape[0]} ids"
            )
        if len(set(self.ids.tolist())) != n:
            raise ParameterError("ids must be unique within a dataset")
        if self.split_tag not in ("train", "test"):
            raise ParameterError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        if n > 0 and self.labels.min() < 0:
            raise ParameterError("labels must be nonnegative")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n > 0 else None
        elif n > 0 and self.labels.max() >= self.n_classes:
            raise ParameterError(
                f"label {int(self.labels.max())} outside [0, {self.n_classes})"
            )
        self._id_to_row = {int(i): r for r, i in enumerate(self.ids)}

    @property
    def n_points(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def rows_for(self, ids) -> np.ndarray:
        """Row indices for the given ids, in this dataset's row order."""
        wanted = set(int(i) for i in ids)
        missing = wanted - self._id_to_row.keys()
        if missing:
            raise ParameterError(f"ids not in dataset: {sorted(missing)[:5]}")
        return np.array([r for r, i in enumerate(self.ids) if int(i) in wanted], dtype=np.intp)

    def subset(self, ids) -> "Dataset":
        """Points with the given ids, keeping original row order and class count."""
        rows = self.rows_for(ids)
        return Dataset(
            self.features[rows], self.labels[rows], self.ids[rows],
            split_tag=self.split_tag, n_classes=self.n_classes,
        )

    def without(self, ids) -> "Dataset":
        """All points except the given ids, which must all be present."""
        drop = set(int(i) for i in ids)
        missing = drop - self._id_to_row.keys()
        if missing:
            raise ParameterError(f"ids not in dataset: {sorted(missing)[:5]}")
        keep = [int(i) for i in self.ids if int(i) not in drop]
        return self.subset(keep)


@dataclass(frozen=True)
class ForgetSpec:
    """A partition of the training ids into a forget set S and retain set R."""

    forget_ids: frozenset[int]
    retain_ids: frozenset[int]

    def __post_init__(self):
        if not self.forget_ids:
            raise ParameterError("forget set must be nonempty")
        if self.forget_ids & self.retain_ids:
            raise ParameterError("forget and retain sets must be disjoint")

    def validate_against(self, train: Dataset) -> None:
        all_ids = set(int(i) for i in train.ids)
        if self.forget_ids | self.retain_ids != all_ids:
            raise ParameterError("forget and retain sets must partition the training ids")


def _lattice_point(c: int, dim: int) -> np.ndarray:
    # Binary-corner lattice; classes beyond 2^dim shift to the next layer
    # along the all-ones diagonal so centers never collide.
    corners = 1 << dim
    pattern, layer = c % corners, c // corners
    coords = np.array([(pattern >> j) & 1 for j in range(dim)], dtype=np.float64)
    return coords + 2.0 * layer


def generate_gaussian_blobs(
    n_per_class: int,
    n_classes: int,
    dim: int,
    class_separation: float,
    seed: int,
    split_tag: str = "train",
    id_start: int = 0,
    cluster_std: float = 0.75,
) -> Dataset:
    """Sample isotropic Gaussian blobs on a scaled lattice of class centers.

    Class c is centered at ``class_separation * lattice(c)``; noise is
    ``cluster_std`` per coordinate. The default spread leaves neighboring
    classes overlapping a little at separation 3, so linear models fit well
    without the problem becoming trivial. Generation is bit-deterministic
    for a given seed.
    """
    if n_per_class < 1 or n_classes < 2 or dim < 1:
        raise ParameterError(
            f"need n_per_class>=1, n_classes>=2, dim>=1; "
            f"got {n_per_class}, {n_classes}, {dim}"
        )
    if class_separation < 0:
        raise ParameterError(f"class_separation must be nonnegative, got {class_separation}")
    if cluster_std <= 0:
        raise ParameterError(f"cluster_std must be positive, got {cluster_std}")
    rng = np.random.default_rng(seed)
    feats, labs = [], []
    for c in range(n_classes):
        center = class_separation * _lattice_point(c, dim)
        feats.append(center + cluster_std * rng.standard_normal((n_per_class, dim)))
        labs.append(np.full(n_per_class, c, dtype=np.int64))
    n = n_per_class * n_classes
    return Dataset(
        np.vstack(feats), np.concatenate(labs),
        np.arange(id_start, id_start + n, dtype=np.int64),
        split_tag=split_tag, n_classes=n_classes,
    )


def load_csv(path, label_column: str = "label", split_tag: str = "train") -> Dataset:
    """Load a headered CSV of numeric features plus one integer label column.

    Ids are assigned 0..n-1 in file order. Parse failures report the
    offending row and column.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header row") from None
        if label_column not in header:
            raise IngestionError(f"{path}: no column named {label_column!r} in header {header}")
        label_idx = header.index(label_column)
        feat_cols = [j for j in range(len(header)) if j != label_idx]
        feats, labs = [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {rownum} has {len(row)} cells, header has {len(header)}"
                )
            try:
                feats.append([float(row[j]) for j in feat_cols])
            except ValueError:
                bad = next(j for j in feat_cols if not _is_float(row[j]))
                raise IngestionError(
                    f"{path}: row {rownum}, column {header[bad]!r}: "
                    f"could not parse {row[bad]!r} as a number"
                ) from None
            try:
                labs.append(int(row[label_idx]))
            except ValueError:
                raise IngestionError(
                    f"{path}: row {rownum}, column {label_column!r}: "
                    f"could not parse {row[label_idx]!r} as an integer label"
                ) from None
    n = len(feats)
    d = len(feat_cols)
    return Dataset(
        np.asarray(feats, dtype=np.float64).reshape(n, d),
        np.asarray(labs, dtype=np.int64),
        np.arange(n, dtype=np.int64),
        split_tag=split_tag,
    )


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_csv(dataset: Dataset, path) -> None:
    """Write features and labels so that load_csv round-trips exactly.

    Floats are rendered with repr, which is decimal-exact for float64.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(dataset.n_features)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded split into train/test parts; ids are preserved, so disjoint."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = dataset.n_points
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise ParameterError(f"test_fraction {test_fraction} leaves an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    test_rows = np.sort(order[:n_test])
    train_rows = np.sort(order[n_test:])
    mk = lambda rows, tag: Dataset(
        dataset.features[rows], dataset.labels[rows], dataset.ids[rows],
        split_tag=tag, n_classes=dataset.n_classes,
    )
    return mk(train_rows, "train"), mk(test_rows, "test")


def make_forget_spec(
    train: Dataset, fraction: float, strategy: str = "random", seed: int = 0
) -> ForgetSpec:
    """Draw a forget set of round(fraction * n) ids and put the rest in retain.

    ``class_balanced`` splits the quota equally per class, handing the
    remainder round-robin to classes in ascending label order.
    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"forget fraction must be in (0, 1), got {fraction}")
    if strategy not in FORGET_STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}, expected one of {FORGET_STRATEGIES}")
    n = train.n_points
    m = int(round(fraction * n))
    if m < 1 or m >= n:
        raise ParameterError(f"fraction {fraction} gives forget size {m} for n={n}")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        chosen = rng.choice(train.ids, size=m, replace=False)
    else:
        classes = sorted(set(train.labels.tolist()))
        quota = {c: m // len(classes) for c in classes}
        for c in classes[: m % len(classes)]:
            quota[c] += 1
        picks = []
        for c in classes:
            pool = train.ids[train.labels == c]
            if quota[c] > len(pool):
                raise ParameterError(
                    f"class {c} has {len(pool)} points, cannot take {quota[c]}"
                )
            picks.append(rng.choice(pool, size=quota[c], replace=False))
        chosen = np.concatenate(picks)
    forget = frozenset(int(i) for i in chosen)
    retain = frozenset(int(i) for i in train.ids) - forget
    spec = ForgetSpec(forget, retain)
    spec.validate_against(train)
    return spec
