"""Turning scores into sets: bottom-fraction selection, forget/retain set
reduction, similarity-based baselines, and agreement statistics.

Selection is deliberately dumb: sort by effective score with ids breaking
ties, take the floor(x * n) smallest. Everything downstream (unlearning,
curves, agreement tables) goes through the same ordering so results are
comparable across methods.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .data import Dataset, ForgetSpec
from .errors import ParameterError
from .influence import InfluenceScores

COSINE_ZERO_NORM = 1e-12


def rank_ids(scores: InfluenceScores) -> list[int]:
    """All ids ordered by ascending effective score, ids breaking ties."""
    eff = scores.effective()
    return sorted(eff, key=lambda i: (eff[i], i))


def select_bottom(scores: InfluenceScores, x: float) -> frozenset[int]:
    """The floor(x * n) lowest-influence ids; empty at x=0, everything at x=1."""
    if not 0.0 <= x <= 1.0:
        raise ParameterError(f"x must be in [0, 1], got {x}")
    if scores.n_points == 0:
        raise ParameterError("scores are empty")
    count = int(np.floor(x * scores.n_points))
    return frozenset(rank_ids(scores)[:count])


@dataclass(frozen=True)
class SelectionResult:
    """A low-influence selection D_LI with enough provenance to replay it."""

    x: float
    selected_ids: frozenset[int]
    method: str
    mode: str
    n_total: int
    metadata: dict = field(default_factory=dict, compare=False)


def make_selection(scores: InfluenceScores, x: float) -> SelectionResult:
    return SelectionResult(
        x=x,
        selected_ids=select_bottom(scores, x),
        method=scores.method,
        mode=scores.mode,
        n_total=scores.n_points,
    )


def reduce_sets(spec: ForgetSpec, d_li) -> tuple[frozenset[int], frozenset[int]]:
    """Drop the low-influence ids from both sides of the partition.

    Returns (S_HI, R_HI) = (S - D_LI, R - D_LI). Either may come back empty.
    """
    d_li = frozenset(int(i) for i in d_li)
    return spec.forget_ids - d_li, spec.retain_ids - d_li


def jaccard_similarity(a, b) -> float:
    """|a n b| / |a u b|, defined as 1 when both sets are empty."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def spearman_correlation(scores_a: dict, scores_b: dict) -> float:
    """Rank correlation of two score maps over the same ids, average ranks
    for ties."""
    keys_a, keys_b = set(scores_a), set(scores_b)
    if keys_a != keys_b:
        raise ParameterError(
            f"score maps cover different ids ({len(keys_a ^ keys_b)} mismatched)"
        )
    if len(keys_a) < 2:
        raise ParameterError("need at least two points for a rank correlation")
    if scores_a == scores_b:
        # agreement tables put this on the diagonal; keep it exactly 1
        return 1.0
    keys = sorted(keys_a)
    a = np.array([scores_a[k] for k in keys], dtype=np.float64)
    b = np.array([scores_b[k] for k in keys], dtype=np.float64)
    rho = scipy.stats.spearmanr(a, b).statistic
    return float(rho)


def class_distribution(ids, dataset: Dataset) -> dict[int, int]:
    """Class histogram of the given ids; every class key is present, so an
    empty selection yields an all-zero histogram."""
    if dataset.n_classes is None:
        raise ParameterError("dataset has no class count")
    hist = {c: 0 for c in range(dataset.n_classes)}
    ids = list(ids)
    if ids:
        rows = dataset.rows_for(ids)
        for lab in dataset.labels[rows]:
            hist[int(lab)] += 1
    return hist


def cosine_filter(
    train: Dataset,
    spec: ForgetSpec,
    c: float,
    k: int,
    sample_n: int,
    seed: int,
    features: np.ndarray | None = None,
) -> frozenset[int]:
    """Similarity-qualified removal baseline.

    A forget point qualifies when at least ``k`` retain-side points have
    cosine similarity >= ``c`` to it; ``sample_n`` qualifiers are then drawn
    uniformly with the given seed. ``features`` overrides the raw feature
    matrix (row-aligned with ``train``) so callers can pass a learned
    representation instead. Zero-norm rows are excluded with a warning.
    """
    if not -1.0 <= c <= 1.0:
        raise ParameterError(f"cosine threshold must be in [-1, 1], got {c}")
    if k < 1 or sample_n < 1:
        raise ParameterError(f"need k >= 1 and sample_n >= 1, got k={k}, sample_n={sample_n}")
    spec.validate_against(train)
    feats = train.features if features is None else np.asarray(features, dtype=np.float64)
    if feats.shape[0] != train.n_points:
        raise ParameterError(
            f"features have {feats.shape[0]} rows, dataset has {train.n_points}"
        )
    norms = np.linalg.norm(feats, axis=1)
    zero = norms <= COSINE_ZERO_NORM
    if zero.any():
        warnings.warn(
            f"excluding {int(zero.sum())} zero-norm rows from cosine filtering",
            stacklevel=2,
        )
    unit = np.where(zero[:, None], 0.0, feats / np.where(zero, 1.0, norms)[:, None])

    forget_rows = train.rows_for(sorted(spec.forget_ids))
    retain_rows = train.rows_for(sorted(spec.retain_ids))
    retain_rows = retain_rows[~zero[retain_rows]]
    if len(retain_rows) == 0:
        raise ParameterError("no usable retain-side points for neighbor search")
    sims = unit[forget_rows] @ unit[retain_rows].T
    # normalized self-products land within one ulp of 1, so an exact
    # duplicate must still qualify at c = 1.0
    enough = (sims >= c - 1e-9).sum(axis=1) >= k
    usable = enough & ~zero[forget_rows]
    candidates = sorted(int(train.ids[r]) for r in forget_rows[usable])
    if len(candidates) < sample_n:
        raise ParameterError(
            f"only {len(candidates)} forget points have >= {k} neighbors at "
            f"cosine >= {c}, cannot sample {sample_n}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.array(candidates, dtype=np.int64), size=sample_n, replace=False)
    return frozenset(int(i) for i in chosen)


@dataclass(frozen=True)
class AgreementEntry:
    label_a: str
    label_b: str
    jaccard: float
    spearman: float


def agreement_matrix(
    named_scores: dict[str, InfluenceScores], x: float
) -> list[AgreementEntry]:
    """Pairwise agreement between score maps: Jaccard of the bottom-x sets
    and Spearman of the effective scores. Emits the full matrix, diagonal
    included, in label order."""
    labels = list(named_scores)
    if len(labels) < 1:
        raise ParameterError("need at least one score map")
    bottoms = {lab: select_bottom(named_scores[lab], x) for lab in labels}
    effectives = {lab: named_scores[lab].effective() for lab in labels}
    entries = []
    for la in labels:
        for lb in labels:
            entries.append(AgreementEntry(
                la, lb,
                jaccard_similarity(bottoms[la], bottoms[lb]),
                spearman_correlation(effectives[la], effectives[lb]),
            ))
    return entries
