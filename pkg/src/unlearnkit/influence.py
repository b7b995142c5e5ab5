"""Training-point influence: an exact leave-one-out oracle and three
cheaper stand-ins.

Sign convention, shared by every method: larger score means more
influential. ``mode="test"`` scores a training point's effect on held-out
predictions (signed; magnitude is what matters for low-influence
selection), ``mode="self"`` scores the point's effect on itself
(nonnegative for the approximate methods; the memorization reading).

Methods
-------
exact_loo    retrain with and without the point, averaged over repeat seeds;
             value_kind picks accuracy differences (the definition) or
             average-loss differences (what the curvature method predicts).
hessian      score(j) = J_j' H^{-1} J_tilde (test) or J_j' H^{-1} J_j (self),
             with H the damped average-loss Hessian at the trained weights.
             The predicted change in average test loss from removing a group
             S is sum over S of score / n_train.
less         seeded random projection of per-checkpoint gradients; cosine
             against the mean projected test gradient (test) or normalized
             squared projected norm (self).
lowest_gradients
             max per-point gradient norm over trace checkpoints from a given
             checkpoint onward; low norm reads as low influence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import ParameterError
from .models import (
    ModelParams,
    gradient_matrix,
    mean_gradient,
    mean_loss,
    per_sample_losses,
    predict_labels,
    training_hessian,
)
from .training import GradientTrace, TrainConfig, retrain_without, train

METHODS = ("exact_loo", "hessian", "less", "lowest_gradients", "random")
MODES = ("test", "self")

# If the trained weights' average-gradient norm exceeds this, scores are
# still produced but flagged: the stationarity assumption is shaky.
GRAD_RESIDUAL_WARN = 1e-5

DEFAULT_LOO_REPEATS = 5
DEFAULT_PROJECTION_DIM = 512
DEFAULT_FROM_CHECKPOINT = 5
DEFAULT_COUNT_PERCENTILE = 5.0


@dataclass
class InfluenceScores:
    """Per-point scores from one method, keyed by training-point id."""

    method: str
    mode: str
    scores: dict[int, float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}, expected one of {MODES}")

    @property
    def n_points(self) -> int:
        return len(self.scores)

    def effective(self) -> dict[int, float]:
        """Scores on the scale used for low-influence selection.

        Test-mode scores are signed, so selection goes by magnitude;
        self-mode scores are used as-is.
        """
        if self.mode == "test":
            return {i: abs(s) for i, s in self.scores.items()}
        return dict(self.scores)


def _coerce_probe(probe, n_features: int) -> Dataset:
    if isinstance(probe, Dataset):
        if probe.n_points == 0:
            raise ParameterError("probe set is empty")
        return probe
    x, y = probe
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return Dataset(x, np.atleast_1d(np.asarray(y)), np.arange(x.shape[0]), n_classes=None)


# ---------------------------------------------------------------------------
# exact leave-one-out

def _probe_value(params: ModelParams, probe_x, probe_y, value_kind: str) -> float:
    if value_kind == "accuracy":
        return float(np.mean(predict_labels(params, probe_x) == probe_y))
    return mean_loss(params, probe_x, probe_y)


def exact_loo_scores(
    train_data: Dataset,
    arch,
    l2_lambda: float,
    config: TrainConfig,
    mode: str = "self",
    probe: Dataset | None = None,
    target_ids=None,
    repeats: int = DEFAULT_LOO_REPEATS,
    value_kind: str = "accuracy",
) -> InfluenceScores:
    """Brute-force leave-one-out influence for each target id.

    For every repeat seed, train once on the full data, then once per target
    with that point removed, and difference the probe value. ``accuracy``
    scores are (with - without), so a point whose removal helps the probe
    gets a negative score; ``loss`` scores are (without - with), the
    removal-caused loss increase, matching the curvature method's sign.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if value_kind not in ("accuracy", "loss"):
        raise ParameterError(f"value_kind must be 'accuracy' or 'loss', got {value_kind!r}")
    if repeats < 1:
        raise ParameterError(f"repeats must be >= 1, got {repeats}")
    if mode == "test":
        if probe is None:
            raise ParameterError("test mode requires a probe set")
        probe = _coerce_probe(probe, train_data.n_features)
    if target_ids is None:
        target_ids = [int(i) for i in train_data.ids]
    else:
        target_ids = [int(i) for i in target_ids]
        train_data.rows_for(target_ids)  # validates membership

    fast = replace(config, track_loss=False)
    totals = {t: 0.0 for t in target_ids}
    for r in range(repeats):
        cfg = replace(fast, seed=config.seed + r)
        full = train(train_data, arch, l2_lambda, cfg).params
        if mode == "test":
            base = _probe_value(full, probe.features, probe.labels, value_kind)
        for t in target_ids:
            reduced = retrain_without(train_data, [t], arch, l2_lambda, cfg)
            if mode == "test":
                px, py = probe.features, probe.labels
                with_val = base
            else:
                row = train_data.rows_for([t])[0]
                px = train_data.features[row:row + 1]
                py = train_data.labels[row:row + 1]
                with_val = _probe_value(full, px, py, value_kind)
            without_val = _probe_value(reduced, px, py, value_kind)
            if value_kind == "accuracy":
                totals[t] += with_val - without_val
            else:
                totals[t] += without_val - with_val
    scores = {t: v / repeats for t, v in totals.items()}
    return InfluenceScores(
        "exact_loo", mode, scores,
        metadata={
            "value_kind": value_kind,
            "repeats": repeats,
            "base_seed": config.seed,
            "n_train": train_data.n_points,
        },
    )


def exact_loo_influence(
    train_data: Dataset,
    probe,
    target_id: int,
    arch,
    l2_lambda: float,
    config: TrainConfig,
    repeats: int = DEFAULT_LOO_REPEATS,
    value_kind: str = "accuracy",
) -> float:
    """Influence of one training point on a probe point or subset.

    ``probe=None`` scores the point against itself (memorization).
    """
    mode = "self" if probe is None else "test"
    probe_set = None if probe is None else _coerce_probe(probe, train_data.n_features)
    result = exact_loo_scores(
        train_data, arch, l2_lambda, config,
        mode=mode, probe=probe_set, target_ids=[target_id],
        repeats=repeats, value_kind=value_kind,
    )
    return result.scores[int(target_id)]


def memorization_score(
    train_data: Dataset,
    target_id: int,
    arch,
    l2_lambda: float,
    config: TrainConfig,
    repeats: int = DEFAULT_LOO_REPEATS,
) -> float:
    """How much the model's accuracy on a point depends on having trained on it."""
    return exact_loo_influence(
        train_data, None, target_id, arch, l2_lambda, config,
        repeats=repeats, value_kind="accuracy",
    )


# ---------------------------------------------------------------------------
# curvature (inverse-Hessian) scores

def hessian_influence(
    train_data: Dataset,
    test_data: Dataset | None,
    params: ModelParams,
    mode: str = "test",
    damping: float | None = None,
    solver_mode: str | None = None,
    gauss_newton: bool = False,
    cg_tol: float = 1e-8,
    cg_max_iter: int | None = None,
) -> InfluenceScores:
    """Inverse-Hessian influence scores at the trained weights.

    Test mode solves H u = J_tilde once and scores every point as J_j . u;
    self mode solves per point through the shared factorization. For the mlp
    the exact Hessian can be indefinite: when its smallest eigenvalue is not
    positive, damping is raised to 10x its magnitude and the adjustment is
    recorded in the metadata.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if mode == "test" and test_data is None:
        raise ParameterError("test mode requires a test set")
    if train_data.n_points == 0:
        raise ParameterError("train set is empty")

    residual = float(np.linalg.norm(
        mean_gradient(params, train_data.features, train_data.labels)
    ))
    converged = residual <= GRAD_RESIDUAL_WARN
    if not converged:
        warnings.warn(
            f"average-gradient norm {residual:.3e} exceeds {GRAD_RESIDUAL_WARN:.0e}; "
            "influence scores assume a stationary point", stacklevel=2,
        )

    op = training_hessian(params, train_data, damping=damping,
                          mode=solver_mode, gauss_newton=gauss_newton)
    meta: dict = {
        "damping": op.damping,
        "solver_mode": op.mode,
        "grad_residual": residual,
        "converged": converged,
        "gauss_newton": gauss_newton,
    }
    if params.arch.kind == "mlp" and not gauss_newton and op.mode == "dense":
        lam_min = op.min_eigenvalue() - op.damping
        if lam_min <= 0:
            adjusted = max(op.damping, 10.0 * abs(lam_min), 1e-8)
            meta.update(min_eigenvalue=lam_min, damping_adjusted_from=op.damping,
                        damping=adjusted)
            op = op.with_damping(adjusted)

    grads = gradient_matrix(params, train_data.features, train_data.labels)
    if mode == "test":
        j_tilde = mean_gradient(params, test_data.features, test_data.labels)
        u = op.solve(j_tilde, tol=cg_tol, max_iter=cg_max_iter)
        values = grads @ u
        meta["n_test"] = test_data.n_points
    else:
        if op.mode == "dense":
            solved = op.solve(grads.T, tol=cg_tol, max_iter=cg_max_iter)
            values = np.einsum("nk,kn->n", grads, solved)
        else:
            values = np.array([
                float(g @ op.solve(g, tol=cg_tol, max_iter=cg_max_iter)) for g in grads
            ])
    scores = {int(i): float(v) for i, v in zip(train_data.ids, values)}
    return InfluenceScores("hessian", mode, scores, metadata=meta)


def predicted_group_loss_change(
    scores: InfluenceScores, group_ids, n_train: int
) -> float:
    """First-order prediction of the average test-loss change from removing
    a group, from test-mode curvature scores: sum of scores over the group
    divided by n_train."""
    if scores.method != "hessian" or scores.mode != "test":
        raise ParameterError("group prediction needs test-mode hessian scores")
    return sum(scores.scores[int(i)] for i in group_ids) / n_train


# ---------------------------------------------------------------------------
# projected-gradient (LESS-style) scores

def _projection(kind: str, dim: int, n_params: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        return rng.standard_normal((dim, n_params)) / np.sqrt(dim)
    if kind == "sign":
        return rng.choice([-1.0, 1.0], size=(dim, n_params)) / np.sqrt(dim)
    if kind == "orthonormal":
        if dim < n_params:
            raise ParameterError(
                "orthonormal projection needs projection_dim >= n_params "
                f"({dim} < {n_params})"
            )
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_params)))
        return q
    raise ParameterError(f"unknown projection kind {kind!r}")


def less_influence(
    train_data: Dataset,
    test_data: Dataset | None,
    checkpoints: list[ModelParams],
    mode: str = "test",
    projection_dim: int = DEFAULT_PROJECTION_DIM,
    seed: int = 0,
    projection_kind: str = "gaussian",
    adam_second_moment: np.ndarray | None = None,
    adam_eps: float = 1e-8,
) -> InfluenceScores:
    """Projected-gradient influence averaged over training checkpoints.

    One seeded projection matrix is shared by all points and checkpoints.
    Test mode scores each point by the cosine between its projected gradient
    and the mean projected test gradient; self mode by the squared projected
    norm, normalized per checkpoint to mean one so checkpoints contribute on
    a common scale. When an Adam second-moment accumulator is supplied,
    gradients are preconditioned by 1/(sqrt(v)+eps) before projection.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if not checkpoints:
        raise ParameterError("need at least one checkpoint")
    if mode == "test" and test_data is None:
        raise ParameterError("test mode requires a test set")
    if projection_dim < 1:
        raise ParameterError(f"projection_dim must be >= 1, got {projection_dim}")

    n_params = checkpoints[0].arch.n_params
    if any(ck.arch.n_params != n_params for ck in checkpoints):
        raise ParameterError("checkpoints disagree on parameter count")
    proj = _projection(projection_kind, projection_dim, n_params, seed)
    precond = None
    if adam_second_moment is not None:
        v = np.asarray(adam_second_moment, dtype=np.float64)
        if v.shape != (n_params,):
            raise ParameterError("adam_second_moment shape does not match n_params")
        precond = 1.0 / (np.sqrt(v) + adam_eps)

    n = train_data.n_points
    acc = np.zeros(n)
    used = 0
    skipped: list[int] = []
    for k, ck in enumerate(checkpoints):
        grads = gradient_matrix(ck, train_data.features, train_data.labels)
        if precond is not None:
            grads = grads * precond
        pg = grads @ proj.T
        if mode == "test":
            test_mean = mean_gradient(ck, test_data.features, test_data.labels)
            if precond is not None:
                test_mean = test_mean * precond
            t = proj @ test_mean
            t_norm = np.linalg.norm(t)
            g_norm = np.linalg.norm(pg, axis=1)
            denom = g_norm * t_norm
            with np.errstate(invalid="ignore", divide="ignore"):
                cos = np.where(denom > 0, (pg @ t) / np.where(denom > 0, denom, 1.0), 0.0)
            acc += cos
            used += 1
        else:
            sq = (pg * pg).sum(axis=1)
            scale = sq.mean()
            if scale <= 0:
                skipped.append(k)
                continue
            acc += sq / scale
            used += 1
    if used == 0:
        raise ParameterError("all checkpoints had zero projected gradients")
    values = acc / used
    scores = {int(i): float(v) for i, v in zip(train_data.ids, values)}
    meta = {
        "projection_dim": projection_dim,
        "projection_kind": projection_kind,
        "projection_seed": seed,
        "n_checkpoints": len(checkpoints),
        "checkpoints_used": used,
        "adam_preconditioned": precond is not None,
    }
    if skipped:
        meta["skipped_checkpoints"] = skipped
    return InfluenceScores("less", mode, scores, metadata=meta)


# ---------------------------------------------------------------------------
# gradient-norm scores

def lowest_gradient_scores(
    trace: GradientTrace, from_checkpoint: int = DEFAULT_FROM_CHECKPOINT
) -> InfluenceScores:
    """Max per-point gradient norm over checkpoints from ``from_checkpoint``
    (an index into the trace's checkpoint list) onward."""
    if not 0 <= from_checkpoint < trace.n_checkpoints:
        raise ParameterError(
            f"from_checkpoint {from_checkpoint} outside trace range "
            f"[0, {trace.n_checkpoints})"
        )
    values = trace.norms[from_checkpoint:].max(axis=0)
    scores = {int(i): float(v) for i, v in zip(trace.ids, values)}
    return InfluenceScores(
        "lowest_gradients", "self", scores,
        metadata={
            "norm_kind": trace.norm_kind,
            "from_checkpoint": from_checkpoint,
            "epochs_used": list(trace.epochs[from_checkpoint:]),
        },
    )


@dataclass
class LowGradientCurve:
    """Count of points below a fixed norm threshold, per checkpoint."""

    epochs: list[int]
    counts: list[int]
    threshold: float
    percentile: float
    norm_kind: str


def low_gradient_count_curve(
    trace: GradientTrace, threshold_percentile: float = DEFAULT_COUNT_PERCENTILE
) -> LowGradientCurve:
    """Per-checkpoint count of points whose gradient norm falls below the
    given percentile of the *first* checkpoint's norms.

    The threshold is computed once and then held fixed in absolute terms, so
    the curve shows how the low-gradient population grows as training
    progresses.
    """
    if not 0 < threshold_percentile < 100:
        raise ParameterError(
            f"threshold_percentile must be in (0, 100), got {threshold_percentile}"
        )
    threshold = float(np.percentile(trace.norms[0], threshold_percentile))
    counts = [int((row < threshold).sum()) for row in trace.norms]
    return LowGradientCurve(
        epochs=list(trace.epochs), counts=counts,
        threshold=threshold, percentile=threshold_percentile,
        norm_kind=trace.norm_kind,
    )


def random_scores(ids, seed: int) -> InfluenceScores:
    """Seeded uniform scores; the matched-cardinality baseline for agreement
    tables and removal curves."""
    ids = [int(i) for i in ids]
    rng = np.random.default_rng(seed)
    values = rng.uniform(size=len(ids))
    return InfluenceScores(
        "random", "self", {i: float(v) for i, v in zip(ids, values)},
        metadata={"seed": seed},
    )
