"""Differentiable classifiers with exact per-sample derivatives.

Two architectures share one flat-parameter convention:

* ``logistic_regression``: a (d+1, C) matrix of weights-plus-bias, raveled.
* ``mlp``: one tanh hidden layer; blocks [W1, b1, W2, b2] concatenated.

The per-point loss is softmax cross-entropy plus the full ridge term
(l2_lambda / 2) * ||w||^2, so the average loss over any subset equals
cross-entropy over that subset plus the same ridge term. That convention
keeps subset retraining and reweighted objectives interchangeable.

All second-order quantities are exact. The MLP Hessian-vector product is a
forward-over-reverse sweep (directional derivative of the gradient), not a
Gauss-Newton approximation; Gauss-Newton is available as an explicit toggle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .data import Dataset
from .errors import ParameterError, ShapeError, SolverError

ARCH_KINDS = ("logistic_regression", "mlp")

# Above this parameter count the operator switches to matrix-free solves.
DENSE_PARAM_LIMIT = 2000

_DEFAULT_DAMPING = {"logistic_regression": 0.0, "mlp": 1e-3}


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; fixes the flat parameter layout."""

    kind: str
    n_features: int
    n_classes: int
    hidden: int | None = None

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ParameterError(f"unknown arch {self.kind!r}, expected one of {ARCH_KINDS}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ParameterError(
                f"need n_features>=1 and n_classes>=2, got {self.n_features}, {self.n_classes}"
            )
        if self.kind == "mlp" and (self.hidden is None or self.hidden < 1):
            raise ParameterError("mlp arch requires hidden >= 1")

    @property
    def n_params(self) -> int:
        d, c = self.n_features, self.n_classes
        if self.kind == "logistic_regression":
            return (d + 1) * c
        h = self.hidden
        return (d + 1) * h + (h + 1) * c

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "hidden": self.hidden,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(d["kind"], d["n_features"], d["n_classes"], d.get("hidden"))


@dataclass
class ModelParams:
    """A trained (or initial) flat weight vector bound to its architecture.

    Treated as immutable: the weight buffer is copied in and write-locked.
    """

    weights: np.ndarray
    arch: ArchSpec
    l2_lambda: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.arch.n_params,):
            raise ShapeError(
                f"weights shape {w.shape} does not match arch n_params {self.arch.n_params}"
            )
        if self.l2_lambda < 0:
            raise ParameterError(f"l2_lambda must be nonnegative, got {self.l2_lambda}")
        if not np.isfinite(w).all():
            raise ParameterError("weights contain non-finite entries")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def replace_weights(self, weights: np.ndarray) -> "ModelParams":
        return ModelParams(weights, self.arch, self.l2_lambda)


@dataclass(frozen=True)
class LossGradient:
    """Per-point loss gradient, keyed by the point's id."""

    point_id: int
    grad: np.ndarray


def init_params(arch: ArchSpec, l2_lambda: float, seed: int) -> ModelParams:
    """Seeded starting point shared by training and every retraining run.

    Depends only on (arch, seed), never on the data, so a retraining run on a
    reduced dataset starts exactly where the full run started.
    """
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(arch.n_params)
    return ModelParams(w, arch, l2_lambda)


# ---------------------------------------------------------------------------
# forward passes

def _unpack_logistic(params: ModelParams) -> np.ndarray:
    d, c = params.arch.n_features, params.arch.n_classes
    return params.weights.reshape(d + 1, c)


def _unpack_mlp(params: ModelParams):
    d, c, h = params.arch.n_features, params.arch.n_classes, params.arch.hidden
    w = params.weights
    o1 = d * h
    w1 = w[:o1].reshape(d, h)
    b1 = w[o1:o1 + h]
    o2 = o1 + h
    w2 = w[o2:o2 + h * c].reshape(h, c)
    b2 = w[o2 + h * c:]
    return w1, b1, w2, b2


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _check_features(arch: ArchSpec, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != arch.n_features:
        raise ShapeError(f"expected {arch.n_features} features, got {x.shape[1]}")
    return x


def predict_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = _check_features(params.arch, x)
    if params.arch.kind == "logistic_regression":
        return _augment(x) @ _unpack_logistic(params)
    w1, b1, w2, b2 = _unpack_mlp(params)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return _softmax(predict_logits(params, x))


def predict_labels(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(predict_logits(params, x), axis=1)


def penultimate_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Representation used for similarity search: hidden activations for the
    mlp, raw features for logistic regression."""
    x = _check_features(params.arch, x)
    if params.arch.kind == "logistic_regression":
        return x
    w1, b1, _, _ = _unpack_mlp(params)
    return np.tanh(x @ w1 + b1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(arch: ArchSpec, y: np.ndarray, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if n > 0 and (y.min() < 0 or y.max() >= arch.n_classes):
        raise ParameterError(f"labels must lie in [0, {arch.n_classes})")
    return y


# ---------------------------------------------------------------------------
# losses and first derivatives

def per_sample_losses(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vector of softmax cross-entropy + ridge losses, one entry per point."""
    x = _check_features(params.arch, x)
    y = _check_labels(params.arch, y, x.shape[0])
    z = predict_logits(params, x)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    reg = 0.5 * params.l2_lambda * float(params.weights @ params.weights)
    return lse - z[np.arange(len(y)), y] + reg


def per_sample_loss(params: ModelParams, x: np.ndarray, y: int) -> float:
    return float(per_sample_losses(params, x, np.array([y]))[0])


def gradient_matrix(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(n, K) matrix whose row i is the gradient of point i's loss.

    Rows include the ridge gradient l2_lambda * w, matching the per-point
    loss definition.
    """
    x = _check_features(params.arch, x)
    y = _check_labels(params.arch, y, x.shape[0])
    n = x.shape[0]
    c = params.arch.n_classes
    if params.arch.kind == "logistic_regression":
        xt = _augment(x)
        g2 = _softmax(xt @ _unpack_logistic(params))
        g2[np.arange(n), y] -= 1.0
        grads = np.einsum("si,sc->sic", xt, g2).reshape(n, -1)
    else:
        w1, b1, w2, b2 = _unpack_mlp(params)
        z1 = x @ w1 + b1
        a = np.tanh(z1)
        g2 = _softmax(a @ w2 + b2)
        g2[np.arange(n), y] -= 1.0
        d1 = (g2 @ w2.T) * (1.0 - a * a)
        grads = np.hstack([
            np.einsum("sd,sh->sdh", x, d1).reshape(n, -1),
            d1,
            np.einsum("sh,sc->shc", a, g2).reshape(n, -1),
            g2,
        ])
    if params.l2_lambda:
        grads += params.l2_lambda * params.weights
    return grads


def per_sample_grad(params: ModelParams, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of one point's loss with respect to the flat weights."""
    return gradient_matrix(params, x, np.array([y]))[0]


def loss_gradients(params: ModelParams, dataset: Dataset) -> list[LossGradient]:
    mat = gradient_matrix(params, dataset.features, dataset.labels)
    return [LossGradient(int(i), g) for i, g in zip(dataset.ids, mat)]


def mean_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the average loss over the given points.

    Computed without materializing per-sample rows; this is the training
    loop's hot path.
    """
    x = _check_features(params.arch, x)
    y = _check_labels(params.arch, y, x.shape[0])
    n = x.shape[0]
    if n == 0:
        raise ParameterError("cannot average a gradient over zero points")
    if params.arch.kind == "logistic_regression":
        xt = _augment(x)
        g2 = _softmax(xt @ _unpack_logistic(params))
        g2[np.arange(n), y] -= 1.0
        g = (xt.T @ g2).ravel() / n
    else:
        w1, b1, w2, b2 = _unpack_mlp(params)
        a = np.tanh(x @ w1 + b1)
        g2 = _softmax(a @ w2 + b2)
        g2[np.arange(n), y] -= 1.0
        d1 = (g2 @ w2.T) * (1.0 - a * a)
        g = np.concatenate([
            (x.T @ d1).ravel() / n,
            d1.mean(axis=0),
            (a.T @ g2).ravel() / n,
            g2.mean(axis=0),
        ])
    return g + params.l2_lambda * params.weights


def mean_loss(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    return float(per_sample_losses(params, x, y).mean())


# ---------------------------------------------------------------------------
# second derivatives

def hessian_vector_product(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
    gauss_newton: bool = False,
) -> np.ndarray:
    """Product of the averaged loss Hessian over (x, y) with direction v.

    For logistic regression the Hessian is the exact analytic one (which
    coincides with Gauss-Newton). For the mlp the default is the exact
    Hessian via a forward-over-reverse sweep; ``gauss_newton=True`` drops the
    second-order activation terms.
    """
    x = _check_features(params.arch, x)
    y = _check_labels(params.arch, y, x.shape[0])
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.weights.shape:
        raise ShapeError(f"direction shape {v.shape} does not match n_params")
    n = x.shape[0]
    if n == 0:
        return params.l2_lambda * v
    c = params.arch.n_classes

    if params.arch.kind == "logistic_regression":
        xt = _augment(x)
        p = _softmax(xt @ _unpack_logistic(params))
        q = xt @ v.reshape(-1, c)
        aq = p * q - p * (p * q).sum(axis=1, keepdims=True)
        hv = (xt.T @ aq).ravel() / n
        return hv + params.l2_lambda * v

    d, h = params.arch.n_features, params.arch.hidden
    w1, b1, w2, b2 = _unpack_mlp(params)
    o1, o2 = d * h, d * h + h
    v1 = v[:o1].reshape(d, h)
    c1 = v[o1:o2]
    v2 = v[o2:o2 + h * c].reshape(h, c)
    c2 = v[o2 + h * c:]

    z1 = x @ w1 + b1
    a = np.tanh(z1)
    s = 1.0 - a * a
    p = _softmax(a @ w2 + b2)

    rz1 = x @ v1 + c1
    ra = s * rz1
    rz2 = a @ v2 + ra @ w2 + c2
    rp = p * (rz2 - (p * rz2).sum(axis=1, keepdims=True))

    if gauss_newton:
        hw2 = a.T @ rp / n
        hb2 = rp.mean(axis=0)
        d1 = (rp @ w2.T) * s
        hw1 = x.T @ d1 / n
        hb1 = d1.mean(axis=0)
    else:
        g2 = p.copy()
        g2[np.arange(n), y] -= 1.0
        hw2 = (ra.T @ g2 + a.T @ rp) / n
        hb2 = rp.mean(axis=0)
        u = g2 @ w2.T
        ru = g2 @ v2.T + rp @ w2.T
        rd1 = ru * s - 2.0 * u * a * ra
        hw1 = x.T @ rd1 / n
        hb1 = rd1.mean(axis=0)

    hv = np.concatenate([hw1.ravel(), hb1, hw2.ravel(), hb2])
    return hv + params.l2_lambda * v


def _dense_hessian(
    params: ModelParams, x: np.ndarray, y: np.ndarray, gauss_newton: bool
) -> np.ndarray:
    k = params.arch.n_params
    n = x.shape[0]
    if n == 0:
        return params.l2_lambda * np.eye(k)
    if params.arch.kind == "logistic_regression":
        xt = _augment(x)
        p = _softmax(xt @ _unpack_logistic(params))
        a = p[:, :, None] * np.eye(params.arch.n_classes) - p[:, :, None] * p[:, None, :]
        h = np.einsum("si,sj,scd->icjd", xt, xt, a).reshape(k, k) / n
        return h + params.l2_lambda * np.eye(k)
    # Exact mlp Hessian, assembled one column at a time from HVPs.
    cols = [
        hessian_vector_product(params, x, y, e, gauss_newton=gauss_newton)
        for e in np.eye(k)
    ]
    return np.column_stack(cols)


class HessianOperator:
    """Damped Hessian of the average training loss, with a solve method.

    ``mode`` is chosen by parameter count when not forced: ``dense`` below
    DENSE_PARAM_LIMIT (direct Cholesky solves, factor cached), ``matrix_free``
    above it (conjugate gradients on Hessian-vector products).
    """

    def __init__(
        self,
        params: ModelParams,
        train: Dataset,
        damping: float | None = None,
        mode: str | None = None,
        gauss_newton: bool = False,
    ):
        if damping is None:
            damping = _DEFAULT_DAMPING[params.arch.kind]
        if damping < 0:
            raise ParameterError(f"damping must be nonnegative, got {damping}")
        if mode is None:
            mode = "dense" if params.arch.n_params <= DENSE_PARAM_LIMIT else "matrix_free"
        if mode not in ("dense", "matrix_free"):
            raise ParameterError(f"mode must be 'dense' or 'matrix_free', got {mode!r}")
        if gauss_newton and params.arch.kind != "mlp":
            raise ParameterError("gauss_newton applies only to the mlp arch")
        self.params = params
        self.x = train.features
        self.y = train.labels
        self.damping = float(damping)
        self.mode = mode
        self.gauss_newton = gauss_newton
        self._dense: np.ndarray | None = None
        self._chol = None

    @property
    def n_params(self) -> int:
        return self.params.arch.n_params

    def matvec(self, v: np.ndarray) -> np.ndarray:
        hv = hessian_vector_product(
            self.params, self.x, self.y, v, gauss_newton=self.gauss_newton
        )
        return hv + self.damping * v

    def dense(self) -> np.ndarray:
        if self._dense is None:
            h = _dense_hessian(self.params, self.x, self.y, self.gauss_newton)
            self._dense = h + self.damping * np.eye(self.n_params)
        return self._dense

    def min_eigenvalue(self) -> float:
        return float(scipy.linalg.eigh(self.dense(), eigvals_only=True,
                                       subset_by_index=[0, 0])[0])

    def with_damping(self, damping: float) -> "HessianOperator":
        return HessianOperator(
            self.params,
            Dataset(self.x, self.y, np.arange(len(self.y)),
                    n_classes=self.params.arch.n_classes),
            damping=damping, mode=self.mode, gauss_newton=self.gauss_newton,
        )

    def solve(self, rhs: np.ndarray, tol: float = 1e-8, max_iter: int | None = None) -> np.ndarray:
        """Solve (H + damping I) sol = rhs; rhs may be a vector or (K, m) matrix."""
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.n_params:
            raise ShapeError(f"rhs has {rhs.shape[0]} rows, operator has {self.n_params}")
        if not np.all(np.isfinite(rhs)):
            raise ParameterError("rhs contains non-finite values")
        if self.mode == "dense":
            if self._chol is None:
                try:
                    self._chol = scipy.linalg.cho_factor(self.dense())
                except scipy.linalg.LinAlgError as exc:
                    raise SolverError(
                        f"Hessian is not positive definite (damping={self.damping}); "
                        "raise damping"
                    ) from exc
            return scipy.linalg.cho_solve(self._chol, rhs)
        if rhs.ndim == 1:
            return self._cg(rhs, tol, max_iter)
        return np.column_stack([self._cg(col, tol, max_iter) for col in rhs.T])

    def _cg(self, b: np.ndarray, tol: float, max_iter: int | None) -> np.ndarray:
        if max_iter is None:
            max_iter = 10 * self.n_params
        b_norm = float(np.linalg.norm(b))
        if b_norm == 0.0:
            return np.zeros_like(b)
        x = np.zeros_like(b)
        r = b.copy()
        p = r.copy()
        rs = float(r @ r)
        for _ in range(max_iter):
            ap = self.matvec(p)
            denom = float(p @ ap)
            if denom <= 0:
                raise SolverError(
                    "operator is not positive definite along a CG direction; "
                    f"raise damping (current {self.damping})",
                    residual=float(np.sqrt(rs)),
                )
            alpha = rs / denom
            x += alpha * p
            r -= alpha * ap
            rs_new = float(r @ r)
            if np.sqrt(rs_new) <= tol * b_norm:
                return x
            p = r + (rs_new / rs) * p
            rs = rs_new
        raise SolverError(
            f"conjugate gradients did not converge in {max_iter} iterations "
            f"(relative residual {np.sqrt(rs) / b_norm:.3e}, tol {tol:.3e})",
            residual=float(np.sqrt(rs)),
        )


def training_hessian(
    params: ModelParams,
    train: Dataset,
    damping: float | None = None,
    mode: str | None = None,
    gauss_newton: bool = False,
) -> HessianOperator:
    """Operator form of the damped average-loss Hessian over ``train``."""
    if train.n_features != params.arch.n_features:
        raise ShapeError(
            f"dataset has {train.n_features} features, arch expects {params.arch.n_features}"
        )
    return HessianOperator(params, train, damping=damping, mode=mode, gauss_newton=gauss_newton)


def hessian_solve(
    operator: HessianOperator, rhs: np.ndarray, tol: float = 1e-8, max_iter: int | None = None
) -> np.ndarray:
    return operator.solve(rhs, tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------------------
# serialization

def weights_checksum(params: ModelParams) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.weights).tobytes()).hexdigest()


def save_params(params: ModelParams, path, provenance: dict | None = None) -> None:
    """Write a checkpoint as JSON; repr-based floats round-trip exactly."""
    doc = {
        "arch": params.arch.to_dict(),
        "l2_lambda": params.l2_lambda,
        "weights": [float(w) for w in params.weights],
    }
    if provenance:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc, indent=1))


def load_params(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise ParameterError(f"no checkpoint at {path}")
    doc = json.loads(path.read_text())
    return ModelParams(
        np.array(doc["weights"], dtype=np.float64),
        ArchSpec.from_dict(doc["arch"]),
        doc["l2_lambda"],
    )
