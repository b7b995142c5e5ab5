"""Experiment configuration: one declarative document drives every verb.

Configs are YAML mappings validated against the dataclass schema below.
Everything stochastic draws its seed from the single ``master_seed``
through a tagged hash, so rerunning any verb with the same config
reproduces its artifacts byte for byte, and no component accidentally
shares a stream with another.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .data import (
    FORGET_STRATEGIES,
    Dataset,
    ForgetSpec,
    generate_gaussian_blobs,
    load_csv,
    make_forget_spec,
    train_test_split,
)
from .errors import ConfigError
from .influence import MODES
from .models import ARCH_KINDS, ArchSpec
from .training import OPTIMIZERS, TrainConfig
from .unlearning import ALGORITHM_KINDS, UnlearnAlgorithm

SCORE_METHODS = ("exact_loo", "hessian", "less", "lowest_gradients")


def derive_seed(master_seed: int, tag: str) -> int:
    """Stable per-component seed: a hash of the master seed and a tag."""
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class DataSection:
    kind: str = "blobs"
    n_per_class: int = 150
    n_classes: int = 3
    dim: int = 8
    class_separation: float = 2.5
    n_test_per_class: int = 50
    path: str | None = None
    label_column: str = "label"
    test_fraction: float = 0.25


@dataclass
class ModelSection:
    arch: str = "logistic_regression"
    hidden: int = 16
    l2_lambda: float = 0.05


@dataclass
class TrainSection:
    optimizer: str = "gd"
    learning_rate: float = 0.5
    epochs: int = 4000
    batch_size: int = 32
    checkpoint_every: int | None = None
    convergence_grad_tol: float = 1e-7


@dataclass
class InfluenceSection:
    methods: list = field(default_factory=lambda: ["hessian", "less", "lowest_gradients"])
    modes: list = field(default_factory=lambda: ["self"])
    test_subset_size: int = 100
    damping: float | None = None
    projection_dim: int = 512
    projection_kind: str = "gaussian"
    loo_repeats: int = 5
    loo_value_kind: str = "accuracy"
    from_checkpoint: int = 5
    agreement_fraction: float = 0.25


@dataclass
class ForgetSection:
    fraction: float = 0.25
    strategy: str = "random"


@dataclass
class FilterSection:
    x_grid: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6])
    method: str = "hessian"
    mode: str = "self"
    baseline_kind: str = "none"
    cosine_c: float = 0.9
    cosine_k: int = 3
    cosine_sample_n: int = 20


@dataclass
class UnlearnSection:
    algorithms: list = field(default_factory=lambda: [
        {"kind": "retrain_full"},
        {"kind": "finetune_retain", "epochs": 20, "learning_rate": 0.1},
    ])
    repeats: int = 5


@dataclass
class EvalSection:
    mia_folds: int = 10


@dataclass
class CurveSection:
    removal_sizes: list = field(default_factory=lambda: [0, 10, 20, 40])
    count_percentile: float = 5.0


@dataclass
class ExperimentConfig:
    master_seed: int
    output_dir: str
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    forget: ForgetSection = field(default_factory=ForgetSection)
    filter: FilterSection = field(default_factory=FilterSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    curve: CurveSection = field(default_factory=CurveSection)


_SECTION_TYPES = {
    "data": DataSection, "model": ModelSection, "train": TrainSection,
    "influence": InfluenceSection, "forget": ForgetSection,
    "filter": FilterSection, "unlearn": UnlearnSection,
    "eval": EvalSection, "curve": CurveSection,
}


def _build_section(cls, mapping: dict, prefix: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{prefix}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown field {prefix}.{sorted(unknown)[0]}")
    return cls(**mapping)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a mapping, got {type(doc).__name__}")
    doc = dict(doc)
    for req in ("master_seed", "output_dir"):
        if req not in doc:
            raise ConfigError(f"missing required field {req!r}")
    top_known = {"master_seed", "output_dir"} | set(_SECTION_TYPES)
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown field {sorted(unknown)[0]!r}")
    sections = {
        name: _build_section(cls, doc.get(name, {}), name)
        for name, cls in _SECTION_TYPES.items()
    }
    cfg = ExperimentConfig(
        master_seed=doc["master_seed"], output_dir=doc["output_dir"], **sections
    )
    _validate(cfg)
    return cfg


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: ExperimentConfig) -> None:
    _expect(isinstance(cfg.master_seed, int), "master_seed: expected an integer")
    _expect(isinstance(cfg.output_dir, str) and cfg.output_dir != "",
            "output_dir: expected a nonempty string")
    d = cfg.data
    _expect(d.kind in ("blobs", "csv"), f"data.kind: unknown kind {d.kind!r}")
    if d.kind == "blobs":
        _expect(isinstance(d.n_per_class, int) and d.n_per_class >= 1,
                "data.n_per_class: expected a positive integer")
        _expect(isinstance(d.n_classes, int) and d.n_classes >= 2,
                "data.n_classes: expected an integer >= 2")
        _expect(isinstance(d.dim, int) and d.dim >= 1, "data.dim: expected a positive integer")
        _expect(isinstance(d.class_separation, (int, float)) and d.class_separation >= 0,
                "data.class_separation: expected a nonnegative number")
        _expect(isinstance(d.n_test_per_class, int) and d.n_test_per_class >= 1,
                "data.n_test_per_class: expected a positive integer")
    else:
        _expect(isinstance(d.path, str) and d.path != "", "data.path: required for csv data")
        _expect(0.0 < d.test_fraction < 1.0, "data.test_fraction: expected a fraction in (0, 1)")
    m = cfg.model
    _expect(m.arch in ARCH_KINDS, f"model.arch: unknown arch {m.arch!r}")
    _expect(isinstance(m.hidden, int) and m.hidden >= 1, "model.hidden: expected a positive integer")
    _expect(isinstance(m.l2_lambda, (int, float)) and m.l2_lambda >= 0,
            "model.l2_lambda: expected a nonnegative number")
    t = cfg.train
    _expect(t.optimizer in OPTIMIZERS, f"train.optimizer: unknown optimizer {t.optimizer!r}")
    _expect(isinstance(t.learning_rate, (int, float)) and t.learning_rate > 0,
            "train.learning_rate: expected a positive number")
    _expect(isinstance(t.epochs, int) and t.epochs >= 1, "train.epochs: expected a positive integer")
    _expect(isinstance(t.batch_size, int) and t.batch_size >= 1,
            "train.batch_size: expected a positive integer")
    _expect(t.checkpoint_every is None or (isinstance(t.checkpoint_every, int) and t.checkpoint_every >= 1),
            "train.checkpoint_every: expected a positive integer or null")
    i = cfg.influence
    _expect(isinstance(i.methods, list) and i.methods, "influence.methods: expected a nonempty list")
    for meth in i.methods:
        _expect(meth in SCORE_METHODS or meth == "all",
                f"influence.methods: unknown method {meth!r}")
    for mode in i.modes:
        _expect(mode in MODES, f"influence.modes: unknown mode {mode!r}")
    _expect(isinstance(i.test_subset_size, int) and i.test_subset_size >= 1,
            "influence.test_subset_size: expected a positive integer")
    _expect(isinstance(i.projection_dim, int) and i.projection_dim >= 1,
            "influence.projection_dim: expected a positive integer")
    _expect(i.loo_value_kind in ("accuracy", "loss"),
            f"influence.loo_value_kind: expected 'accuracy' or 'loss', got {i.loo_value_kind!r}")
    _expect(isinstance(i.from_checkpoint, int) and i.from_checkpoint >= 0,
            "influence.from_checkpoint: expected a nonnegative integer")
    _expect(0.0 < i.agreement_fraction <= 1.0,
            "influence.agreement_fraction: expected a fraction in (0, 1]")
    f = cfg.forget
    _expect(0.0 < f.fraction < 1.0, "forget.fraction: expected a fraction in (0, 1)")
    _expect(f.strategy in FORGET_STRATEGIES, f"forget.strategy: unknown strategy {f.strategy!r}")
    fl = cfg.filter
    _expect(isinstance(fl.x_grid, list) and fl.x_grid, "filter.x_grid: expected a nonempty list")
    for x in fl.x_grid:
        _expect(isinstance(x, (int, float)) and 0.0 <= x <= 1.0,
                f"filter.x_grid: value {x!r} outside [0, 1]")
    _expect(fl.method in SCORE_METHODS, f"filter.method: unknown method {fl.method!r}")
    _expect(fl.mode in MODES, f"filter.mode: unknown mode {fl.mode!r}")
    _expect(fl.baseline_kind in ("none", "random", "cosine"),
            f"filter.baseline_kind: unknown baseline {fl.baseline_kind!r}")
    u = cfg.unlearn
    _expect(isinstance(u.algorithms, list) and u.algorithms,
            "unlearn.algorithms: expected a nonempty list")
    for idx, alg in enumerate(u.algorithms):
        _expect(isinstance(alg, dict), f"unlearn.algorithms[{idx}]: expected a mapping")
        _expect(alg.get("kind") in ALGORITHM_KINDS,
                f"unlearn.algorithms[{idx}].kind: unknown algorithm {alg.get('kind')!r}")
    _expect(isinstance(u.repeats, int) and u.repeats >= 1,
            "unlearn.repeats: expected a positive integer")
    _expect(isinstance(cfg.eval.mia_folds, int) and cfg.eval.mia_folds >= 2,
            "eval.mia_folds: expected an integer >= 2")
    c = cfg.curve
    _expect(isinstance(c.removal_sizes, list) and c.removal_sizes,
            "curve.removal_sizes: expected a nonempty list")
    for n in c.removal_sizes:
        _expect(isinstance(n, int) and n >= 0, f"curve.removal_sizes: value {n!r} must be >= 0")
    _expect(0.0 < c.count_percentile < 100.0,
            "curve.count_percentile: expected a percentile in (0, 100)")


def _apply_override(doc: dict, dotted: str, raw: str) -> None:
    value = yaml.safe_load(raw)
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path, overrides: list[str] | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    """Read a YAML config, apply dotted ``key=value`` overrides, validate."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if doc is None:
        doc = {}
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form key=value")
        key, _, raw = ov.partition("=")
        _apply_override(doc, key.strip(), raw)
    if output_dir is not None:
        doc["output_dir"] = output_dir
    return config_from_dict(doc)


def config_checksum(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results. ``output_dir`` is where the
    artifacts land, not part of the experiment's identity, so it is left out."""
    doc = asdict(cfg)
    del doc["output_dir"]
    canonical = json.dumps(doc, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def provenance(cfg: ExperimentConfig) -> dict:
    return {"master_seed": cfg.master_seed, "config_checksum": config_checksum(cfg)}


# ---------------------------------------------------------------------------
# derived objects

def arch_spec(cfg: ExperimentConfig, train_data: Dataset) -> ArchSpec:
    hidden = cfg.model.hidden if cfg.model.arch == "mlp" else None
    n_classes = train_data.n_classes
    if n_classes is None:
        raise ConfigError("training data has no class information")
    return ArchSpec(cfg.model.arch, train_data.n_features, n_classes, hidden)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        optimizer=t.optimizer, learning_rate=t.learning_rate, epochs=t.epochs,
        batch_size=t.batch_size, seed=derive_seed(cfg.master_seed, "train"),
        checkpoint_every=t.checkpoint_every,
        convergence_grad_tol=t.convergence_grad_tol,
    )


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "blobs":
        n_train = d.n_per_class * d.n_classes
        train_data = generate_gaussian_blobs(
            d.n_per_class, d.n_classes, d.dim, d.class_separation,
            seed=derive_seed(cfg.master_seed, "data.train"), split_tag="train",
        )
        test_data = generate_gaussian_blobs(
            d.n_test_per_class, d.n_classes, d.dim, d.class_separation,
            seed=derive_seed(cfg.master_seed, "data.test"), split_tag="test",
            id_start=n_train,
        )
        return train_data, test_data
    full = load_csv(d.path, label_column=d.label_column)
    return train_test_split(full, d.test_fraction, derive_seed(cfg.master_seed, "data.split"))


def forget_spec(cfg: ExperimentConfig, train_data: Dataset) -> ForgetSpec:
    return make_forget_spec(
        train_data, cfg.forget.fraction, cfg.forget.strategy,
        seed=derive_seed(cfg.master_seed, "forget"),
    )


def test_subset(cfg: ExperimentConfig, test_data: Dataset) -> Dataset:
    """Seeded uniform test subset used by the test-mode scoring methods."""
    size = min(cfg.influence.test_subset_size, test_data.n_points)
    rng = np.random.default_rng(derive_seed(cfg.master_seed, "influence.test_subset"))
    ids = rng.choice(test_data.ids, size=size, replace=False)
    return test_data.subset(ids)
