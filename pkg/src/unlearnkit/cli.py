"""Command line entry points.

Six verbs cover the pipeline: ``train``, ``influence``, ``filter``,
``unlearn``, ``curve``, ``report``. Each takes ``--config`` (a YAML file),
optional ``--set key=value`` overrides with dotted paths, and ``--out`` to
redirect the artifact directory. Verbs communicate only through artifacts
in the output directory, so they can run in separate processes, in order:
later verbs fail with exit code 3 when an artifact they need is missing.

Exit codes: 0 success, 2 bad config or arguments, 3 missing prerequisite
artifact, 4 numerical failure (training divergence or a solver that did
not converge).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .artifacts import (
    read_csv_artifact,
    read_json_artifact,
    write_csv_artifact,
    write_id_list,
    write_json_artifact,
)
from .data import Dataset, ForgetSpec, write_csv
from .errors import (
    ConfigError,
    IngestionError,
    ParameterError,
    PrerequisiteError,
    SolverError,
    TrainingError,
    UnlearnKitError,
)
from .evaluation import UnlearnReport, accuracy, build_report, removal_curve
from .experiment import (
    SCORE_METHODS,
    ExperimentConfig,
    arch_spec,
    build_datasets,
    derive_seed,
    forget_spec,
    load_config,
    provenance,
    test_subset,
    train_config,
)
from .influence import (
    InfluenceScores,
    exact_loo_scores,
    hessian_influence,
    less_influence,
    low_gradient_count_curve,
    lowest_gradient_scores,
    random_scores,
)
from .models import ModelParams, ArchSpec, load_params, save_params, weights_checksum
from .ranking import (
    agreement_matrix,
    class_distribution,
    cosine_filter,
    make_selection,
    reduce_sets,
)
from .training import GradientTrace, train
from .unlearning import UnlearnAlgorithm, filtered_unlearn

CHECKPOINT_FILE = "checkpoint.json"
CHECKPOINTS_FILE = "checkpoints.json"
TRACE_FILES = {"l2": "trace_l2.csv", "linf": "trace_linf.csv"}
FORGET_SPEC_FILE = "forget_spec.json"
AGREEMENT_FILE = "agreement.csv"
FILTER_SUMMARY_FILE = "filter_summary.csv"
REPORTS_FILE = "reports.csv"
TIMINGS_FILE = "reports_timings.csv"
COUNTS_FILE = "low_gradient_counts.csv"
RUNS_DIR = "runs"

REPORT_COLUMNS = [
    "run_id", "method", "mode", "algorithm", "x", "repeat",
    "n_forget_full", "n_forget_kept", "n_retain_kept", "n_removed",
    "acc_forget_full", "acc_forget_kept", "acc_removed_li",
    "acc_retain_full", "acc_test",
    "mia_accuracy", "mia_ci95", "mia_n_folds",
]
CURVE_COLUMNS = ["method", "n_removed", "acc_removed", "acc_test", "acc_removed_random"]


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(
            f"missing artifact {path.name}: run the {produced_by!r} verb first"
        )
    return path


def _scores_name(method: str, mode: str) -> str:
    return f"scores_{method}_{mode}.csv"


def _selection_name(method: str, mode: str, x: float) -> str:
    return f"selection_{method}_{mode}_x{x:g}.txt"


# ---------------------------------------------------------------------------
# artifact round-trips the library types do not own

def _write_trace(path: Path, trace: GradientTrace, prov: dict) -> None:
    columns = ["epoch"] + [str(int(i)) for i in trace.ids]
    rows = [
        [epoch] + [float(v) for v in trace.norms[k]]
        for k, epoch in enumerate(trace.epochs)
    ]
    write_csv_artifact(path, columns, rows, {**prov, "norm_kind": trace.norm_kind})


def _read_trace(path: Path) -> GradientTrace:
    prov, columns, rows = read_csv_artifact(path)
    if columns[:1] != ["epoch"]:
        raise IngestionError(f"{path}: expected first column 'epoch', got {columns[:1]}")
    ids = np.array([int(c) for c in columns[1:]], dtype=np.int64)
    epochs = [int(r["epoch"]) for r in rows]
    norms = np.array([[float(r[c]) for c in columns[1:]] for r in rows])
    return GradientTrace(prov.get("norm_kind", "l2"), epochs, ids, norms)


def _write_checkpoints(path: Path, result, arch: ArchSpec, l2_lambda: float,
                       prov: dict) -> None:
    doc = {
        "arch": arch.to_dict(),
        "l2_lambda": l2_lambda,
        "epochs": [int(e) for e, _ in result.checkpoints],
        "weights": [[float(w) for w in p.weights] for _, p in result.checkpoints],
        "adam_second_moment": (
            None if result.adam_second_moment is None
            else [float(v) for v in result.adam_second_moment]
        ),
    }
    write_json_artifact(path, doc, prov)


def _read_checkpoints(path: Path) -> tuple[list[ModelParams], np.ndarray | None]:
    doc = read_json_artifact(path)
    arch = ArchSpec.from_dict(doc["arch"])
    lam = doc["l2_lambda"]
    params = [ModelParams(np.array(w, dtype=np.float64), arch, lam)
              for w in doc["weights"]]
    moment = doc.get("adam_second_moment")
    return params, None if moment is None else np.array(moment, dtype=np.float64)


def _write_scores(out: Path, scores: InfluenceScores, prov: dict) -> Path:
    path = out / _scores_name(scores.method, scores.mode)
    rows = [[i, scores.scores[i]] for i in sorted(scores.scores)]
    write_csv_artifact(path, ["id", "score"], rows, prov)
    meta = {"method": scores.method, "mode": scores.mode, "metadata": scores.metadata}
    write_json_artifact(path.with_suffix(".meta.json"), meta, prov)
    return path


def _read_scores(out: Path, method: str, mode: str) -> InfluenceScores:
    path = _require(out / _scores_name(method, mode), "influence")
    _, columns, rows = read_csv_artifact(path)
    if columns != ["id", "score"]:
        raise IngestionError(f"{path}: expected columns id,score, got {columns}")
    scores = {int(r["id"]): float(r["score"]) for r in rows}
    meta_path = path.with_suffix(".meta.json")
    metadata = read_json_artifact(meta_path).get("metadata", {}) if meta_path.exists() else {}
    return InfluenceScores(method, mode, scores, metadata)


def _write_forget_spec(path: Path, spec: ForgetSpec, prov: dict) -> None:
    doc = {
        "forget_ids": sorted(int(i) for i in spec.forget_ids),
        "retain_ids": sorted(int(i) for i in spec.retain_ids),
    }
    write_json_artifact(path, doc, prov)


def _read_forget_spec(path: Path) -> ForgetSpec:
    doc = read_json_artifact(_require(path, "filter"))
    return ForgetSpec(frozenset(doc["forget_ids"]), frozenset(doc["retain_ids"]))


# ---------------------------------------------------------------------------
# verbs

def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    train_data, test_data = build_datasets(cfg)
    write_csv(train_data, out / "dataset_train.csv")
    write_csv(test_data, out / "dataset_test.csv")
    arch = arch_spec(cfg, train_data)
    result = train(train_data, arch, cfg.model.l2_lambda, train_config(cfg))
    save_params(result.params, out / CHECKPOINT_FILE, prov)
    _write_checkpoints(out / CHECKPOINTS_FILE, result, arch, cfg.model.l2_lambda, prov)
    for kind, name in TRACE_FILES.items():
        _write_trace(out / name, result.traces[kind], prov)
    status = "converged" if result.converged else "not converged"
    print(
        f"train: accuracy train={accuracy(result.params, train_data):.4f} "
        f"test={accuracy(result.params, test_data):.4f} "
        f"({result.epochs_run} epochs, {status}, "
        f"checksum {weights_checksum(result.params)[:12]})"
    )
    return 0


def _compute_scores(cfg: ExperimentConfig, method: str, mode: str,
                    train_data: Dataset, test_data: Dataset, out: Path) -> InfluenceScores:
    probe = test_subset(cfg, test_data) if mode == "test" else None
    if method == "exact_loo":
        loo_cfg = replace(
            train_config(cfg), seed=derive_seed(cfg.master_seed, "loo"), track_loss=False
        )
        return exact_loo_scores(
            train_data, arch_spec(cfg, train_data), cfg.model.l2_lambda, loo_cfg,
            mode=mode, probe=probe, repeats=cfg.influence.loo_repeats,
            value_kind=cfg.influence.loo_value_kind,
        )
    if method == "hessian":
        params = load_params(_require(out / CHECKPOINT_FILE, "train"))
        return hessian_influence(
            train_data, probe, params, mode=mode, damping=cfg.influence.damping
        )
    if method == "less":
        checkpoints, moment = _read_checkpoints(_require(out / CHECKPOINTS_FILE, "train"))
        return less_influence(
            train_data, probe, checkpoints, mode=mode,
            projection_dim=cfg.influence.projection_dim,
            seed=derive_seed(cfg.master_seed, "less.projection"),
            projection_kind=cfg.influence.projection_kind,
            adam_second_moment=moment,
        )
    if method == "lowest_gradients":
        if mode != "self":
            raise ParameterError("lowest_gradients only has a self mode")
        trace = _read_trace(_require(out / TRACE_FILES["l2"], "train"))
        start = min(cfg.influence.from_checkpoint, trace.n_checkpoints - 1)
        return lowest_gradient_scores(trace, from_checkpoint=start)
    raise ConfigError(f"unknown influence method {method!r}")


def cmd_influence(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    train_data, test_data = build_datasets(cfg)
    methods = [args.method] if args.method else list(cfg.influence.methods)
    modes = [args.mode] if args.mode else list(cfg.influence.modes)
    want_agreement = "all" in methods
    if want_agreement:
        methods = [m for m in SCORE_METHODS if m != "exact_loo"]
    agreement_rows = []
    for mode in modes:
        computed: dict[str, InfluenceScores] = {}
        for method in methods:
            if method == "lowest_gradients" and mode == "test" and want_agreement:
                continue
            scores = _compute_scores(cfg, method, mode, train_data, test_data, out)
            path = _write_scores(out, scores, prov)
            computed[method] = scores
            print(f"influence: wrote {path.name} ({scores.n_points} points)")
        if want_agreement:
            rand = random_scores(
                train_data.ids, derive_seed(cfg.master_seed, f"random_scores.{mode}")
            )
            computed["random"] = rand
            _write_scores(out, rand, prov)
            for e in agreement_matrix(computed, cfg.influence.agreement_fraction):
                agreement_rows.append([mode, e.label_a, e.label_b, e.jaccard, e.spearman])
    if want_agreement:
        write_csv_artifact(
            out / AGREEMENT_FILE, ["mode", "method_a", "method_b", "jaccard", "spearman"],
            agreement_rows,
            {**prov, "x": f"{cfg.influence.agreement_fraction:g}"},
        )
        print(f"influence: wrote {AGREEMENT_FILE} ({len(agreement_rows)} pairs)")
    return 0


def cmd_filter(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    train_data, _ = build_datasets(cfg)
    spec = forget_spec(cfg, train_data)
    _write_forget_spec(out / FORGET_SPEC_FILE, spec, prov)
    scores = _read_scores(out, cfg.filter.method, cfg.filter.mode)
    classes = sorted(class_distribution(train_data.ids, train_data))
    summary_rows = []
    for x in cfg.filter.x_grid:
        selection = make_selection(scores, x)
        s_hi, r_hi = reduce_sets(spec, selection.selected_ids)
        write_id_list(
            out / _selection_name(cfg.filter.method, cfg.filter.mode, x),
            selection.selected_ids, {**prov, "x": f"{x:g}"},
        )
        dist = class_distribution(selection.selected_ids, train_data)
        summary_rows.append(
            [x, len(selection.selected_ids), len(s_hi), len(r_hi)]
            + [dist[c] for c in classes]
        )
    if cfg.filter.baseline_kind == "random":
        rand = random_scores(train_data.ids, derive_seed(cfg.master_seed, "filter.random"))
        for x in cfg.filter.x_grid:
            write_id_list(
                out / f"baseline_random_x{x:g}.txt",
                make_selection(rand, x).selected_ids, {**prov, "x": f"{x:g}"},
            )
    elif cfg.filter.baseline_kind == "cosine":
        ids = cosine_filter(
            train_data, spec, cfg.filter.cosine_c, cfg.filter.cosine_k,
            cfg.filter.cosine_sample_n, derive_seed(cfg.master_seed, "filter.cosine"),
        )
        write_id_list(out / "baseline_cosine.txt", ids,
                      {**prov, "c": f"{cfg.filter.cosine_c:g}"})
    write_csv_artifact(
        out / FILTER_SUMMARY_FILE,
        ["x", "n_selected", "n_forget_kept", "n_retain_kept"]
        + [f"class_{c}" for c in classes],
        summary_rows, prov,
    )
    print(
        f"filter: {len(cfg.filter.x_grid)} selections "
        f"({cfg.filter.method}/{cfg.filter.mode}, forget={len(spec.forget_ids)}, "
        f"retain={len(spec.retain_ids)})"
    )
    return 0


def _report_row(report: UnlearnReport, run_id: str, repeat: int) -> list:
    acc = report.accuracies
    return [
        run_id, report.method, report.mode, report.algorithm["kind"],
        report.x, repeat,
        report.set_sizes["forget_full"], report.set_sizes["forget_kept"],
        report.set_sizes["retain_kept"], report.set_sizes["removed_li"],
        acc["forget_full"], acc["forget_kept"], acc["removed_li"],
        acc["retain_full"], acc["test"],
        report.mia.attack_accuracy, report.mia.ci95, report.mia.n_folds,
    ]


def _write_report_tables(out: Path, reports: list[tuple[str, int, UnlearnReport]],
                         prov: dict) -> None:
    reports = sorted(reports, key=lambda t: t[0])
    rows = [_report_row(rep, run_id, repeat) for run_id, repeat, rep in reports]
    write_csv_artifact(out / REPORTS_FILE, REPORT_COLUMNS, rows, prov)
    timing_rows = [[run_id, rep.wall_clock_seconds] for run_id, _, rep in reports]
    write_csv_artifact(
        out / TIMINGS_FILE, ["run_id", "wall_clock_seconds"], timing_rows, prov
    )


def cmd_unlearn(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    train_data, test_data = build_datasets(cfg)
    spec_path = out / FORGET_SPEC_FILE
    if spec_path.exists():
        spec = _read_forget_spec(spec_path)
    else:
        spec = forget_spec(cfg, train_data)
        _write_forget_spec(spec_path, spec, prov)
    model = load_params(_require(out / CHECKPOINT_FILE, "train"))
    scores = _read_scores(out, cfg.filter.method, cfg.filter.mode)
    runs_dir = out / RUNS_DIR
    runs_dir.mkdir(exist_ok=True)
    reports = []
    for alg_doc in cfg.unlearn.algorithms:
        kind = alg_doc["kind"]
        for x in cfg.filter.x_grid:
            for r in range(cfg.unlearn.repeats):
                stamp = f"{kind}.x{x:g}.r{r}"
                alg = UnlearnAlgorithm.from_dict(
                    {**alg_doc, "seed": derive_seed(cfg.master_seed, f"unlearn.alg.{stamp}")}
                )
                run_cfg = replace(
                    train_config(cfg),
                    seed=derive_seed(cfg.master_seed, f"unlearn.train.{stamp}"),
                )
                run, _ = filtered_unlearn(
                    model, train_data, spec, scores, x, alg, run_cfg
                )
                report = build_report(
                    run, train_data, test_data, spec,
                    cfg.filter.method, cfg.filter.mode,
                    mia_folds=cfg.eval.mia_folds,
                    mia_seed=derive_seed(cfg.master_seed, f"mia.{stamp}"),
                )
                run_id = f"{kind}_x{x:g}_r{r}"
                report.metadata.update({"run_id": run_id, "repeat": r, **prov})
                report.save(runs_dir / f"run_{run_id}.json")
                reports.append((run_id, r, report))
    _write_report_tables(out, reports, prov)
    print(f"unlearn: {len(reports)} runs -> {REPORTS_FILE} + {TIMINGS_FILE}")
    return 0


def cmd_curve(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    train_data, test_data = build_datasets(cfg)
    arch = arch_spec(cfg, train_data)
    tcfg = replace(train_config(cfg), track_loss=False)
    methods = [m for m in cfg.influence.methods if m != "all"]
    for mode in cfg.influence.modes:
        for method in methods:
            if method == "lowest_gradients" and mode == "test":
                continue
            scores = _read_scores(out, method, mode)
            points = removal_curve(
                train_data, test_data, scores, cfg.curve.removal_sizes,
                arch, cfg.model.l2_lambda, tcfg,
                baseline_seed=derive_seed(cfg.master_seed, "curve.random"),
            )
            rows = [
                [method, p.n_removed, p.acc_removed, p.acc_test, p.acc_removed_random]
                for p in points
            ]
            path = out / f"curve_{method}_{mode}.csv"
            write_csv_artifact(path, CURVE_COLUMNS, rows, prov)
            print(f"curve: wrote {path.name} ({len(rows)} sizes)")
    trace = _read_trace(_require(out / TRACE_FILES["l2"], "train"))
    curve = low_gradient_count_curve(trace, cfg.curve.count_percentile)
    write_csv_artifact(
        out / COUNTS_FILE, ["epoch", "count"],
        [[e, c] for e, c in zip(curve.epochs, curve.counts)],
        {
            **prov, "threshold": repr(curve.threshold),
            "percentile": f"{curve.percentile:g}", "norm_kind": curve.norm_kind,
        },
    )
    print(f"curve: wrote {COUNTS_FILE} ({len(curve.epochs)} checkpoints)")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    prov = provenance(cfg)
    runs_dir = out / RUNS_DIR
    _require(runs_dir, "unlearn")
    paths = sorted(runs_dir.glob("run_*.json"))
    if not paths:
        raise PrerequisiteError(f"no run files under {runs_dir}: run the 'unlearn' verb first")
    reports = []
    for path in paths:
        rep = UnlearnReport.load(path)
        run_id = rep.metadata.get("run_id", path.stem.removeprefix("run_"))
        reports.append((run_id, int(rep.metadata.get("repeat", 0)), rep))
    _write_report_tables(out, reports, prov)

    groups: dict[tuple[str, float], list[UnlearnReport]] = {}
    for _, _, rep in reports:
        groups.setdefault((rep.algorithm["kind"], rep.x), []).append(rep)
    print(f"report: {len(reports)} runs -> {REPORTS_FILE}")
    header = f"{'algorithm':<18} {'x':>5} {'runs':>4} {'acc_test':>9} {'acc_forget':>10} {'mia':>6} {'seconds':>8}"
    print(header)
    print("-" * len(header))
    for (kind, x), group in sorted(groups.items()):
        acc_t = float(np.mean([g.accuracies["test"] for g in group]))
        acc_f = float(np.mean([g.accuracies["forget_full"] for g in group]))
        mia = float(np.mean([g.mia.attack_accuracy for g in group]))
        secs = float(np.mean([g.wall_clock_seconds for g in group]))
        print(f"{kind:<18} {x:>5g} {len(group):>4} {acc_t:>9.4f} {acc_f:>10.4f} {mia:>6.3f} {secs:>8.3f}")
    return 0


# ---------------------------------------------------------------------------

_VERBS = {
    "train": cmd_train,
    "influence": cmd_influence,
    "filter": cmd_filter,
    "unlearn": cmd_unlearn,
    "curve": cmd_curve,
    "report": cmd_report,
}

_VERB_HELP = {
    "train": "fit the model, write checkpoint and gradient traces",
    "influence": "score training points with the configured methods",
    "filter": "select low-influence points and reduce the forget/retain sets",
    "unlearn": "run the unlearning sweep over algorithms, x-grid, and repeats",
    "curve": "emit removal-curve and low-gradient-count CSVs",
    "report": "aggregate run files into reports.csv and print a summary",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearnkit",
        description="Influence scoring and filtered unlearning experiments.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _VERBS:
        p = sub.add_parser(verb, help=_VERB_HELP[verb])
        p.add_argument("--config", required=True, help="path to the YAML experiment config")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a config field by dotted path (repeatable)",
        )
        p.add_argument("--out", default=None, help="override the configured output directory")
        if verb == "influence":
            p.add_argument(
                "--method", default=None, choices=SCORE_METHODS + ("all",),
                help="score with a single method instead of the configured list",
            )
            p.add_argument(
                "--mode", default=None, choices=("test", "self"),
                help="score in a single mode instead of the configured list",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.out)
        return _VERBS[args.verb](cfg, args)
    except (ConfigError, ParameterError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SolverError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except UnlearnKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
