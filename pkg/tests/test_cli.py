"""End-to-end checks of the experiment verbs, run in-process."""

import filecmp
import shutil
from pathlib import Path

import numpy as np
import pytest

from unlearnkit import cli, config_checksum, derive_seed, load_config
from unlearnkit.artifacts import read_csv_artifact
from unlearnkit.errors import ConfigError

CONFIG_YAML = """\
master_seed: 5
data:
  kind: blobs
  n_per_class: 30
  n_classes: 2
  dim: 3
  class_separation: 3.0
  n_test_per_class: 20
model:
  arch: logistic_regression
  l2_lambda: 0.05
train:
  optimizer: gd
  learning_rate: 0.5
  epochs: 1200
influence:
  methods: [hessian, less, lowest_gradients]
  modes: [self]
  projection_dim: 64
forget:
  fraction: 0.3
filter:
  x_grid: [0, 0.5]
  method: hessian
  mode: self
unlearn:
  algorithms:
    - kind: retrain_full
    - kind: finetune_retain
      epochs: 5
      learning_rate: 0.1
  repeats: 2
eval:
  mia_folds: 4
curve:
  removal_sizes: [0, 4]
"""


def _write_config(tmp: Path) -> Path:
    path = tmp / "config.yaml"
    path.write_text(CONFIG_YAML)
    return path


def _run(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full verb sequence in a shared directory."""
    tmp = tmp_path_factory.mktemp("pipeline")
    config = _write_config(tmp)
    out = tmp / "artifacts"
    for verb in ("train", "influence", "filter", "unlearn", "curve", "report"):
        rc = _run(verb, "--config", str(config), "--out", str(out))
        assert rc == 0, f"{verb} failed"
    rc = _run("influence", "--config", str(config), "--out", str(out),
              "--method", "all")
    assert rc == 0
    return {"config": config, "out": out}


class TestSeedDerivation:
    def test_deterministic_and_tag_sensitive(self):
        assert derive_seed(5, "train") == derive_seed(5, "train")
        assert derive_seed(5, "train") != derive_seed(5, "loo")
        assert derive_seed(5, "train") != derive_seed(6, "train")

    def test_range(self):
        for tag in ("train", "data.train", "mia.retrain_full.x0.r0"):
            s = derive_seed(123, tag)
            assert 0 <= s < 2 ** 32


class TestConfigHandling:
    def test_defaults_fill_in(self, tmp_path):
        cfg = load_config(_write_config(tmp_path), [], str(tmp_path / "o"))
        assert cfg.eval.mia_folds == 4
        assert cfg.train.batch_size == 32
        assert cfg.influence.loo_repeats == 5

    def test_unknown_field_named(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(CONFIG_YAML + "\nextra:\n  whatever: 1\n")
        with pytest.raises(ConfigError, match="extra"):
            load_config(path, [], str(tmp_path / "o"))
        path.write_text(CONFIG_YAML.replace("n_per_class", "n_per_klass"))
        with pytest.raises(ConfigError, match="data.n_per_klass"):
            load_config(path, [], str(tmp_path / "o"))

    def test_missing_master_seed_named(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(CONFIG_YAML.replace("master_seed: 5\n", ""))
        with pytest.raises(ConfigError, match="master_seed"):
            load_config(path, [], str(tmp_path / "o"))

    def test_set_override(self, tmp_path):
        cfg = load_config(
            _write_config(tmp_path), ["train.epochs=7", "model.l2_lambda=0.2"],
            str(tmp_path / "o"),
        )
        assert cfg.train.epochs == 7
        assert cfg.model.l2_lambda == 0.2

    def test_checksum_ignores_output_dir(self, tmp_path):
        config = _write_config(tmp_path)
        a = load_config(config, [], str(tmp_path / "o1"))
        b = load_config(config, [], str(tmp_path / "o2"))
        c = load_config(config, ["train.epochs=9"], str(tmp_path / "o1"))
        assert config_checksum(a) == config_checksum(b)
        assert config_checksum(a) != config_checksum(c)


class TestArtifacts:
    EXPECTED = [
        "dataset_train.csv", "dataset_test.csv",
        "checkpoint.json", "checkpoints.json",
        "trace_l2.csv", "trace_linf.csv",
        "scores_hessian_self.csv", "scores_less_self.csv",
        "scores_lowest_gradients_self.csv", "scores_random_self.csv",
        "forget_spec.json", "filter_summary.csv",
        "selection_hessian_self_x0.txt", "selection_hessian_self_x0.5.txt",
        "reports.csv", "reports_timings.csv",
        "curve_hessian_self.csv", "curve_less_self.csv",
        "curve_lowest_gradients_self.csv",
        "low_gradient_counts.csv", "agreement.csv",
    ]

    def test_expected_files_exist(self, pipeline):
        for name in self.EXPECTED:
            assert (pipeline["out"] / name).exists(), name
        runs = sorted((pipeline["out"] / "runs").glob("run_*.json"))
        assert len(runs) == 8

    def test_scores_cover_every_training_point(self, pipeline):
        _, columns, rows = read_csv_artifact(pipeline["out"] / "scores_hessian_self.csv")
        assert columns == ["id", "score"]
        assert len(rows) == 60
        assert sorted(int(r["id"]) for r in rows) == list(range(60))

    def test_report_table_shape(self, pipeline):
        _, columns, rows = read_csv_artifact(pipeline["out"] / "reports.csv")
        assert columns == cli.REPORT_COLUMNS
        assert len(rows) == 8
        by_x = {r["x"] for r in rows}
        assert by_x == {"0", "0.5"}
        for row in rows:
            if row["x"] == "0":
                assert row["n_removed"] == "0"
                assert row["n_forget_kept"] == row["n_forget_full"]

    def test_reports_round_trip_run_files(self, pipeline):
        """Numbers in reports.csv are the exact reprs of the run JSONs."""
        from unlearnkit import UnlearnReport

        _, _, rows = read_csv_artifact(pipeline["out"] / "reports.csv")
        for row in rows:
            rep = UnlearnReport.load(
                pipeline["out"] / "runs" / f"run_{row['run_id']}.json"
            )
            assert float(row["acc_test"]) == rep.accuracies["test"]
            assert float(row["mia_accuracy"]) == rep.mia.attack_accuracy

    def test_curve_columns(self, pipeline):
        _, columns, rows = read_csv_artifact(pipeline["out"] / "curve_hessian_self.csv")
        assert columns == cli.CURVE_COLUMNS
        assert [r["n_removed"] for r in rows] == ["0", "4"]
        assert rows[0]["acc_removed"] == ""

    def test_agreement_diagonal(self, pipeline):
        _, columns, rows = read_csv_artifact(pipeline["out"] / "agreement.csv")
        assert columns == ["mode", "method_a", "method_b", "jaccard", "spearman"]
        methods = {r["method_a"] for r in rows}
        assert methods == {"hessian", "less", "lowest_gradients", "random"}
        for r in rows:
            if r["method_a"] == r["method_b"]:
                assert float(r["jaccard"]) == 1.0
                assert float(r["spearman"]) == 1.0

    def test_provenance_header(self, pipeline):
        prov, _, _ = read_csv_artifact(pipeline["out"] / "scores_hessian_self.csv")
        assert prov["master_seed"] == "5"
        assert len(prov["config_checksum"]) == 16

    def test_filter_summary_counts(self, pipeline):
        _, columns, rows = read_csv_artifact(pipeline["out"] / "filter_summary.csv")
        assert columns[:4] == ["x", "n_selected", "n_forget_kept", "n_retain_kept"]
        assert columns[4:] == ["class_0", "class_1"]
        x0 = rows[0]
        assert (x0["x"], x0["n_selected"]) == ("0", "0")
        # 30% of 60 points forgotten, nothing filtered at x = 0
        assert x0["n_forget_kept"] == "18"
        assert x0["n_retain_kept"] == "42"
        x5 = rows[1]
        assert x5["n_selected"] == "30"
        assert int(x5["class_0"]) + int(x5["class_1"]) == 30

    def test_train_prints_summary(self, tmp_path, capsys):
        config = _write_config(tmp_path)
        rc = _run("train", "--config", str(config), "--out", str(tmp_path / "o"))
        assert rc == 0
        printed = capsys.readouterr().out
        assert "train: accuracy train=" in printed
        assert "converged" in printed


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert _run("train", "--config", str(tmp_path / "nope.yaml"),
                    "--out", str(tmp_path / "o")) == 2

    def test_bad_config_value(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run("train", "--config", str(config), "--out", str(tmp_path / "o"),
                    "--set", "model.arch=transformer") == 2

    def test_unknown_override_key(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run("train", "--config", str(config), "--out", str(tmp_path / "o"),
                    "--set", "train.warmup=5") == 2

    def test_influence_before_train(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run("influence", "--config", str(config),
                    "--out", str(tmp_path / "o")) == 3

    def test_curve_before_train(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run("curve", "--config", str(config),
                    "--out", str(tmp_path / "o")) == 3

    def test_report_before_unlearn(self, tmp_path):
        config = _write_config(tmp_path)
        assert _run("report", "--config", str(config),
                    "--out", str(tmp_path / "o")) == 3

    def test_divergent_training(self, tmp_path):
        config = _write_config(tmp_path)
        with np.errstate(all="ignore"):
            rc = _run("train", "--config", str(config), "--out", str(tmp_path / "o"),
                      "--set", "train.learning_rate=4000.0")
        assert rc == 4

    def test_lowest_gradients_test_mode(self, tmp_path):
        config = _write_config(tmp_path)
        out = tmp_path / "o"
        assert _run("train", "--config", str(config), "--out", str(out)) == 0
        assert _run("influence", "--config", str(config), "--out", str(out),
                    "--method", "lowest_gradients", "--mode", "test") == 2


class TestDeterminism:
    COMPARE = [
        "dataset_train.csv", "checkpoint.json", "trace_l2.csv",
        "scores_hessian_self.csv", "scores_less_self.csv",
    ]

    def test_reruns_are_byte_identical(self, tmp_path):
        """Same config, different output directories: every result artifact
        must match byte for byte."""
        config = _write_config(tmp_path)
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            for verb in ("train", "influence"):
                assert _run(verb, "--config", str(config), "--out", str(out)) == 0
        for name in self.COMPARE:
            assert filecmp.cmp(outs[0] / name, outs[1] / name, shallow=False), name
