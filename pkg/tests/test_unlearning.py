"""Unlearning algorithms and the filtered pipeline around them."""

import numpy as np
import pytest

from unlearnkit import (
    ArchSpec,
    ForgetSpec,
    InfluenceScores,
    ParameterError,
    TrainConfig,
    UnlearnAlgorithm,
    filtered_unlearn,
    generate_gaussian_blobs,
    make_forget_spec,
    train,
    unlearn,
)
from unlearnkit.models import mean_loss

ARCH = ArchSpec("logistic_regression", 3, 2)
CONFIG = TrainConfig(optimizer="gd", learning_rate=0.5, epochs=3000, seed=6)

ALGS = {
    "retrain_full": UnlearnAlgorithm("retrain_full"),
    "finetune_retain": UnlearnAlgorithm("finetune_retain", epochs=10, learning_rate=0.2, seed=1),
    "noise_finetune": UnlearnAlgorithm(
        "noise_finetune", epochs=10, learning_rate=0.2, noise_sigma=0.5, seed=1
    ),
}


@pytest.fixture(scope="module")
def setup():
    data = generate_gaussian_blobs(20, 2, 3, 3.0, seed=70)
    result = train(data, ARCH, 0.05, CONFIG)
    assert result.converged
    spec = make_forget_spec(data, 0.25, seed=71)
    scores = InfluenceScores(
        "hessian", "self",
        {int(i): float(v) for i, v in zip(data.ids, np.random.default_rng(72).uniform(size=40))},
    )
    return {"data": data, "model": result.params, "spec": spec, "scores": scores}


class TestUnlearn:
    @pytest.mark.parametrize("kind", list(ALGS))
    def test_deterministic(self, setup, kind):
        a = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                    setup["spec"].retain_ids, ALGS[kind], CONFIG)
        b = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                    setup["spec"].retain_ids, ALGS[kind], CONFIG)
        np.testing.assert_array_equal(a.model.weights, b.model.weights)

    def test_retrain_full_empty_forget_reproduces_training(self, setup):
        """With nothing to forget, retraining lands exactly on the original
        weights thanks to the shared seeded initialization."""
        run = unlearn(setup["model"], setup["data"], frozenset(),
                      setup["data"].ids, ALGS["retrain_full"], CONFIG)
        np.testing.assert_array_equal(run.model.weights, setup["model"].weights)

    def test_retrain_full_drops_only_forget_points(self, setup):
        run = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                      setup["spec"].retain_ids, ALGS["retrain_full"], CONFIG)
        reduced = setup["data"].without(setup["spec"].forget_ids)
        expected = train(reduced, ARCH, 0.05, CONFIG).params
        np.testing.assert_array_equal(run.model.weights, expected.weights)

    def test_tiny_finetune_steps_stay_put(self, setup):
        """With a vanishing learning rate and no noise, finetuning is a
        no-op up to rounding."""
        alg = UnlearnAlgorithm("finetune_retain", epochs=1, learning_rate=1e-12)
        run = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                      setup["spec"].retain_ids, alg, CONFIG)
        np.testing.assert_allclose(run.model.weights, setup["model"].weights, atol=1e-10)

    def test_finetune_reduces_retain_loss_after_noise(self, setup):
        """Finetuning has to claw back the loss the noise injection cost."""
        noisy_only = UnlearnAlgorithm(
            "noise_finetune", epochs=1, learning_rate=1e-12, noise_sigma=1.0, seed=9
        )
        full = UnlearnAlgorithm(
            "noise_finetune", epochs=40, learning_rate=0.3, noise_sigma=1.0, seed=9
        )
        retain = setup["data"].subset(setup["spec"].retain_ids)
        run_noise = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                            setup["spec"].retain_ids, noisy_only, CONFIG)
        run_full = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                           setup["spec"].retain_ids, full, CONFIG)
        loss_noise = mean_loss(run_noise.model, retain.features, retain.labels)
        loss_full = mean_loss(run_full.model, retain.features, retain.labels)
        assert loss_full < loss_noise

    def test_reinit_last_layer_replaces_weights(self, setup):
        alg = UnlearnAlgorithm(
            "noise_finetune", epochs=1, learning_rate=1e-12,
            reinit_last_layer=True, seed=4,
        )
        run = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                      setup["spec"].retain_ids, alg, CONFIG)
        # logistic regression has only the one layer, so everything moves
        assert not np.allclose(run.model.weights, setup["model"].weights, atol=1e-3)
        assert np.abs(run.model.weights).max() < 0.1

    def test_reinit_last_layer_mlp_keeps_first_layer(self):
        arch = ArchSpec("mlp", 3, 2, hidden=4)
        data = generate_gaussian_blobs(15, 2, 3, 3.0, seed=73)
        config = TrainConfig(optimizer="gd", learning_rate=0.3, epochs=300, seed=0)
        model = train(data, arch, 0.05, config).params
        spec = make_forget_spec(data, 0.2, seed=74)
        alg = UnlearnAlgorithm(
            "noise_finetune", epochs=1, learning_rate=1e-12,
            reinit_last_layer=True, seed=4,
        )
        run = unlearn(model, data, spec.forget_ids, spec.retain_ids, alg, config)
        cut = (arch.n_features + 1) * arch.hidden
        np.testing.assert_allclose(run.model.weights[:cut], model.weights[:cut], atol=1e-10)
        assert not np.allclose(run.model.weights[cut:], model.weights[cut:], atol=1e-3)

    def test_wall_clock_recorded(self, setup):
        run = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                      setup["spec"].retain_ids, ALGS["finetune_retain"], CONFIG)
        assert run.wall_clock_seconds >= 0.0

    def test_validation(self, setup):
        ids = setup["data"].ids
        with pytest.raises(ParameterError, match="overlap"):
            unlearn(setup["model"], setup["data"], {int(ids[0])}, {int(ids[0])},
                    ALGS["retrain_full"], CONFIG)
        with pytest.raises(ParameterError, match="training set"):
            unlearn(setup["model"], setup["data"], {9999}, set(),
                    ALGS["retrain_full"], CONFIG)
        with pytest.raises(ParameterError, match="retain"):
            unlearn(setup["model"], setup["data"], setup["spec"].forget_ids, set(),
                    ALGS["finetune_retain"], CONFIG)
        with pytest.raises(ParameterError, match="nothing to train"):
            unlearn(setup["model"], setup["data"], set(int(i) for i in ids), set(),
                    ALGS["retrain_full"], CONFIG)


class TestAlgorithmDescriptor:
    def test_round_trip(self):
        alg = UnlearnAlgorithm("noise_finetune", epochs=7, learning_rate=0.05,
                               batch_size=8, noise_sigma=0.3,
                               reinit_last_layer=True, seed=11)
        assert UnlearnAlgorithm.from_dict(alg.to_dict()) == alg

    @pytest.mark.parametrize(
        "kwargs, fragment",
        [
            ({"kind": "scrub"}, "unknown algorithm"),
            ({"kind": "finetune_retain", "epochs": 0}, "epochs"),
            ({"kind": "finetune_retain", "learning_rate": 0.0}, "learning_rate"),
            ({"kind": "finetune_retain", "batch_size": 0}, "batch_size"),
            ({"kind": "noise_finetune", "noise_sigma": -0.1}, "noise_sigma"),
        ],
    )
    def test_validation(self, kwargs, fragment):
        with pytest.raises(ParameterError, match=fragment):
            UnlearnAlgorithm(**kwargs)


class TestFilteredUnlearn:
    @pytest.mark.parametrize("kind", list(ALGS))
    def test_x_zero_matches_unfiltered(self, setup, kind):
        """x = 0 filters nothing, so the filtered path must reproduce the
        plain one bit for bit."""
        run, selection = filtered_unlearn(
            setup["model"], setup["data"], setup["spec"], setup["scores"],
            0.0, ALGS[kind], CONFIG,
        )
        plain = unlearn(setup["model"], setup["data"], setup["spec"].forget_ids,
                        setup["spec"].retain_ids, ALGS[kind], CONFIG)
        np.testing.assert_array_equal(run.model.weights, plain.model.weights)
        assert selection.selected_ids == frozenset()
        assert run.removed_ids == frozenset()
        assert run.x == 0.0

    def test_x_one_empties_retain_for_finetuning(self, setup):
        with pytest.raises(ParameterError, match="retain"):
            filtered_unlearn(
                setup["model"], setup["data"], setup["spec"], setup["scores"],
                1.0, ALGS["finetune_retain"], CONFIG,
            )

    def test_x_one_retrain_keeps_everything(self, setup):
        """At x = 1 every forget point is filtered out of S_HI, so the
        retraining sees the full training set and reproduces the original
        model."""
        run, _ = filtered_unlearn(
            setup["model"], setup["data"], setup["spec"], setup["scores"],
            1.0, ALGS["retrain_full"], CONFIG,
        )
        np.testing.assert_array_equal(run.model.weights, setup["model"].weights)
        assert run.forget_ids == frozenset()

    def test_reduced_sets_follow_selection(self, setup):
        run, selection = filtered_unlearn(
            setup["model"], setup["data"], setup["spec"], setup["scores"],
            0.4, ALGS["retrain_full"], CONFIG,
        )
        assert run.forget_ids == setup["spec"].forget_ids - selection.selected_ids
        assert run.retain_ids == setup["spec"].retain_ids - selection.selected_ids
        assert run.removed_ids == selection.selected_ids

    def test_asymmetric_retain_fraction(self, setup):
        from unlearnkit.ranking import select_bottom

        run, selection = filtered_unlearn(
            setup["model"], setup["data"], setup["spec"], setup["scores"],
            0.2, ALGS["retrain_full"], CONFIG, x_retain=0.5,
        )
        retain_cut = select_bottom(setup["scores"], 0.5)
        assert run.retain_ids == setup["spec"].retain_ids - retain_cut
        assert run.forget_ids == setup["spec"].forget_ids - selection.selected_ids
        assert run.removed_ids == selection.selected_ids | retain_cut
        assert run.metadata["x_retain"] == 0.5

    def test_spec_must_partition_training_ids(self, setup):
        bad = ForgetSpec(frozenset({0}), frozenset({1}))
        with pytest.raises(ParameterError, match="partition"):
            filtered_unlearn(
                setup["model"], setup["data"], bad, setup["scores"],
                0.2, ALGS["retrain_full"], CONFIG,
            )
