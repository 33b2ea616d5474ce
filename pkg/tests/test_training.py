"""Tests for graf_qa.training – losses, optimizer, gradient check, training loop."""

from __future__ import annotations

import math

import numpy as np
import pytest
from graf_qa.claim_extraction import ClientExtractor, StubCompletionClient
from graf_qa.embedding import HashEncoder
from graf_qa.gat import init_gat_params
from graf_qa.retrieval import build_entity_index
from graf_qa.scorer import PROBABILITY_FLOOR, forward_choice, init_scorer_params
from graf_qa.settings import DEFAULT_SETTINGS, ConfigError
from graf_qa.synthetic import make_synthetic_fixture
from graf_qa.training import (
    AdamW,
    TrainConfig,
    bce_loss,
    bce_with_logit,
    cosine_embedding_loss,
    evaluate_accuracy,
    graf_objective,
    grad_check,
    prepare_items,
    train,
)


def _config(**overrides):
    values = {"learning_rate": 1e-2, "epochs": 1, "dim": 8, "heads": 1, "top_k": 2, "depth": 1, "max_entities": 6}
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class TestBceLoss:
    def test_half_probability(self):
        loss, grad = bce_loss(1, 0.5)
        assert loss == pytest.approx(math.log(2))
        assert grad == pytest.approx(-2.0)

    def test_negative_label(self):
        loss, grad = bce_loss(0, 0.25)
        assert loss == pytest.approx(-math.log(0.75))
        assert grad == pytest.approx(0.25 / (0.25 * 0.75))

    @pytest.mark.parametrize("o, y", [(2, 0.5), (1, 0.0), (0, 1.0)])
    def test_invalid(self, o, y):
        with pytest.raises(ValueError):
            bce_loss(o, y)


class TestBceWithLogit:
    @pytest.mark.parametrize("o, z", [(1, 0.0), (0, 0.0), (1, -1.5), (0, 2.0)])
    def test_matches_probability_form(self, o, z):
        y = 1.0 / (1.0 + math.exp(-z))
        loss, grad = bce_with_logit(o, z)
        expected_loss, d_y = bce_loss(o, y)
        assert loss == pytest.approx(expected_loss)
        assert grad == pytest.approx(d_y * y * (1 - y))

    def test_saturated_logit_keeps_gradient(self):
        loss, grad = bce_with_logit(0, 50.0)
        assert loss == pytest.approx(50.0)
        assert grad == pytest.approx(1.0)

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            bce_with_logit(2, 0.0)


class TestCosineLoss:
    @pytest.mark.parametrize(
        "o, y, expected",
        [(1, 1.0, 0.0), (-1, 0.0, 0.0), (1, 0.0, 2.0), (-1, 1.0, 2.0), (-1, -0.5, -1.0)],
    )
    def test_values(self, o, y, expected):
        loss, _ = cosine_embedding_loss(o, y)
        assert loss == pytest.approx(expected)

    def test_gradients(self):
        assert cosine_embedding_loss(1, 0.3)[1] == -2.0
        assert cosine_embedding_loss(-1, 0.3)[1] == 2.0

    @pytest.mark.parametrize("o, y", [(0, 0.5), (1, 1.5)])
    def test_invalid(self, o, y):
        with pytest.raises(ValueError):
            cosine_embedding_loss(o, y)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert config.learning_rate == 1e-7
        assert config.epochs == 50
        assert config.loss_kind == "bce"
        assert config.update_every == "question"
        assert (config.node_gain, config.edge_gain, config.attention_gain, config.value_gain) == (2.0, 0.5, 6.0, 1.0)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"learning_rate": 0},
            {"epochs": 0},
            {"loss_kind": "mse"},
            {"leaky_slope": 1.0},
            {"top_k": 20, "max_entities": 10},
            {"stop_accuracy": 1.5},
            {"update_every": "batch"},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)

    def test_from_settings(self):
        config = TrainConfig.from_settings(DEFAULT_SETTINGS, epochs=3, seed=None)
        assert config.epochs == 3
        assert config.seed == DEFAULT_SETTINGS["seed"]
        assert config.top_k == DEFAULT_SETTINGS["topK"]
        assert config.attention_gain == DEFAULT_SETTINGS["attentionGain"]
        assert config.update_every == DEFAULT_SETTINGS["updateEvery"]

    def test_sampling_options(self):
        options = _config(use_kg=False).sampling_options()
        assert options == {"top_k": 2, "depth": 1, "max_entities": 6, "use_claims": True, "use_kg": False}


# ---------------------------------------------------------------------------
# Optimizer / gradient check
# ---------------------------------------------------------------------------


class TestAdamW:
    def test_first_step_moves_by_learning_rate(self):
        param = np.array([1.0])
        AdamW({"p": param}, lr=0.1, weight_decay=0.0).step({"p": np.array([0.5])})
        assert param[0] == pytest.approx(0.9, abs=1e-6)

    def test_decoupled_weight_decay(self):
        param = np.array([1.0])
        AdamW({"p": param}, lr=0.1, weight_decay=0.1).step({"p": np.array([0.0])})
        assert param[0] == pytest.approx(0.99)

    def test_missing_gradient_skipped(self):
        param = np.array([1.0])
        optimizer = AdamW({"p": param}, lr=0.1)
        optimizer.step({})
        assert param[0] == 1.0
        assert optimizer.step_count == 1

    def test_negative_learning_rate(self):
        with pytest.raises(ValueError):
            AdamW({"p": np.zeros(1)}, lr=-1.0)

    def test_minimizes_quadratic(self):
        theta = np.array([3.0, -2.0])
        optimizer = AdamW({"theta": theta}, lr=0.1, weight_decay=0.0)
        for _ in range(500):
            optimizer.step({"theta": 2 * theta})
        assert np.all(np.abs(theta) < 0.05)


class TestGradCheck:
    def test_square(self):
        theta = np.array([3.0])

        def objective():
            return float(theta[0] ** 2), {"theta": 2 * theta}

        assert grad_check(objective, {"theta": theta}) < 1e-6
        assert theta[0] == 3.0

    def test_detects_wrong_gradient(self):
        theta = np.array([3.0])

        def objective():
            return float(theta[0] ** 2), {"theta": 3 * theta}

        assert grad_check(objective, {"theta": theta}) > 0.1

    def test_samples_coordinates(self):
        theta = np.arange(1.0, 11.0)

        def objective():
            return float(np.sum(theta ** 2)), {"theta": 2 * theta}

        assert grad_check(objective, {"theta": theta}, n_coords=3) < 1e-6

    def test_invalid_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda: (0.0, {}), {}, eps=0)


class TestObjective:
    def _negative_choice(self, synthetic_fixture, stub_extractor):
        ((_, prepared),) = prepare_items(
            synthetic_fixture.items[:1], synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), top_k=2, max_entities=4
        )
        return next(prep for prep in prepared if not prep.target)

    def test_saturated_probability_gradient_matches_loss(self, synthetic_fixture, stub_extractor):
        prep = self._negative_choice(synthetic_fixture, stub_extractor)
        gat = init_gat_params(8, heads=1, seed=0)
        scorer = init_scorer_params(8, seed=0)
        scorer.w_final *= 40.0 / forward_choice(prep, gat, scorer).logit

        loss, grads, forward = graf_objective(prep, gat, scorer)
        assert forward.probability == 1.0 - PROBABILITY_FLOOR
        assert loss == pytest.approx(40.0)
        np.testing.assert_allclose(grads["scorer.w_final"], forward.c_final, rtol=1e-9)

        def objective():
            value, gradients, _ = graf_objective(prep, gat, scorer)
            return value, gradients

        assert grad_check(objective, {"scorer.w_final": scorer.w_final}, n_coords=8) < 1e-6


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TestTrain:
    def test_one_epoch_one_item(self, synthetic_fixture, stub_extractor):
        result = train(synthetic_fixture.items[:1], synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), _config())
        assert len(result.log) == 1
        assert result.log[0].loss_evaluations == 3
        assert result.best_epoch == 1
        assert math.isfinite(result.log[0].mean_loss)

    def test_encoder_dim_mismatch(self, synthetic_fixture, stub_extractor):
        with pytest.raises(ConfigError):
            train(synthetic_fixture.items, synthetic_fixture.kg, stub_extractor, HashEncoder(dim=4), _config())

    def test_empty_dataset(self, synthetic_fixture, stub_extractor):
        with pytest.raises(ValueError):
            train([], synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), _config())

    def test_deterministic(self, synthetic_fixture, stub_extractor):
        runs = [
            train(synthetic_fixture.items, synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), _config(epochs=2))
            for _ in range(2)
        ]
        assert runs[0].log == runs[1].log
        np.testing.assert_array_equal(runs[0].scorer.w_final, runs[1].scorer.w_final)

    def test_best_epoch_is_earliest_maximum(self, synthetic_fixture, stub_extractor):
        result = train(
            synthetic_fixture.items[:4],
            synthetic_fixture.kg,
            stub_extractor,
            HashEncoder(dim=8),
            _config(epochs=3),
            validation=synthetic_fixture.items[4:],
        )
        accuracies = [entry.validation_accuracy for entry in result.log]
        assert result.best_accuracy == max(accuracies)
        assert result.best_epoch == accuracies.index(max(accuracies)) + 1

    def test_stop_accuracy(self, synthetic_fixture, stub_extractor):
        result = train(
            synthetic_fixture.items, synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), _config(epochs=5, stop_accuracy=0.0)
        )
        assert len(result.log) == 1

    def test_periodic_checkpoints(self, tmp_path, synthetic_fixture, stub_extractor):
        train(
            synthetic_fixture.items[:2],
            synthetic_fixture.kg,
            stub_extractor,
            HashEncoder(dim=8),
            _config(epochs=2, checkpoint_every=1),
            checkpoint_dir=tmp_path,
        )
        assert sorted(path.name for path in tmp_path.glob("*.npz")) == ["epoch_0001.npz", "epoch_0002.npz"]

    @pytest.mark.parametrize(
        "flags", [{"use_claims": False}, {"use_kg": False}, {"loss_kind": "cosine"}, {"update_every": "choice"}]
    )
    def test_variants_train(self, synthetic_fixture, stub_extractor, flags):
        result = train(
            synthetic_fixture.items[:2], synthetic_fixture.kg, stub_extractor, HashEncoder(dim=8), _config(**flags)
        )
        assert math.isfinite(result.log[0].mean_loss)

    @pytest.mark.slow
    def test_loss_decreases(self, synthetic_fixture, stub_extractor):
        result = train(
            synthetic_fixture.items,
            synthetic_fixture.kg,
            stub_extractor,
            HashEncoder(dim=16),
            _config(dim=16, heads=2, epochs=40, max_entities=12, top_k=3),
        )
        assert result.log[-1].mean_loss < result.log[0].mean_loss


# ---------------------------------------------------------------------------
# Learnability and ablations on the synthetic fixture
# ---------------------------------------------------------------------------

# Each synthetic question quotes a single triplet, so two seeds cover it.
LEARNABILITY = {
    "learning_rate": 1e-2,
    "epochs": 500,
    "dim": 32,
    "seed": 0,
    "top_k": 2,
    "depth": 1,
    "max_entities": 4,
    "stop_accuracy": 1.0,
}


def _fit_and_hold_out(**flags):
    fixture = make_synthetic_fixture(30, seed=0)
    kg = fixture.kg
    index = build_entity_index(kg)
    extractor = ClientExtractor(StubCompletionClient())
    encoder = HashEncoder(dim=32)
    config = TrainConfig(**{**LEARNABILITY, **flags})

    result = train(fixture.items[:20], kg, extractor, encoder, config, index=index)
    train_items = prepare_items(fixture.items[:20], kg, extractor, encoder, index=index, **config.sampling_options())
    held_out = prepare_items(fixture.items[20:], kg, extractor, encoder, index=index, **config.sampling_options())
    return (
        result,
        evaluate_accuracy(train_items, result.gat, result.scorer),
        evaluate_accuracy(held_out, result.gat, result.scorer),
    )


@pytest.fixture(scope="module")
def full_pipeline_fit():
    return _fit_and_hold_out()


@pytest.mark.slow
class TestLearnability:
    def test_fits_training_questions(self, full_pipeline_fit):
        result, train_accuracy, _ = full_pipeline_fit
        assert train_accuracy >= 0.95
        assert result.best_epoch <= LEARNABILITY["epochs"]
        assert all(math.isfinite(entry.mean_loss) for entry in result.log)

    def test_generalizes_to_held_out_questions(self, full_pipeline_fit):
        _, _, held_out_accuracy = full_pipeline_fit
        assert held_out_accuracy >= 0.70

    @pytest.mark.parametrize("flags", [{"use_claims": False}, {"use_kg": False}])
    def test_ablation_reduces_held_out_accuracy(self, full_pipeline_fit, flags):
        _, _, full_accuracy = full_pipeline_fit
        _, _, ablated_accuracy = _fit_and_hold_out(**flags)
        assert ablated_accuracy < full_accuracy
