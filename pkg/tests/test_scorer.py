"""Tests for graf_qa.scorer – alignment, fusion, probabilities, answer selection."""

from __future__ import annotations

import numpy as np
import pytest
from graf_qa.embedding import cosine
from graf_qa.gat import EncodedGraph, gat_forward, init_gat_params
from graf_qa.kg_store import Triplet, build_claim_graph, build_graph
from graf_qa.retrieval import SubGraph
from graf_qa.scorer import (
    EMPTY_CLAIMS_WARNING,
    EMPTY_SUBGRAPH_WARNING,
    PreparedChoice,
    ScorerParams,
    aggregate_claims,
    answer_items,
    forward_choice,
    init_scorer_params,
    parameter_arrays,
    prepare_choice,
    relevance_matrix,
    score_choice,
    score_prepared,
    select_answers,
    self_attention,
)
from graf_qa.training import graf_objective, grad_check


def _random_encoded(rng, n_nodes, dim):
    triplets = [Triplet(f"n{i}", f"r{i % 2}", f"n{int(rng.integers(0, i))}") for i in range(1, n_nodes)]
    graph = build_graph(triplets)
    return EncodedGraph.build(
        graph, rng.normal(size=(graph.num_entities, dim)), rng.normal(size=(graph.num_edges, dim))
    )


def _random_prepared(rng, dim, target=True):
    return PreparedChoice(
        item_id="q",
        label="A",
        target=target,
        claim_graph=build_claim_graph(()),
        subgraph=SubGraph.empty(),
        claims=_random_encoded(rng, int(rng.integers(3, 9)), dim),
        kg=_random_encoded(rng, int(rng.integers(3, 9)), dim),
        choice_vector=rng.normal(size=dim),
    )


def _smooth(prep, gat, threshold=1e-3):
    for graph in (prep.claims, prep.kg):
        _, cache = gat_forward(graph, gat, return_cache=True)
        for head in cache.heads:
            if np.any(np.abs(head.node_logits) < threshold) or np.any(np.abs(head.edge_logits) < threshold):
                return False
    return True


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class TestRelevance:
    def test_parallel_rows(self):
        np.testing.assert_allclose(relevance_matrix(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]])), [[1.0]])

    def test_zero_row_gives_zero(self):
        R = relevance_matrix(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(R, [[0.0], [1 / np.sqrt(2)]])

    def test_matches_pairwise_cosine(self, rng):
        claims = rng.normal(size=(4, 5))
        kg = rng.normal(size=(6, 5))
        R = relevance_matrix(claims, kg)
        assert R.shape == (4, 6)
        assert np.all((R >= -1) & (R <= 1))
        for i in range(4):
            for j in range(6):
                assert R[i, j] == pytest.approx(cosine(claims[i], kg[j]), abs=1e-12)

    def test_empty_sides(self):
        assert relevance_matrix(np.zeros((0, 3)), np.ones((2, 3))).shape == (0, 2)
        assert relevance_matrix(np.ones((2, 3)), np.zeros((0, 3))).shape == (2, 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            relevance_matrix(np.ones((1, 2)), np.ones((1, 3)))


class TestAggregate:
    def test_zero_relevance(self, rng):
        kg = rng.normal(size=(3, 4))
        assert not aggregate_claims(np.zeros((2, 3)), kg).any()

    def test_identity(self, rng):
        kg = rng.normal(size=(3, 4))
        np.testing.assert_allclose(aggregate_claims(np.eye(3), kg), kg)


class TestSelfAttention:
    def test_single_row(self, rng):
        params = init_scorer_params(4, seed=2)
        seq = rng.normal(size=(1, 4))
        np.testing.assert_allclose(self_attention(seq, params), seq @ params.W_V)

    def test_zero_query_key_is_uniform(self, rng):
        params = init_scorer_params(3, seed=0)
        params = ScorerParams(np.zeros((3, 3)), np.zeros((3, 3)), params.W_V, params.w_final)
        seq = rng.normal(size=(4, 3))
        out, cache = self_attention(seq, params, return_cache=True)
        np.testing.assert_allclose(cache.A, np.full((4, 4), 0.25))
        np.testing.assert_allclose(out[0], (seq @ params.W_V).mean(axis=0))

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            dim = int(rng.integers(1, 9))
            scale = float(rng.choice([0.1, 1.0, 10.0]))
            seq = rng.normal(scale=scale, size=(int(rng.integers(1, 10)), dim))
            params = init_scorer_params(dim, rng=rng, attention_gain=float(rng.uniform(0.0, 6.0)))
            _, cache = self_attention(seq, params, return_cache=True)
            np.testing.assert_allclose(cache.A.sum(axis=1), 1.0, rtol=0, atol=1e-9)
            assert np.all(cache.A >= 0)

    def test_init_gains_add_identity(self):
        plain = init_scorer_params(4, seed=5)
        scaled = init_scorer_params(4, seed=5, attention_gain=6.0, value_gain=1.0)
        np.testing.assert_allclose(scaled.W_Q - plain.W_Q, 6.0 * np.eye(4), atol=1e-12)
        np.testing.assert_allclose(scaled.W_K - plain.W_K, 6.0 * np.eye(4), atol=1e-12)
        np.testing.assert_allclose(scaled.W_V - plain.W_V, np.eye(4), atol=1e-12)
        np.testing.assert_array_equal(scaled.w_final, plain.w_final)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            self_attention(np.ones((2, 3)), init_scorer_params(4))

    def test_params_shape_checked(self):
        with pytest.raises(ValueError):
            ScorerParams(np.eye(2), np.eye(2), np.eye(3), np.ones(2))


# ---------------------------------------------------------------------------
# Probabilities
# ---------------------------------------------------------------------------


class TestForwardChoice:
    def test_zero_output_vector_is_half(self, rng):
        prep = _random_prepared(rng, 4)
        gat = init_gat_params(4, heads=2, seed=0)
        scorer = init_scorer_params(4, seed=0)
        scorer = ScorerParams(scorer.W_Q, scorer.W_K, scorer.W_V, np.zeros(4))
        assert forward_choice(prep, gat, scorer).probability == 0.5

    def test_deterministic(self, rng):
        prep = _random_prepared(rng, 4)
        gat = init_gat_params(4, heads=2, seed=0)
        scorer = init_scorer_params(4, seed=0)
        assert score_prepared(prep, gat, scorer) == score_prepared(prep, gat, scorer)

    def test_probability_in_open_interval(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            prep = _random_prepared(rng, 4)
            probability = forward_choice(prep, init_gat_params(4, heads=1, rng=rng), init_scorer_params(4, rng=rng)).probability
            assert 0.0 < probability < 1.0

    def test_empty_graphs_still_score(self, rng):
        prep = _random_prepared(rng, 4)
        empty = EncodedGraph.build(build_graph([]), np.zeros((0, 4)), np.zeros((0, 4)))
        prep.claims = empty
        prep.kg = empty
        score = score_prepared(prep, init_gat_params(4, heads=1), init_scorer_params(4))
        assert 0.0 < score.probability < 1.0


class TestPrepareChoice:
    def test_warnings_for_missing_claims(self, sample_items, small_kg, stub_extractor, hash_encoder):
        prep = prepare_choice(sample_items[1], "C", small_kg, stub_extractor, hash_encoder, top_k=2, max_entities=5)
        assert EMPTY_CLAIMS_WARNING in prep.warnings
        assert prep.claims.num_nodes == 0

    def test_kg_ablation(self, sample_items, small_kg, stub_extractor, hash_encoder):
        prep = prepare_choice(sample_items[0], "A", small_kg, stub_extractor, hash_encoder, use_kg=False)
        assert prep.subgraph.is_empty()
        assert EMPTY_SUBGRAPH_WARNING in prep.warnings
        assert prep.claim_graph.num_edges == 1

    def test_claim_ablation(self, sample_items, small_kg, stub_extractor, hash_encoder):
        prep = prepare_choice(sample_items[0], "A", small_kg, stub_extractor, hash_encoder, use_claims=False)
        assert prep.claim_graph.is_empty()
        assert not prep.subgraph.is_empty()

    def test_target_flag(self, sample_items, small_kg, stub_extractor, hash_encoder):
        item = sample_items[2]
        flags = [
            prepare_choice(item, label, small_kg, stub_extractor, hash_encoder, top_k=1, max_entities=3).target
            for label in item.labels
        ]
        assert flags == [True, False, True]

    def test_score_choice(self, sample_items, small_kg, stub_extractor, hash_encoder):
        score = score_choice(
            sample_items[0],
            "A",
            small_kg,
            stub_extractor,
            hash_encoder,
            init_gat_params(16, heads=2),
            init_scorer_params(16),
            top_k=2,
            depth=1,
            max_entities=4,
        )
        assert score.label == "A"
        assert 0.0 < score.probability < 1.0
        assert score.subgraph_size <= 4
        assert score.claim_count == 1


# ---------------------------------------------------------------------------
# Answer selection
# ---------------------------------------------------------------------------


class TestSelectAnswers:
    @pytest.mark.parametrize(
        "scores, cardinality, expected",
        [
            ({"A": 0.9, "B": 0.2, "C": 0.8}, 1, {"A"}),
            ({"A": 0.9, "B": 0.2, "C": 0.8}, 2, {"A", "C"}),
            ({"A": 0.5, "B": 0.5, "C": 0.1}, 1, {"A"}),
            ({"A": 0.1, "B": 0.2, "C": 0.3}, 3, {"A", "B", "C"}),
            ({"A": 0.9, "B": 0.7, "C": 0.6}, "auto", {"A", "B"}),
            ({"A": 0.1, "B": 0.2, "C": 0.3}, "auto", {"C"}),
            ({"A": 0.6, "B": 0.2, "C": 0.3}, "auto", {"A"}),
        ],
    )
    def test_selection(self, scores, cardinality, expected):
        assert select_answers(scores, cardinality) == frozenset(expected)

    @pytest.mark.parametrize("cardinality", [0, 4, True, "two", 1.5])
    def test_invalid_cardinality(self, cardinality):
        with pytest.raises(ValueError):
            select_answers({"A": 0.1, "B": 0.2, "C": 0.3}, cardinality)

    def test_empty_scores(self):
        with pytest.raises(ValueError):
            select_answers({}, 1)


class TestAnswerItems:
    def test_jobs_do_not_change_output(self, sample_items, small_kg, stub_extractor, hash_encoder):
        gat = init_gat_params(16, heads=2, seed=4)
        scorer = init_scorer_params(16, seed=4)
        options = {"top_k": 2, "depth": 1, "max_entities": 5}
        sequential = answer_items(
            list(reversed(sample_items)), small_kg, stub_extractor, hash_encoder, gat, scorer, jobs=1, **options
        )
        parallel = answer_items(sample_items, small_kg, stub_extractor, hash_encoder, gat, scorer, jobs=2, **options)
        assert sequential == parallel
        assert [prediction.item_id for prediction in sequential] == ["q1", "q2", "q3"]

    def test_gold_cardinality(self, sample_items, small_kg, stub_extractor, hash_encoder):
        predictions = answer_items(
            sample_items,
            small_kg,
            stub_extractor,
            hash_encoder,
            init_gat_params(16, heads=1),
            init_scorer_params(16),
            top_k=2,
            max_entities=5,
        )
        assert [len(prediction.selected) for prediction in predictions] == [1, 1, 2]
        assert all(set(prediction.probabilities) == {"A", "B", "C"} for prediction in predictions)

    def test_fixed_cardinality(self, sample_items, small_kg, stub_extractor, hash_encoder):
        predictions = answer_items(
            sample_items,
            small_kg,
            stub_extractor,
            hash_encoder,
            init_gat_params(16, heads=1),
            init_scorer_params(16),
            cardinality=1,
            top_k=2,
            max_entities=5,
        )
        assert all(len(prediction.selected) == 1 for prediction in predictions)

    def test_invalid_jobs(self, sample_items, small_kg, stub_extractor, hash_encoder):
        with pytest.raises(ValueError):
            answer_items(
                sample_items, small_kg, stub_extractor, hash_encoder, init_gat_params(16), init_scorer_params(16), jobs=0
            )


# ---------------------------------------------------------------------------
# Gradients through the full pipeline
# ---------------------------------------------------------------------------


class TestObjectiveGradients:
    @pytest.mark.parametrize("loss_kind", ["bce", "cosine"])
    @pytest.mark.parametrize("dim, heads", [(3, 1), (3, 2), (3, 6), (8, 1), (8, 2), (8, 6)])
    def test_matches_finite_differences(self, loss_kind, dim, heads):
        rng = np.random.default_rng(dim * 10 + heads)
        checked = 0
        while checked < 5:
            prep = _random_prepared(rng, dim, target=bool(checked % 2))
            gat = init_gat_params(dim, heads=heads, rng=rng)
            scorer = init_scorer_params(dim, rng=rng)
            if not _smooth(prep, gat):
                continue
            params = parameter_arrays(gat, scorer)

            def objective():
                loss, grads, _ = graf_objective(prep, gat, scorer, loss_kind)
                return loss, grads

            assert grad_check(objective, params, n_coords=100, eps=1e-5, seed=checked) < 1e-4
            checked += 1

    def test_parameter_arrays_are_live(self):
        gat = init_gat_params(3, heads=1)
        scorer = init_scorer_params(3)
        arrays = parameter_arrays(gat, scorer)
        arrays["scorer.w_final"][0] = 42.0
        assert scorer.w_final[0] == 42.0
        assert set(arrays) == {
            "gat.W_N", "gat.W_E", "gat.a_N", "gat.a_E",
            "scorer.W_Q", "scorer.W_K", "scorer.W_V", "scorer.w_final",
        }
