"""Tests for graf_qa.embedding – hash/table encoders and cosine."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from graf_qa.embedding import (
    EmbeddingTableError,
    HashEncoder,
    TableEncoder,
    cosine,
    load_embedding_table,
)
from graf_qa.retrieval import Normalizer


# ---------------------------------------------------------------------------
# HashEncoder
# ---------------------------------------------------------------------------


class TestHashEncoder:
    def test_empty_text_is_zero(self):
        vector = HashEncoder(dim=8).embed("")
        assert vector.shape == (8,)
        assert not vector.any()

    def test_deterministic_across_instances(self):
        first = HashEncoder(dim=32, seed=3).embed("curtea de apel")
        second = HashEncoder(dim=32, seed=3).embed("curtea de apel")
        np.testing.assert_array_equal(first, second)

    @pytest.mark.parametrize("text", ["a", "curtea de apel", "tribunal tribunal", "x y z w v u"])
    def test_unit_norm(self, text):
        assert np.linalg.norm(HashEncoder(dim=16).embed(text)) == pytest.approx(1.0, abs=1e-9)

    def test_seed_changes_vectors(self):
        texts = [f"token{i}" for i in range(20)]
        first = HashEncoder(dim=64, seed=0).embed_many(texts)
        second = HashEncoder(dim=64, seed=1).embed_many(texts)
        assert not np.array_equal(first, second)

    def test_normalized_text_equivalence(self):
        encoder = HashEncoder(dim=16)
        np.testing.assert_array_equal(encoder.embed("Curtea, de APEL!"), encoder.embed("curtea de apel"))

    def test_lemmas_applied(self):
        encoder = HashEncoder(dim=16, normalizer=Normalizer({"curtea": "curte"}))
        np.testing.assert_array_equal(encoder.embed("Curtea"), encoder.embed("curte"))

    def test_cancelled_tokens_fall_back_to_counts(self):
        encoder = HashEncoder(dim=1)
        tokens = [f"w{i}" for i in range(50)]
        plus = next(t for t in tokens if encoder.slot(t)[1] > 0)
        minus = next(t for t in tokens if encoder.slot(t)[1] < 0)
        np.testing.assert_allclose(encoder.embed(f"{plus} {minus}"), [1.0])

    def test_vectors_are_read_only(self):
        vector = HashEncoder(dim=4).embed("a")
        with pytest.raises(ValueError):
            vector[0] = 5.0

    def test_embed_many_shape(self):
        encoder = HashEncoder(dim=6)
        assert encoder.embed_many([]).shape == (0, 6)
        assert encoder.embed_many(["a", "b", "c"]).shape == (3, 6)

    def test_thread_safe_memoization(self):
        encoder = HashEncoder(dim=16)
        texts = [f"text {i % 7}" for i in range(200)]
        with ThreadPoolExecutor(max_workers=8) as pool:
            rows = list(pool.map(encoder.embed, texts))
        for text, row in zip(texts, rows):
            np.testing.assert_array_equal(row, encoder.embed(text))

    def test_invalid_dim(self):
        with pytest.raises(ValueError):
            HashEncoder(dim=0)


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------


class TestCosine:
    def test_self_similarity(self, rng):
        u = rng.normal(size=5)
        assert cosine(u, u) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_opposite(self):
        assert cosine(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == pytest.approx(-1.0)

    def test_zero_vector(self):
        assert cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cosine(np.ones(2), np.ones(3))

    def test_range(self, rng):
        for _ in range(100):
            value = cosine(rng.normal(size=4), rng.normal(size=4))
            assert -1.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# TableEncoder / load_embedding_table
# ---------------------------------------------------------------------------


class TestTableEncoder:
    def test_single_token(self):
        encoder = TableEncoder({"a": np.array([1.0, 0.0])})
        np.testing.assert_allclose(encoder.embed("a"), [1.0, 0.0])

    def test_mean_then_normalize(self):
        encoder = TableEncoder({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])})
        np.testing.assert_allclose(encoder.embed("a b"), [1 / math.sqrt(2), 1 / math.sqrt(2)])

    def test_empty_table_is_hash_behavior(self):
        fallback = HashEncoder(dim=8, seed=2)
        encoder = TableEncoder({}, fallback)
        np.testing.assert_allclose(encoder.embed("curtea de apel"), fallback.embed("curtea de apel"))
        assert encoder.dim == 8

    def test_unknown_tokens_use_fallback_vectors(self):
        fallback = HashEncoder(dim=2, seed=0)
        encoder = TableEncoder({"a": np.array([1.0, 0.0])}, fallback)
        expected = np.array([1.0, 0.0]) + fallback.token_vector("zz")
        expected = expected / np.linalg.norm(expected) if np.linalg.norm(expected) else fallback.embed("a zz")
        np.testing.assert_allclose(encoder.embed("a zz"), expected)

    def test_empty_text(self):
        assert not TableEncoder({"a": np.array([1.0, 0.0])}).embed("").any()

    def test_inconsistent_dims(self):
        with pytest.raises(EmbeddingTableError):
            TableEncoder({"a": np.ones(2), "b": np.ones(3)})

    def test_fallback_dim_mismatch(self):
        with pytest.raises(EmbeddingTableError):
            TableEncoder({"a": np.ones(2)}, HashEncoder(dim=3))

    def test_load_table(self, tmp_path):
        path = tmp_path / "vectors.tsv"
        path.write_text("Curte\t1 0 0\napel\t0 1 0\n\n", encoding="utf-8")
        encoder = load_embedding_table(path)
        assert encoder.dim == 3
        np.testing.assert_allclose(encoder.embed("curte"), [1.0, 0.0, 0.0])

    @pytest.mark.parametrize(
        "content, line",
        [
            ("a\t1 0\nb\t1 0 0\n", 2),
            ("a 1 0\n", 1),
            ("a\t1 x\n", 1),
            ("a\t\n", 1),
            ("a\t1 nan\n", 1),
        ],
    )
    def test_malformed_table(self, tmp_path, content, line):
        path = tmp_path / "vectors.tsv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(EmbeddingTableError, match=rf"vectors\.tsv:{line}"):
            load_embedding_table(path)

    def test_requested_dim_mismatch(self, tmp_path):
        path = tmp_path / "vectors.tsv"
        path.write_text("a\t1 0\n", encoding="utf-8")
        with pytest.raises(EmbeddingTableError):
            load_embedding_table(path, dim=4)
