import logging
import math

import numpy as np
import pytest

from conftest import small_corpus, spancls_corpus
from mixspan.corpus import TaggedSequence, TaggingDataset
from mixspan.errors import ConfigError, DataError
from mixspan.sampling import (
    RngStream,
    SimilarityIndex,
    beta_sample,
    build_span_table,
    build_tfidf,
    categorical_sample,
    cooccurrence_embeddings,
    importance_weights,
    load_embeddings,
    save_embeddings,
    similarity_weights,
    topk_similar,
    weights_from_scores,
)


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = [RngStream(9).random() for _ in range(5)]
        b = [RngStream(9).random() for _ in range(5)]
        assert a == b

    def test_children_independent_of_sibling_consumption(self):
        root1 = RngStream(4)
        child_a = root1.child("a")
        _ = [child_a.random() for _ in range(100)]  # consume heavily
        b_after = root1.child("b").random()

        root2 = RngStream(4)
        b_fresh = root2.child("b").random()
        assert b_after == b_fresh

    def test_purpose_and_index_distinguish(self):
        root = RngStream(4)
        draws = {
            root.child("x").random(),
            root.child("y").random(),
            root.child("x", 0).random(),
            root.child("x", 1).random(),
        }
        assert len(draws) == 4

    def test_grandchildren(self):
        r = RngStream(1).child("a", 3).child("b")
        s = RngStream(1).child("a", 3).child("b")
        assert r.random() == s.random()


class TestBetaSample:
    def test_rejects_bad_alpha(self):
        rng = RngStream(0)
        for alpha in (0.0, -1.0, float("nan")):
            with pytest.raises(ConfigError):
                beta_sample(alpha, rng)

    def test_support(self):
        rng = RngStream(1)
        draws = beta_sample(0.3, rng, size=5000)
        assert ((draws >= 0) & (draws <= 1)).all()

    def test_mean_near_half(self):
        draws = beta_sample(0.5, RngStream(2), size=100_000)
        assert 0.48 <= draws.mean() <= 0.52

    def test_variance_matches_closed_form(self):
        for alpha in (0.2, 0.5, 0.8, 2.0):
            draws = beta_sample(alpha, RngStream(3).child(str(alpha)), size=100_000)
            expected = 1.0 / (4.0 * (2.0 * alpha + 1.0))
            assert abs(draws.var() - expected) <= 0.1 * expected

    def test_scalar_form(self):
        value = beta_sample(0.5, RngStream(4))
        assert isinstance(value, float) and 0.0 <= value <= 1.0

    def test_matches_scipy_distribution(self):
        # Two-sample check against an independent sampler at a bimodal alpha.
        scipy_stats = pytest.importorskip("scipy.stats")
        draws = beta_sample(0.2, RngStream(5), size=50_000)
        ref = scipy_stats.beta(0.2, 0.2).rvs(size=50_000, random_state=11)
        stat = scipy_stats.ks_2samp(draws, ref)
        assert stat.pvalue > 0.001


class TestCategoricalSample:
    def test_point_mass(self):
        rng = RngStream(0)
        assert all(categorical_sample([0, 1, 0], rng) == 1 for _ in range(50))

    def test_uniform_frequencies(self):
        rng = RngStream(1)
        n, draws = 4, 100_000
        counts = np.zeros(n)
        for _ in range(draws):
            counts[categorical_sample([1.0] * n, rng)] += 1
        p = 1.0 / n
        sigma = math.sqrt(draws * p * (1 - p))
        assert (np.abs(counts - draws * p) <= 3 * sigma).all()

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            categorical_sample([-1.0, 1.0], RngStream(2))

    def test_rejects_zero_total(self):
        with pytest.raises(ConfigError):
            categorical_sample([0.0, 0.0], RngStream(2))

    def test_scale_invariance(self):
        w = [0.2, 1.4, 0.0, 3.1]
        a = [categorical_sample(w, RngStream(7).child("d", i)) for i in range(500)]
        b = [categorical_sample([5.0 * x for x in w], RngStream(7).child("d", i)) for i in range(500)]
        assert a == b


class TestTfidf:
    def test_rarer_token_scores_higher(self):
        table = build_tfidf([["a", "b"], ["a", "c"]])
        assert table.score("b") > table.score("a")
        assert table.score("a") == 0.0
        assert table.idf["b"] == pytest.approx(math.log(2))

    def test_single_document_degenerates(self, caplog):
        with caplog.at_level(logging.WARNING):
            table = build_tfidf([["a", "b", "c"]])
        assert table.degenerate
        assert all(v == 0.0 for v in table.idf.values())
        assert "degenerate" in caplog.text.lower()

    def test_unknown_token_raises(self):
        table = build_tfidf([["a"], ["b"]])
        with pytest.raises(KeyError):
            table.score("zzz")
        with pytest.raises(KeyError):
            table.sentence_scores(["a", "zzz"])

    def test_within_sentence_counts(self):
        table = build_tfidf([["a", "a", "b"], ["b", "c"]])
        scores = table.sentence_scores(["a", "a", "b"])
        assert scores[0] == pytest.approx(2 * math.log(2))
        assert scores[2] == pytest.approx(0.0)  # b occurs in both documents

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            build_tfidf([])


class TestImportanceWeights:
    def test_low_score_favored(self):
        w = weights_from_scores(np.array([3.0, 1.0]))
        assert w[1] > w[0] > 0
        assert w[1] - w[0] == pytest.approx(2.0)

    def test_equal_scores_uniform(self):
        w = weights_from_scores(np.array([2.0, 2.0, 2.0]))
        assert np.allclose(w, w[0])

    def test_single_token_positive(self):
        w = weights_from_scores(np.array([5.0]))
        assert w[0] > 0

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            weights_from_scores(np.array([]))

    def test_sampling_prefers_low_tfidf(self):
        # "common" appears everywhere (idf 0), "rare" in one sentence only.
        corpus = [["common", "rare"], ["common", "x"], ["common", "y"]]
        table = build_tfidf(corpus)
        weights = importance_weights(["common", "rare"], table)
        assert weights[0] > weights[1]
        rng = RngStream(0)
        picks = [categorical_sample(weights, rng) for _ in range(2000)]
        assert picks.count(0) > picks.count(1)

    def test_degenerate_table_gives_uniform(self):
        table = build_tfidf([["a", "b", "c"]])
        weights = importance_weights(["a", "b"], table)
        assert np.allclose(weights, weights[0])


class TestSimilarityIndex:
    def test_cosine_ranking(self):
        vecs = {
            "a": np.array([1.0, 0.0]),
            "b": np.array([0.9, 0.1]),
            "c": np.array([0.0, 1.0]),
        }
        index = SimilarityIndex(vecs)
        top = topk_similar("a", index)
        assert top[0][0] == "b"
        assert top[0][1] == pytest.approx(0.9 / math.hypot(0.9, 0.1))

    def test_never_own_neighbor(self):
        vecs = {t: np.ones(3) for t in "abcde"}
        index = SimilarityIndex(vecs)
        for t in "abcde":
            assert t not in [n for n, _ in topk_similar(t, index)]

    def test_two_item_vocab(self):
        index = SimilarityIndex({"a": np.ones(2), "b": np.ones(2)})
        assert len(topk_similar("a", index)) == 1

    def test_caps_at_ten(self):
        vecs = {f"t{i}": np.array([1.0, i / 20.0]) for i in range(15)}
        index = SimilarityIndex(vecs)
        assert len(topk_similar("t0", index)) == 10

    def test_unknown_item(self):
        index = SimilarityIndex({"a": np.ones(2), "b": np.ones(2)})
        with pytest.raises(KeyError):
            topk_similar("zzz", index)

    def test_sorted_descending(self):
        rng = np.random.default_rng(0)
        vecs = {f"t{i}": rng.normal(size=4) for i in range(12)}
        index = SimilarityIndex(vecs)
        cosines = [c for _, c in topk_similar("t3", index)]
        assert cosines == sorted(cosines, reverse=True)

    def test_similarity_weights_clamp(self):
        w = similarity_weights([("x", 0.5), ("y", -0.2)])
        assert w.tolist() == [0.5, 0.0]
        w = similarity_weights([("x", -0.5), ("y", -0.2)])
        assert w.tolist() == [1.0, 1.0]  # all-negative falls back to uniform


class TestEmbeddingsIO:
    def test_roundtrip(self, tmp_path):
        vecs = {"a": np.array([1.0, 2.5]), "b": np.array([-0.25, 0.125])}
        path = tmp_path / "emb.txt"
        save_embeddings(vecs, path)
        loaded = load_embeddings(path)
        assert set(loaded) == {"a", "b"}
        assert np.array_equal(loaded["a"], vecs["a"])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("not a header\n")
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("1 3\ntok 1.0 2.0\n")
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_count_mismatch(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("2 2\ntok 1.0 2.0\n")
        with pytest.raises(DataError):
            load_embeddings(path)


class TestCooccurrence:
    def test_shared_context_tokens_are_similar(self):
        corpus = [
            ["the", "pizza", "was", "good"],
            ["the", "pasta", "was", "good"],
            ["delivery", "took", "forever", "yesterday"],
        ]
        vecs = cooccurrence_embeddings(corpus)

        def cos(a, b):
            return float(vecs[a] @ vecs[b])

        assert cos("pizza", "pasta") > cos("pizza", "forever")


class TestSpanTable:
    def test_review_sentence_spans(self, vocab, review):
        ds = TaggingDataset([review], vocab)
        table = build_span_table(ds)
        assert {e.tokens for e in table.spans_of("AS")} == {("Everybody",), ("food",)}
        assert {e.tokens for e in table.spans_of("OP")} == {
            ("very", "nice"),
            ("average", "at", "best"),
        }
        assert all(e.freq == 1 for e in table.spans_of("AS"))

    def test_duplicates_double_frequency(self, vocab, review):
        ds = TaggingDataset([review, review], vocab)
        table = build_span_table(ds)
        assert all(e.freq == 2 for e in table.spans_of("AS"))

    def test_empty_dataset_rejected(self, vocab):
        with pytest.raises(DataError):
            build_span_table(TaggingDataset([], vocab))

    def test_no_spans_rejected(self, vocab):
        ex = TaggedSequence(("a", "b"), (vocab.o_id, vocab.o_id))
        with pytest.raises(DataError):
            build_span_table(TaggingDataset([ex], vocab))

    def test_missing_type_rejected(self, vocab, review):
        table = build_span_table(TaggingDataset([review], vocab))
        with pytest.raises(DataError):
            table.spans_of("XX")

    def test_spancls_grouped_by_class(self):
        ds = spancls_corpus()
        table = build_span_table(ds)
        assert set(table.types()) == {"negative", "positive"}
        assert {e.tokens for e in table.spans_of("positive")} == {("food",), ("pizza",)}

    def test_pooled_vectors(self, vocab, review):
        calls = []

        def fake_pooled(seqs):
            calls.append(len(seqs))
            return np.stack([np.full(4, float(len(s))) for s in seqs])

        ds = TaggingDataset([review], vocab)
        table = build_span_table(ds, fake_pooled)
        assert table.has_vectors
        entry = table.spans_of("OP")[0]
        assert entry.vector is not None and entry.vector.shape == (4,)
