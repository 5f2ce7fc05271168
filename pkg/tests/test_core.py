import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssdrerank.core import (
    EmbeddingMatrix,
    QueryEmbedding,
    RankedList,
    aggregate_score,
    aggregate_scores,
    load_qrels,
    maxsim_batch,
    maxsim_score,
    mrr_at_k,
    rank,
    recall_at_k,
    write_qrels,
)
from ssdrerank.exceptions import FormatError, InvalidInputError


def brute_force_maxsim(q, d):
    """Scalar triple loop; float32 rounding after every multiply and add."""
    total = np.float32(0.0)
    for i in range(q.shape[0]):
        best = None
        for j in range(d.shape[0]):
            dot = np.float32(0.0)
            for k in range(q.shape[1]):
                dot = np.float32(dot + np.float32(q[i, k] * d[j, k]))
            if best is None or dot > best:
                best = dot
        total = np.float32(total + best)
    return total


def _query(tokens):
    tokens = np.asarray(tokens, dtype=np.float32)
    return QueryEmbedding("q", np.ones(2, dtype=np.float32), tokens)


class TestMaxSim:
    def test_identity(self):
        assert maxsim_score(_query([[1, 0]]), EmbeddingMatrix(0, [[1, 0]])) == 1.0

    def test_swapped_unit_tokens(self):
        q = _query([[1, 0], [0, 1]])
        assert maxsim_score(q, EmbeddingMatrix(0, [[0, 1], [1, 0]])) == 2.0

    def test_seed_42_matches_oracle(self):
        rng = np.random.default_rng(42)
        q = rng.standard_normal((4, 8)).astype(np.float32)
        d = rng.standard_normal((7, 8)).astype(np.float32)
        expected = brute_force_maxsim(q, d)
        got = maxsim_score(q, d)
        assert got.dtype == np.float32
        assert got.tobytes() == expected.tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            maxsim_score(np.ones((2, 3)), np.ones((2, 4)))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((5, 6)).astype(np.float32)
        docs = [rng.standard_normal((t, 6)).astype(np.float32) for t in (1, 3, 9, 2)]
        batch = maxsim_batch(q, docs)
        single = np.array([maxsim_score(q, d) for d in docs], dtype=np.float32)
        assert batch.tobytes() == single.tobytes()

    def test_batch_empty(self):
        assert maxsim_batch(np.ones((1, 2)), []).shape == (0,)

    def test_rejects_empty_and_nan(self):
        with pytest.raises(InvalidInputError):
            EmbeddingMatrix(0, np.zeros((0, 4)))
        with pytest.raises(InvalidInputError):
            EmbeddingMatrix(0, [[np.nan, 1.0]])


small_mats = st.integers(1, 16).flatmap(
    lambda d: st.tuples(
        arrays(np.float32, st.tuples(st.integers(1, 16), st.just(d)),
               elements=st.floats(-4, 4, width=32)),
        arrays(np.float32, st.tuples(st.integers(1, 16), st.just(d)),
               elements=st.floats(-4, 4, width=32)),
    )
)


@settings(max_examples=60, deadline=None)
@given(small_mats)
def test_maxsim_oracle_equivalence(pair):
    q, d = pair
    assert maxsim_score(q, d).tobytes() == brute_force_maxsim(q, d).tobytes()


@settings(max_examples=60, deadline=None)
@given(small_mats, st.data())
def test_maxsim_monotone_in_doc_tokens(pair, data):
    q, d = pair
    extra = data.draw(arrays(np.float32, (1, d.shape[1]), elements=st.floats(-4, 4, width=32)))
    assert maxsim_score(q, np.vstack([d, extra])) >= maxsim_score(q, d)


class TestAggregate:
    @pytest.mark.parametrize(
        "cls, bow, alpha, expected",
        [(2.0, 3.0, 0.0, 3.0), (2.0, 0.0, 1.0, 2.0), (1.5, 4.0, 0.5, 4.75)],
    )
    def test_examples(self, cls, bow, alpha, expected):
        assert aggregate_score(cls, bow, alpha) == expected

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            aggregate_score(float("nan"), 1.0, 1.0)
        with pytest.raises(InvalidInputError):
            aggregate_score(1.0, 1.0, float("inf"))

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(0)
        cls = rng.standard_normal(50).astype(np.float32)
        bow = rng.standard_normal(50).astype(np.float32)
        vec = aggregate_scores(cls, bow, 0.37)
        scalar = np.array([aggregate_score(c, b, 0.37) for c, b in zip(cls, bow)])
        assert vec.tobytes() == scalar.astype(np.float32).tobytes()


class TestRank:
    def test_descending(self):
        assert rank([(3, 1.0), (1, 2.0)]).to_list() == [[1, 2.0], [3, 1.0]]

    def test_tie_by_id(self):
        assert rank([(2, 1.0), (1, 1.0)]).to_list() == [[1, 1.0], [2, 1.0]]

    def test_duplicates_rejected(self):
        with pytest.raises(InvalidInputError):
            rank([(1, 1.0), (1, 2.0)])

    def test_against_stable_sort_oracle(self):
        rng = np.random.default_rng(7)
        ids = rng.permutation(1000)[:100].tolist()
        # coarse scores force plenty of ties
        scores = rng.integers(0, 20, size=100).astype(np.float32) / 4
        entries = list(zip(ids, scores))
        by_id = sorted(entries, key=lambda e: e[0])
        oracle = sorted(by_id, key=lambda e: -e[1])  # stable: ties keep id order
        assert rank(entries).to_list() == [[d, float(s)] for d, s in oracle]

    def test_ranked_list_rejects_unsorted(self):
        with pytest.raises(InvalidInputError):
            RankedList(((1, 1.0), (2, 2.0)))


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(st.integers(0, 500), st.floats(-100, 100, width=32), max_size=40))
def test_rank_idempotent(mapping):
    once = rank(mapping.items())
    assert rank(once.entries) == once


def _ranked(ids):
    return rank([(d, float(len(ids) - i)) for i, d in enumerate(ids)])


class TestMetrics:
    def test_mrr_rank_one(self):
        assert mrr_at_k({"a": _ranked([5, 6])}, {"a": frozenset({5})}, 10) == 1.0

    def test_mrr_rank_two(self):
        assert mrr_at_k({"a": _ranked([6, 5])}, {"a": frozenset({5})}, 10) == 0.5

    def test_mrr_three_queries(self):
        results = {
            "a": _ranked([1, 2, 3, 4]),
            "b": _ranked([9, 8, 7, 1]),
            "c": _ranked([9, 8, 7, 6]),
        }
        qrels = {"a": frozenset({1}), "b": frozenset({1}), "c": frozenset({100})}
        assert mrr_at_k(results, qrels, 3) == pytest.approx(1 / 3)

    def test_missing_results_count_zero(self):
        qrels = {"a": frozenset({1}), "b": frozenset({1})}
        assert mrr_at_k({"a": _ranked([1])}, qrels, 5) == 0.5
        assert recall_at_k({"a": _ranked([1])}, qrels, 5) == 0.5

    def test_recall_examples(self):
        r = {"a": _ranked([1, 2, 3])}
        assert recall_at_k(r, {"a": frozenset({1, 2})}, 2) == 1.0
        assert recall_at_k(r, {"a": frozenset({7, 8})}, 2) == 0.0
        assert recall_at_k(r, {"a": frozenset({1, 9})}, 3) == 0.5

    @pytest.mark.parametrize("metric", [mrr_at_k, recall_at_k])
    def test_k_validation(self, metric):
        with pytest.raises(InvalidInputError):
            metric({}, {"a": frozenset({1})}, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 30), min_size=0, max_size=20, unique=True),
    st.sets(st.integers(0, 30), min_size=1, max_size=5),
)
def test_metric_bounds_and_monotonicity(ids, relevant):
    results = {"q": _ranked(ids)}
    qrels = {"q": frozenset(relevant)}
    prev_mrr = prev_rec = 0.0
    for k in range(1, 25):
        m, r = mrr_at_k(results, qrels, k), recall_at_k(results, qrels, k)
        assert 0.0 <= m <= 1.0 and 0.0 <= r <= 1.0
        assert m >= prev_mrr and r >= prev_rec
        prev_mrr, prev_rec = m, r


def test_qrels_roundtrip(tmp_path):
    path = tmp_path / "qrels.txt"
    path.write_text("q1 0 5 1\nq1 0 6 0\nq2 0 7 2\nq3 0 8 0\n")
    assert load_qrels(path) == {"q1": frozenset({5}), "q2": frozenset({7})}
    write_qrels(tmp_path / "out.txt", {"x": {3, 1}})
    assert (tmp_path / "out.txt").read_text() == "x 0 1 1\nx 0 3 1\n"


def test_qrels_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("q1 0 5\n")
    with pytest.raises(FormatError):
        load_qrels(path)
