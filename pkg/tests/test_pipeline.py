import io
import json
from dataclasses import replace

import pytest

from ssdrerank.core import aggregate_score, maxsim_score, rank
from ssdrerank.exceptions import DataIntegrityError, InvalidInputError, QueryError
from ssdrerank.ivf import IVFIndex
from ssdrerank.pipeline import (
    LateInteractionRetriever,
    PipelineConfig,
    measure_hit_rate,
    run_batch,
    run_query,
    write_stats_jsonl,
)
from ssdrerank.store import build_store, open_store


def rerank_oracle(query, index, store, cfg):
    """Exhaustive-path reference: search, then score each doc on its own."""
    final = index.search(query.cls, cfg.nprobe, cfg.n_candidates)
    res = store.fetch_batch(final.doc_ids.tolist())
    scored = []
    for i, (doc_id, cls_score) in enumerate(final.entries):
        if i < cfg.rerank_count:
            bow = maxsim_score(query.tokens, res.docs[i].tokens)
            scored.append((doc_id, aggregate_score(cls_score, bow, cfg.alpha)))
        elif cfg.partial_rerank_enabled:
            scored.append((doc_id, aggregate_score(cls_score, 0.0, cfg.alpha)))
    return rank(scored).top(cfg.final_k)


def hit_rate_oracle(query, index, cfg):
    cursor = index.begin_search(query.cls, cfg.nprobe, cfg.heap_capacity)
    cursor.advance(cfg.delta)
    snap = set(cursor.snapshot(cfg.prefetch_size).doc_ids.tolist())
    cursor.advance(cfg.nprobe - cfg.delta)
    needed = cursor.finish(cfg.n_candidates).doc_ids[: cfg.rerank_count].tolist()
    return len(snap & set(needed)) / len(needed)


BASE = PipelineConfig(nprobe=12, prefetch_step=25, rerank_count=200, final_k=50, n_candidates=300)


class TestConfig:
    def test_delta_rounding(self):
        assert PipelineConfig(nprobe=160, prefetch_step=30, final_k=10).delta == 48
        assert PipelineConfig(nprobe=3000, prefetch_step=10, final_k=10).delta == 300
        assert PipelineConfig(nprobe=10, prefetch_step=1, final_k=10).delta == 1

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"prefetch_step": 0},
            {"prefetch_step": 101},
            {"rerank_count": 5, "final_k": 10},
            {"rerank_count": 2000, "n_candidates": 1000},
            {"alpha": float("nan")},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidInputError):
            PipelineConfig(nprobe=10, **kwargs)

    def test_prefetch_size_defaults_to_rerank_count(self):
        assert BASE.prefetch_size == 200
        assert replace(BASE, prefetch_top_k=500).heap_capacity == 500


class TestRunQuery:
    def test_matches_oracle(self, small_corpus, small_index, small_store):
        for q in small_corpus.queries[:10]:
            ranked, _ = run_query(q, small_index, small_store, BASE)
            assert ranked == rerank_oracle(q, small_index, small_store, BASE)

    def test_step_100_full_hit(self, small_corpus, small_index, small_store):
        cfg = replace(BASE, prefetch_step=100)
        for q in small_corpus.queries:
            _, stats = run_query(q, small_index, small_store, cfg)
            assert stats.hit_rate == 1.0 and stats.missed_count == 0
            assert stats.critical_bytes == 0

    def test_prefetch_off_equivalent(self, small_corpus, small_index, small_store):
        off = replace(BASE, prefetch_enabled=False)
        for q in small_corpus.queries:
            on_list, _ = run_query(q, small_index, small_store, BASE)
            off_list, stats = run_query(q, small_index, small_store, off)
            assert stats.prefetch_time == 0 and stats.prefetched_count == 0
            assert on_list == off_list
            assert on_list.scores.tobytes() == off_list.scores.tobytes()

    @pytest.mark.parametrize("step", [1, 10, 50, 99])
    @pytest.mark.parametrize("partial", [False, True])
    def test_equivalence_across_steps(self, small_corpus, small_index, small_store, step, partial):
        cfg = replace(BASE, prefetch_step=step, partial_rerank_enabled=partial, rerank_count=60)
        off = replace(cfg, prefetch_enabled=False)
        for q in small_corpus.queries[:8]:
            assert run_query(q, small_index, small_store, cfg)[0] == run_query(
                q, small_index, small_store, off
            )[0]

    def test_partial_at_full_count_equals_full(self, small_corpus, small_index, small_store):
        full = replace(BASE, rerank_count=300)
        partial = replace(full, partial_rerank_enabled=True)
        for q in small_corpus.queries:
            assert run_query(q, small_index, small_store, full)[0] == run_query(
                q, small_index, small_store, partial
            )[0]

    def test_partial_tail_scores(self, small_corpus, small_index, small_store):
        cfg = replace(BASE, rerank_count=20, final_k=300, partial_rerank_enabled=True, alpha=0.5)
        q = small_corpus.queries[0]
        ranked, _ = run_query(q, small_index, small_store, cfg)
        assert ranked == rerank_oracle(q, small_index, small_store, cfg)
        assert len(ranked) == 300

    def test_hit_rate_matches_recount(self, small_corpus, small_index, small_store):
        for q in small_corpus.queries:
            _, stats = run_query(q, small_index, small_store, BASE)
            assert stats.hit_rate == pytest.approx(hit_rate_oracle(q, small_index, BASE))
            assert stats.missed_count == stats.needed_count - round(stats.hit_rate * stats.needed_count)

    def test_accounting(self, small_corpus, small_index, small_store):
        for q in small_corpus.queries:
            _, s = run_query(q, small_index, small_store, BASE)
            assert 0.0 <= s.hit_rate <= 1.0
            assert s.prefetched_count <= BASE.prefetch_size
            assert s.critical_bytes <= (1 - s.hit_rate) * s.needed_bytes + s.missed_count * 4096
            assert min(getattr(s, f) for f in s.TIMING_FIELDS) >= 0

    def test_missing_doc_is_integrity_error(self, small_corpus, small_index, tmp_path):
        docs = [p for p in small_corpus.iter_docs() if p[0].doc_id % 2]
        build_store(docs, tmp_path / "half", alignment=1)
        with open_store(tmp_path / "half") as store:
            with pytest.raises(DataIntegrityError):
                run_query(small_corpus.queries[0], small_index, store, BASE)

    def test_nprobe_above_nlist(self, small_corpus, small_index, small_store):
        with pytest.raises(InvalidInputError):
            run_query(small_corpus.queries[0], small_index, small_store, replace(BASE, nprobe=41))


class TestBatch:
    def test_batch_of_one(self, small_corpus, small_index, small_store):
        q = small_corpus.queries[0]
        (single, _), = run_batch([q], small_index, small_store, BASE)[0]
        assert single == run_query(q, small_index, small_store, BASE)[0]

    @pytest.mark.parametrize("concurrency", [1, 16])
    def test_matches_serial(self, small_corpus, small_index, small_store, concurrency):
        serial = [run_query(q, small_index, small_store, BASE)[0] for q in small_corpus.queries]
        results, stats = run_batch(small_corpus.queries, small_index, small_store, BASE, concurrency)
        assert [r for r, _ in results] == serial
        assert stats.n_queries == len(serial) and stats.concurrency == concurrency
        assert stats.p50_latency <= stats.p99_latency

    def test_error_carries_query_id(self, small_corpus, small_index, tmp_path):
        build_store([next(small_corpus.iter_docs())], tmp_path / "one", alignment=1)
        with open_store(tmp_path / "one") as store:
            with pytest.raises(QueryError) as info:
                run_batch(small_corpus.queries[3:5], small_index, store, BASE)
        assert info.value.query_id == small_corpus.queries[3].query_id
        assert isinstance(info.value.cause, DataIntegrityError)


class TestHitRateSweep:
    def test_full_step(self, small_corpus, small_index, small_store):
        assert measure_hit_rate(small_corpus.queries, small_index, small_store, [100], 12) == [(100, 1.0)]

    def test_trend(self, small_corpus, small_index, small_store):
        table = dict(measure_hit_rate(small_corpus.queries, small_index, small_store, [5, 30], 20))
        assert table[30] >= table[5]

    def test_single_cluster(self, small_corpus, small_store):
        index = IVFIndex(nlist=1).fit(small_corpus.cls)
        cfg = PipelineConfig(nprobe=1, rerank_count=50, final_k=10, n_candidates=100)
        table = measure_hit_rate(small_corpus.queries[:5], index, small_store, [1, 50], 1, cfg)
        assert table == [(1, 1.0), (50, 1.0)]

    def test_bad_steps(self, small_corpus, small_index, small_store):
        with pytest.raises(InvalidInputError):
            measure_hit_rate(small_corpus.queries, small_index, small_store, [], 10)
        with pytest.raises(InvalidInputError):
            measure_hit_rate(small_corpus.queries, small_index, small_store, [0], 10)


class TestEstimator:
    def test_params_roundtrip(self, small_index, small_store):
        est = LateInteractionRetriever(small_index, small_store, nprobe=8, alpha=0.5)
        params = est.get_params(deep=False)
        assert params["nprobe"] == 8 and params["alpha"] == 0.5
        assert est.set_params(prefetch_step=30) is est
        assert est.prefetch_step == 30 and est.index is small_index

    def test_predict_matches_run_query(self, small_corpus, small_index, small_store):
        est = LateInteractionRetriever(
            small_index, small_store, nprobe=12, prefetch_step=25,
            rerank_count=200, final_k=50, n_candidates=300, concurrency=4,
        ).fit()
        preds = est.predict(small_corpus.queries[:5])
        assert preds == [run_query(q, small_index, small_store, BASE)[0] for q in small_corpus.queries[:5]]

    def test_fit_detects_missing_docs(self, small_corpus, small_index, tmp_path):
        docs = [p for p in small_corpus.iter_docs() if p[0].doc_id < 100]
        build_store(docs, tmp_path / "part", alignment=1)
        with open_store(tmp_path / "part") as store:
            with pytest.raises(DataIntegrityError):
                LateInteractionRetriever(small_index, store, nprobe=4).fit()


def test_stats_jsonl(small_corpus, small_index, small_store):
    results, batch = run_batch(small_corpus.queries[:3], small_index, small_store, BASE)
    buf = io.StringIO()
    write_stats_jsonl(buf, [s for _, s in results], batch)
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [line["type"] for line in lines] == ["query"] * 3 + ["batch"]
    assert set(lines[0]) >= {"query_id", "hit_rate", "critical_bytes", "total_time"}
