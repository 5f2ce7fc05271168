"""Retrieve-and-rerank query engine with ANN-overlapped prefetching.

Per query, two workers cooperate:

* the search worker walks the IVF plan. After the first ``delta`` cells it
  publishes a snapshot of its running top list, then scans the remaining
  ``nprobe - delta`` cells;
* the prefetch worker reads the snapshot's embeddings from the store and
  scores them with MaxSim ("early re-ranking") while the search is still
  running.

Once the search finishes, the search worker joins the prefetcher, reads
only the re-rank documents the snapshot missed, scores those, and merges
both score sets. Prefetching changes latency only: the ranked output is
bit-identical to the prefetch-disabled pipeline.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import aggregate_scores, maxsim_batch, rank
from .exceptions import (
    DataIntegrityError,
    InvalidConfigError,
    InvalidInputError,
    QueryError,
)
from .validation import check_finite, check_int

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "QueryStats",
    "BatchStats",
    "LateInteractionRetriever",
    "run_query",
    "run_batch",
    "measure_hit_rate",
    "write_stats_jsonl",
]

# Prefetch tasks never wait on query threads, so a bounded shared pool
# cannot deadlock however many queries are in flight.
_PREFETCH_POOL = ThreadPoolExecutor(max_workers=64, thread_name_prefix="prefetch")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of one query execution.

    ``prefetch_step`` is the percentage of ``nprobe`` scanned before the
    snapshot; ``rerank_count`` documents from the top of the
    ``n_candidates`` list are scored with MaxSim.
    """

    nprobe: int
    prefetch_step: float = 10.0
    rerank_count: int = 1000
    final_k: int = 1000
    n_candidates: int = 1000
    prefetch_top_k: int | None = None
    alpha: float = 1.0
    prefetch_enabled: bool = True
    partial_rerank_enabled: bool = False

    def __post_init__(self):
        check_int(self.nprobe, "nprobe", minimum=1)
        check_finite(self.prefetch_step, "prefetch_step")
        if not 0 < self.prefetch_step <= 100:
            raise InvalidInputError(f"prefetch_step must be in (0, 100], got {self.prefetch_step}")
        check_int(self.rerank_count, "rerank_count", minimum=1)
        check_int(self.final_k, "final_k", minimum=1)
        check_int(self.n_candidates, "n_candidates", minimum=1)
        if self.prefetch_top_k is not None:
            check_int(self.prefetch_top_k, "prefetch_top_k", minimum=1)
        check_finite(self.alpha, "alpha")
        if self.rerank_count > self.n_candidates:
            raise InvalidInputError(
                f"rerank_count={self.rerank_count} exceeds n_candidates={self.n_candidates}"
            )
        if self.rerank_count < self.final_k and not self.partial_rerank_enabled:
            raise InvalidInputError(
                "rerank_count < final_k requires partial_rerank_enabled"
            )
        if self.final_k > self.n_candidates:
            raise InvalidInputError("final_k exceeds n_candidates")

    @property
    def delta(self):
        """Cells scanned before the snapshot; at least one."""
        return min(self.nprobe, max(1, math.floor(self.nprobe * self.prefetch_step / 100 + 0.5)))

    @property
    def prefetch_size(self):
        return self.rerank_count if self.prefetch_top_k is None else self.prefetch_top_k

    @property
    def heap_capacity(self):
        return max(self.n_candidates, self.prefetch_size)


@dataclass
class QueryStats:
    """Per-query timings (seconds), counts and byte counters."""

    query_id: object = None
    ann_time: float = 0.0
    prefetch_time: float = 0.0
    early_rerank_time: float = 0.0
    prefetch_stall_time: float = 0.0
    critical_fetch_time: float = 0.0
    rerank_time: float = 0.0
    total_time: float = 0.0
    delta: int = 0
    nprobe: int = 0
    candidate_count: int = 0
    needed_count: int = 0
    prefetched_count: int = 0
    missed_count: int = 0
    hit_rate: float = 0.0
    prefetch_bytes: int = 0
    critical_bytes: int = 0
    critical_blocks: int = 0
    needed_bytes: int = 0

    TIMING_FIELDS = (
        "ann_time", "prefetch_time", "early_rerank_time", "prefetch_stall_time",
        "critical_fetch_time", "rerank_time", "total_time",
    )

    def to_dict(self):
        return asdict(self)


@dataclass
class BatchStats:
    n_queries: int
    concurrency: int
    wall_time: float
    mean_latency: float
    p50_latency: float
    p99_latency: float
    throughput_qps: float
    mean_hit_rate: float
    total_critical_bytes: int
    total_prefetch_bytes: int

    TIMING_FIELDS = ("wall_time", "mean_latency", "p50_latency", "p99_latency", "throughput_qps")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_stats(cls, stats, concurrency, wall_time):
        lat = np.array([s.total_time for s in stats], dtype=np.float64)
        n = len(stats)
        return cls(
            n_queries=n,
            concurrency=concurrency,
            wall_time=wall_time,
            mean_latency=float(lat.mean()) if n else 0.0,
            p50_latency=float(np.percentile(lat, 50)) if n else 0.0,
            p99_latency=float(np.percentile(lat, 99)) if n else 0.0,
            throughput_qps=n / wall_time if wall_time > 0 else 0.0,
            mean_hit_rate=float(np.mean([s.hit_rate for s in stats])) if n else 0.0,
            total_critical_bytes=int(sum(s.critical_bytes for s in stats)),
            total_prefetch_bytes=int(sum(s.prefetch_bytes for s in stats)),
        )


def _fetch(store, ids):
    try:
        return store.fetch_batch(ids)
    except InvalidInputError as exc:
        raise DataIntegrityError(f"store is missing candidate documents: {exc}") from exc


def _prefetch_and_score(store, query, ids, cls_scores, alpha):
    t0 = time.perf_counter()
    fetched = _fetch(store, ids.tolist())
    t1 = time.perf_counter()
    scores = aggregate_scores(cls_scores, maxsim_batch(query.tokens, fetched.docs), alpha)
    t2 = time.perf_counter()
    return dict(zip(ids.tolist(), scores)), fetched, t1 - t0, t2 - t1


def _read_bytes(store, ids):
    m = store.manifest
    rows = m.lookup(ids)
    if store.mode == "direct":
        return int(m.read_lengths(rows).sum())
    return int(m.byte_lengths[rows].astype(np.int64).sum())


def run_query(query, index, store, config):
    """Execute one query; returns ``(RankedList, QueryStats)``."""
    if not isinstance(config, PipelineConfig):
        raise InvalidInputError("config must be a PipelineConfig")
    nlist = index.centroids_.shape[0]
    if config.nprobe > nlist:
        raise InvalidInputError(f"nprobe={config.nprobe} exceeds nlist={nlist}")
    stats = QueryStats(query_id=query.query_id, nprobe=config.nprobe)
    t_start = time.perf_counter()

    cursor = index.begin_search(query.cls, config.nprobe, config.heap_capacity)
    pending = None
    if config.prefetch_enabled:
        delta = config.delta
        cursor.advance(delta)
        snap = cursor.snapshot(config.prefetch_size)
        pending = _PREFETCH_POOL.submit(
            _prefetch_and_score, store, query, snap.doc_ids, snap.scores, config.alpha
        )
        cursor.advance(config.nprobe - delta)
        stats.delta = delta
    else:
        cursor.advance(config.nprobe)
    final = cursor.finish(config.n_candidates)
    stats.ann_time = time.perf_counter() - t_start
    stats.candidate_count = len(final)

    early = {}
    if pending is not None:
        t_wait = time.perf_counter()
        early, prefetched, stats.prefetch_time, stats.early_rerank_time = pending.result()
        stats.prefetch_stall_time = time.perf_counter() - t_wait
        stats.prefetched_count = len(prefetched)
        stats.prefetch_bytes = prefetched.bytes_read

    n_needed = min(config.rerank_count, len(final))
    needed_ids = final.doc_ids[:n_needed]
    needed_cls = final.scores[:n_needed]
    miss_mask = np.array([d not in early for d in needed_ids.tolist()], dtype=bool)
    missed_ids = needed_ids[miss_mask]
    stats.needed_count = n_needed
    stats.missed_count = int(miss_mask.sum())
    stats.hit_rate = 1.0 - stats.missed_count / n_needed if n_needed else 1.0
    stats.needed_bytes = _read_bytes(store, needed_ids.tolist())

    t0 = time.perf_counter()
    critical = _fetch(store, missed_ids.tolist())
    stats.critical_fetch_time = time.perf_counter() - t0
    stats.critical_bytes = critical.bytes_read
    stats.critical_blocks = critical.blocks_read

    t0 = time.perf_counter()
    missed_scores = aggregate_scores(
        needed_cls[miss_mask], maxsim_batch(query.tokens, critical.docs), config.alpha
    )
    merged = np.empty(n_needed, dtype=np.float32)
    merged[miss_mask] = missed_scores
    merged[~miss_mask] = [early[d] for d in needed_ids[~miss_mask].tolist()]
    scored = list(zip(needed_ids.tolist(), merged))
    if config.partial_rerank_enabled and len(final) > n_needed:
        tail_scores = aggregate_scores(
            final.scores[n_needed:], np.zeros(len(final) - n_needed, np.float32), config.alpha
        )
        scored.extend(zip(final.doc_ids[n_needed:].tolist(), tail_scores))
    ranked = rank(scored).top(config.final_k)
    stats.rerank_time = time.perf_counter() - t0
    stats.total_time = time.perf_counter() - t_start
    return ranked, stats


def run_batch(queries, index, store, config, concurrency=1):
    """Run ``queries`` with at most ``concurrency`` in flight.

    Returns ``(results, BatchStats)`` where ``results`` is a list of
    ``(RankedList, QueryStats)`` in input order. A failing query raises
    :class:`~ssdrerank.exceptions.QueryError` carrying its ``query_id``.
    """
    concurrency = check_int(concurrency, "concurrency", minimum=1)
    queries = list(queries)

    def one(query):
        try:
            return run_query(query, index, store, config)
        except Exception as exc:
            raise QueryError(query.query_id, exc) from exc

    t0 = time.perf_counter()
    if concurrency == 1:
        results = [one(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=concurrency, thread_name_prefix="query") as pool:
            results = list(pool.map(one, queries))
    wall = time.perf_counter() - t0
    return results, BatchStats.from_stats([s for _, s in results], concurrency, wall)


def measure_hit_rate(queries, index, store, steps, eta, config=None):
    """Mean prefetch hit rate per prefetch step, as ``[(step, mean), ...]``.

    ``config`` supplies the remaining knobs; ``nprobe`` and the step are
    overridden and prefetching is forced on.
    """
    steps = list(steps)
    if not steps:
        raise InvalidInputError("steps must be non-empty")
    for s in steps:
        if not 0 < s <= 100:
            raise InvalidInputError(f"prefetch step {s} outside (0, 100]")
    base = config or PipelineConfig(nprobe=eta)
    queries = list(queries)
    table = []
    for step in steps:
        cfg = replace(base, nprobe=eta, prefetch_step=step, prefetch_enabled=True)
        results, _ = run_batch(queries, index, store, cfg)
        table.append((step, float(np.mean([s.hit_rate for _, s in results]))))
    return table


def write_stats_jsonl(path_or_file, stats, batch_stats=None):
    """One ``{"type": "query", ...}`` line per QueryStats, then an optional batch line."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", encoding="utf8") if own else path_or_file
    try:
        for s in stats:
            fh.write(json.dumps({"type": "query", **s.to_dict()}, default=str) + "\n")
        if batch_stats is not None:
            fh.write(json.dumps({"type": "batch", **batch_stats.to_dict()}) + "\n")
    finally:
        if own:
            fh.close()


class LateInteractionRetriever(BaseEstimator):
    """Estimator wrapper binding an index and a store to pipeline knobs.

    Parameters mirror :class:`PipelineConfig`; ``prefetch`` and
    ``partial_rerank`` toggle the two optional stages. :meth:`fit` checks
    that every indexed document is present in the store with matching CLS
    dimensionality.

    Examples
    --------
    >>> retriever = LateInteractionRetriever(index, store, nprobe=64).fit()
    >>> ranked = retriever.predict(queries)
    """

    def __init__(
        self,
        index=None,
        store=None,
        nprobe=64,
        prefetch_step=10.0,
        rerank_count=1000,
        final_k=1000,
        n_candidates=1000,
        prefetch_top_k=None,
        alpha=1.0,
        prefetch=True,
        partial_rerank=False,
        concurrency=1,
    ):
        self.index = index
        self.store = store
        self.nprobe = nprobe
        self.prefetch_step = prefetch_step
        self.rerank_count = rerank_count
        self.final_k = final_k
        self.n_candidates = n_candidates
        self.prefetch_top_k = prefetch_top_k
        self.alpha = alpha
        self.prefetch = prefetch
        self.partial_rerank = partial_rerank
        self.concurrency = concurrency

    def _make_config(self):
        return PipelineConfig(
            nprobe=self.nprobe,
            prefetch_step=self.prefetch_step,
            rerank_count=self.rerank_count,
            final_k=self.final_k,
            n_candidates=self.n_candidates,
            prefetch_top_k=self.prefetch_top_k,
            alpha=self.alpha,
            prefetch_enabled=self.prefetch,
            partial_rerank_enabled=self.partial_rerank,
        )

    def fit(self, X=None, y=None):
        if self.index is None or self.store is None:
            raise InvalidConfigError("index and store are required")
        check_is_fitted(self.index, "centroids_")
        config = self._make_config()
        nlist = self.index.centroids_.shape[0]
        if config.nprobe > nlist:
            raise InvalidInputError(f"nprobe={config.nprobe} exceeds nlist={nlist}")
        manifest = self.store.manifest
        if manifest.d_cls != self.index.n_features_in_:
            raise DataIntegrityError(
                f"store d_cls={manifest.d_cls} but index d_cls={self.index.n_features_in_}"
            )
        indexed = self.index.doc_ids_.astype(np.uint64)
        missing = np.setdiff1d(indexed, manifest.doc_ids)
        if missing.size:
            raise DataIntegrityError(f"{missing.size} indexed docs absent from store, e.g. {missing[:5]}")
        self.config_ = config
        return self

    def run_query(self, query):
        check_is_fitted(self, "config_")
        return run_query(query, self.index, self.store, self.config_)

    def run_batch(self, queries):
        check_is_fitted(self, "config_")
        return run_batch(queries, self.index, self.store, self.config_, self.concurrency)

    def predict(self, queries):
        """Ranked list per query, in input order."""
        results, _ = self.run_batch(queries)
        return [ranked for ranked, _ in results]
