"""``ssdrerank`` command line: gen | build | query | plan | hit-rate.

Artifacts written by ``build`` live in one directory::

    index.ivf                 IVF index over CLS vectors
    store.espn                packed CLS+token records
    store.manifest            binary manifest
    store.manifest.json       same manifest, readable
    build.json                build parameters

``query`` writes ``report.json``, ``stats.jsonl`` and ``tables/*.csv`` into
its output directory. Every command exits nonzero on error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .bandwidth import BudgetInputs, batch_threshold, bytes_per_query, load_profile, prefetch_budget, prefetch_step
from .core import mrr_at_k, recall_at_k
from .corpus import CorpusSpec, generate_corpus, read_corpus, write_corpus
from .exceptions import DataIntegrityError, QueryError, SsdRerankError
from .ivf import IVFIndex
from .pipeline import BatchStats, LateInteractionRetriever, PipelineConfig, QueryStats, measure_hit_rate, run_batch, write_stats_jsonl
from .store import StoreManifest, build_store, open_store, store_paths

log = logging.getLogger("ssdrerank")

INDEX_FILE = "index.ivf"
STORE_NAME = "store"
RECALL_KS = (10, 100, 1000)

# Report keys whose values are wall-clock measurements.
TIMING_KEYS = frozenset(QueryStats.TIMING_FIELDS) | frozenset(BatchStats.TIMING_FIELDS) | {"budget_seconds"}


def mask_timing(obj, mask=None):
    """Copy of a report with every timing value replaced by ``mask``."""
    if isinstance(obj, dict):
        return {k: mask if k in TIMING_KEYS else mask_timing(v, mask) for k, v in obj.items()}
    if isinstance(obj, list):
        return [mask_timing(v, mask) for v in obj]
    return obj


def _ints(text):
    return [int(x) for x in text.split(",") if x]


def _floats(text):
    return [float(x) for x in text.split(",") if x]


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _quality(rankings, qrels):
    return {
        "mrr@10": mrr_at_k(rankings, qrels, 10),
        **{f"recall@{k}": recall_at_k(rankings, qrels, k) for k in RECALL_KS},
    }


def _load_artifacts(artifacts, mode, io_depth):
    root = Path(artifacts)
    index = IVFIndex.load(root / INDEX_FILE)
    store = open_store(root / STORE_NAME, mode=mode, io_depth=io_depth)
    return index, store


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    spec = CorpusSpec(
        n_docs=args.n_docs,
        d=args.d,
        d_cls=args.d_cls,
        min_tokens=args.min_tokens,
        max_tokens=args.max_tokens,
        n_blobs=args.n_blobs,
        noise=args.noise,
        n_queries=args.n_queries,
        query_tokens=args.query_tokens,
        query_noise=args.query_noise,
        query_token_noise=args.query_token_noise,
        seed=args.seed,
    )
    corpus = generate_corpus(spec)
    out = write_corpus(corpus, args.out, dtype=args.dtype, spec=spec)
    print(f"wrote {corpus.n_docs} docs, {len(corpus.queries)} queries to {out}")
    return 0


def cmd_build(args):
    corpus = read_corpus(args.corpus, with_queries=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training IVF with nlist=%d on %d vectors", args.nlist, corpus.n_docs)
    index = IVFIndex(nlist=args.nlist, max_iter=args.max_iter, random_state=args.seed)
    index.fit(corpus.cls, doc_ids=corpus.doc_ids)
    index.save(out / INDEX_FILE)
    manifest = build_store(corpus.iter_docs(), out / STORE_NAME, alignment=args.alignment, value_width=args.width)
    sizes = [len(ids) for ids in index.list_ids_]
    summary = {
        "n_docs": manifest.count,
        "d": manifest.d,
        "d_cls": manifest.d_cls,
        "value_width": manifest.value_width,
        "alignment": manifest.alignment,
        "data_bytes": store_paths(out / STORE_NAME)[0].stat().st_size,
        "payload_bytes": int(manifest.byte_lengths.sum()),
        "nlist": args.nlist,
        "list_size_min": min(sizes),
        "list_size_max": max(sizes),
        "seed": args.seed,
    }
    _write_json(out / "build.json", summary)
    for key, value in summary.items():
        print(f"{key:>14}: {value}")
    return 0


def _config_from_args(args, index):
    nlist = index.centroids_.shape[0]
    nprobe = args.nprobe or max(1, nlist // 4)
    n_candidates = args.n_candidates
    return PipelineConfig(
        nprobe=nprobe,
        prefetch_step=args.prefetch_step,
        rerank_count=args.rerank_count or n_candidates,
        final_k=args.final_k or n_candidates,
        n_candidates=n_candidates,
        alpha=args.alpha,
        prefetch_enabled=not args.no_prefetch,
        partial_rerank_enabled=args.partial_rerank,
    )


def cmd_query(args):
    index, store = _load_artifacts(args.artifacts, args.mode, args.io_depth)
    with store:
        corpus = read_corpus(args.corpus)
        queries = corpus.queries[: args.limit] if args.limit else corpus.queries
        if not queries:
            raise DataIntegrityError(f"{args.corpus} has no queries")
        if not set(index.doc_ids_.tolist()) == set(corpus.doc_ids.tolist()):
            raise DataIntegrityError("index doc ids do not match the corpus doc ids")
        qrels = {q.query_id: corpus.qrels.get(q.query_id, frozenset()) for q in queries}
        qrels = {k: v for k, v in qrels.items() if v}
        config = _config_from_args(args, index)
        retriever = LateInteractionRetriever(
            index, store, concurrency=args.concurrency, **_estimator_params(config)
        ).fit()

        log.info("running %d queries with %s", len(queries), config)
        results, batch = retriever.run_batch(queries)
        rankings = {q.query_id: r for q, (r, _) in zip(queries, results)}
        quality = _quality(rankings, qrels)

        out = Path(args.out)
        (out / "tables").mkdir(parents=True, exist_ok=True)
        write_stats_jsonl(out / "stats.jsonl", [s for _, s in results], batch)

        steps = _floats(args.steps)
        hit_rows = measure_hit_rate(queries, index, store, steps, config.nprobe, config) if steps else []
        _write_csv(out / "tables" / "hit_rate.csv", ["prefetch_step", "mean_hit_rate"], hit_rows)

        latency_rows = []
        for size in _ints(args.batch):
            _, b = run_batch(queries, index, store, config, concurrency=size)
            latency_rows.append(
                {"batch_size": size, **{k: getattr(b, k) for k in ("mean_latency", "p50_latency", "p99_latency", "throughput_qps", "mean_hit_rate")}}
            )
        _write_csv(
            out / "tables" / "latency_by_batch.csv",
            list(latency_rows[0]) if latency_rows else ["batch_size"],
            [list(r.values()) for r in latency_rows],
        )

        sweep = _rerank_sweep(queries, qrels, index, store, config, _ints(args.rerank_sweep))
        _write_csv(
            out / "tables" / "rerank_sweep.csv",
            ["rerank_count", "mrr@10", "mrr_ratio"],
            [[r["rerank_count"], r["mrr@10"], r["mrr_ratio"]] for r in sweep],
        )

        report = {
            "version": __version__,
            "config": {**asdict(config), "delta": config.delta, "mode": args.mode, "concurrency": args.concurrency},
            "store": {"n_docs": store.manifest.count, "alignment": store.manifest.alignment, "value_width": store.manifest.value_width},
            "index": {"nlist": int(index.centroids_.shape[0])},
            "n_queries": len(queries),
            "quality": quality,
            "latency": batch.to_dict(),
            "hit_rate": [{"prefetch_step": s, "mean_hit_rate": h} for s, h in hit_rows],
            "latency_by_batch": latency_rows,
            "rerank_sweep": sweep,
        }
        if args.profile:
            report["plan"] = _plan(args.profile, store.manifest, config.nprobe, config.delta, config.rerank_count, 64)
    _write_json(out / "report.json", report)
    print(json.dumps({"quality": quality, "mean_latency": batch.mean_latency, "mean_hit_rate": batch.mean_hit_rate}))
    return 0


def _estimator_params(config):
    return {
        "nprobe": config.nprobe,
        "prefetch_step": config.prefetch_step,
        "rerank_count": config.rerank_count,
        "final_k": config.final_k,
        "n_candidates": config.n_candidates,
        "alpha": config.alpha,
        "prefetch": config.prefetch_enabled,
        "partial_rerank": config.partial_rerank_enabled,
    }


def _rerank_sweep(queries, qrels, index, store, config, counts):
    """MRR@10 with partial re-ranking at each R, relative to the largest R."""
    counts = sorted(r for r in counts if r <= config.n_candidates)
    rows = []
    for r in counts:
        cfg = replace(config, rerank_count=r, final_k=config.n_candidates, partial_rerank_enabled=True)
        results, _ = run_batch(queries, index, store, cfg)
        rankings = {q.query_id: ranked for q, (ranked, _) in zip(queries, results)}
        rows.append({"rerank_count": r, "mrr@10": mrr_at_k(rankings, qrels, 10)})
    top = rows[-1]["mrr@10"] if rows else 0.0
    for row in rows:
        row["mrr_ratio"] = row["mrr@10"] / top if top > 0 else None
    return rows


def _plan(profile_path, manifest, eta, delta, rerank_count, partial_count):
    profile, table = load_profile(profile_path)
    budget = prefetch_budget(BudgetInputs(table, eta, delta))
    exact_bytes = bytes_per_query(manifest, rerank_count)
    partial_bytes = bytes_per_query(manifest, partial_count)
    exact = batch_threshold(profile, budget, exact_bytes)
    partial = batch_threshold(profile, budget, partial_bytes)
    return {
        "eta": eta,
        "delta": delta,
        "prefetch_step": prefetch_step(delta, eta),
        "budget_seconds": budget,
        "bandwidth_bytes_per_sec": profile.random_read_bandwidth,
        "exact": {"rerank_count": rerank_count, "bytes_per_query": exact_bytes, "batch_threshold": exact},
        "partial": {"rerank_count": partial_count, "bytes_per_query": partial_bytes, "batch_threshold": partial},
        "threshold_ratio": partial / exact if exact > 0 else None,
    }


def cmd_plan(args):
    manifest = StoreManifest.load(store_paths(Path(args.artifacts) / STORE_NAME)[1])
    plan = _plan(args.profile, manifest, args.eta, args.delta, args.rerank_count, args.partial_count)
    print(json.dumps(plan, indent=2))
    if args.out:
        _write_json(args.out, plan)
    return 0


def cmd_hit_rate(args):
    index, store = _load_artifacts(args.artifacts, args.mode, args.io_depth)
    with store:
        corpus = read_corpus(args.corpus)
        queries = corpus.queries[: args.limit] if args.limit else corpus.queries
        config = _config_from_args(args, index)
        rows = measure_hit_rate(queries, index, store, _floats(args.steps), config.nprobe, config)
    out = Path(args.out) if args.out else None
    if out:
        _write_csv(out, ["prefetch_step", "mean_hit_rate"], rows)
    for step, rate in rows:
        print(f"{step:g}\t{rate:.4f}")
    return 0


# -- argument parsing -----------------------------------------------------------


def _add_pipeline_flags(p):
    p.add_argument("--nprobe", type=int, default=None, help="clusters probed per query (default nlist/4)")
    p.add_argument("--prefetch-step", type=float, default=10.0, help="snapshot point, percent of nprobe")
    p.add_argument("--rerank-count", type=int, default=None, help="docs re-ranked (default: n-candidates)")
    p.add_argument("--final-k", type=int, default=None)
    p.add_argument("--n-candidates", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1.0, help="weight on the CLS score")
    p.add_argument("--mode", choices=("direct", "buffered", "mmap"), default="buffered")
    p.add_argument("--io-depth", type=int, default=16)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--no-prefetch", action="store_true")
    p.add_argument("--partial-rerank", action="store_true")
    p.add_argument("--limit", type=int, default=None, help="use only the first N queries")


def build_parser():
    parser = argparse.ArgumentParser(prog="ssdrerank", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    g.add_argument("out")
    defaults = CorpusSpec()
    for name in ("n_docs", "d", "d_cls", "min_tokens", "max_tokens", "n_blobs", "n_queries", "query_tokens", "seed"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    for name in ("noise", "query_noise", "query_token_noise"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=getattr(defaults, name))
    g.add_argument("--dtype", choices=("float32", "float16"), default="float32")
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("build", help="train the IVF index and pack the store")
    b.add_argument("corpus")
    b.add_argument("out")
    b.add_argument("--nlist", type=int, default=1024)
    b.add_argument("--max-iter", type=int, default=25)
    b.add_argument("--alignment", type=int, choices=(1, 512, 4096), default=4096)
    b.add_argument("--width", type=int, choices=(2, 4), default=2)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="run queries and write report.json and tables")
    q.add_argument("artifacts")
    q.add_argument("corpus")
    q.add_argument("--out", required=True)
    _add_pipeline_flags(q)
    q.add_argument("--batch", default="", help="comma-separated batch sizes for the latency table")
    q.add_argument("--steps", default="5,10,20,30,50,100", help="prefetch steps for the hit-rate table")
    q.add_argument("--rerank-sweep", default="64,128,1000", help="R values for the partial re-rank table")
    q.add_argument("--profile", default=None, help="SSD profile JSON; adds threshold calculations")
    q.set_defaults(func=cmd_query)

    pl = sub.add_parser("plan", help="prefetch budget and batch thresholds")
    pl.add_argument("profile")
    pl.add_argument("artifacts")
    pl.add_argument("--eta", type=int, required=True)
    pl.add_argument("--delta", type=int, required=True)
    pl.add_argument("--rerank-count", type=int, default=1000)
    pl.add_argument("--partial-count", type=int, default=64)
    pl.add_argument("--out", default=None)
    pl.set_defaults(func=cmd_plan)

    h = sub.add_parser("hit-rate", help="mean prefetch hit rate per step")
    h.add_argument("artifacts")
    h.add_argument("corpus")
    _add_pipeline_flags(h)
    h.add_argument("--steps", default="5,10,20,30,50,100")
    h.add_argument("--out", default=None, help="CSV output path")
    h.set_defaults(func=cmd_hit_rate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except QueryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc.cause, DataIntegrityError) else 1
    except DataIntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SsdRerankError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
