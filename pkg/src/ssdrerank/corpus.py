"""Synthetic clustered corpora and the flat binary exchange format.

A corpus directory holds::

    corpus.json        {"n_docs", "d", "d_cls", "dtype", "doc_ids", "token_counts"}
    cls.bin            n_docs x d_cls values, little-endian
    bow.bin            sum(token_counts) x d values, little-endian
    queries.json       {"n_queries", "d", "d_cls", "dtype", "query_ids", "token_counts"}
    queries_cls.bin
    queries_bow.bin
    qrels.txt          TREC qrels

``dtype`` is ``float32`` or ``float16``. This is also the ingestion format
for externally produced embedding dumps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ClsVector, EmbeddingMatrix, QueryEmbedding, load_qrels, write_qrels
from .exceptions import FormatError, InvalidInputError
from .validation import check_int

__all__ = ["CorpusSpec", "Corpus", "generate_corpus", "write_corpus", "read_corpus"]

_DTYPES = {"float32": "<f4", "float16": "<f2"}


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of a synthetic corpus.

    Documents are drawn around ``n_blobs`` latent topics; ``noise`` is the
    spread of a document's CLS vector around its topic. Each query copies a
    sampled document and perturbs its CLS vector by ``query_noise`` and its
    tokens by ``query_token_noise``; that document is the query's only
    relevant one.
    """

    n_docs: int = 10_000
    d: int = 16
    d_cls: int = 32
    min_tokens: int = 4
    max_tokens: int = 16
    n_blobs: int = 32
    noise: float = 0.5
    n_queries: int = 100
    query_tokens: int = 8
    query_noise: float = 0.5
    query_token_noise: float = 0.3
    topic_weight: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("n_docs", "d", "d_cls", "min_tokens", "max_tokens", "n_blobs", "query_tokens"):
            check_int(getattr(self, name), name, minimum=1)
        check_int(self.n_queries, "n_queries", minimum=0)
        if self.min_tokens > self.max_tokens:
            raise InvalidInputError("min_tokens must not exceed max_tokens")
        if self.n_queries > self.n_docs:
            raise InvalidInputError("n_queries must not exceed n_docs")
        for name in ("noise", "query_noise", "query_token_noise", "topic_weight"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")


@dataclass
class Corpus:
    """Columnar corpus: CLS matrix, concatenated token rows and offsets."""

    doc_ids: np.ndarray
    cls: np.ndarray
    token_counts: np.ndarray
    tokens: np.ndarray
    queries: list
    qrels: dict
    labels: np.ndarray | None = None

    @property
    def n_docs(self):
        return len(self.doc_ids)

    @property
    def token_offsets(self):
        return np.concatenate([[0], np.cumsum(self.token_counts)])

    def bow(self, i):
        off = self.token_offsets
        return self.tokens[off[i]:off[i + 1]]

    def iter_docs(self):
        """Yield ``(ClsVector, EmbeddingMatrix)`` pairs, as the store builder wants."""
        off = self.token_offsets
        for i, doc_id in enumerate(self.doc_ids.tolist()):
            yield (
                ClsVector(doc_id, self.cls[i]),
                EmbeddingMatrix(doc_id, self.tokens[off[i]:off[i + 1]]),
            )


def _normalize(X):
    return (X / np.linalg.norm(X, axis=-1, keepdims=True)).astype(np.float32)


def generate_corpus(spec):
    """Deterministically draw a corpus for ``spec`` (same seed, same bytes)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_docs
    topics_cls = _normalize(rng.standard_normal((spec.n_blobs, spec.d_cls)))
    topics_tok = _normalize(rng.standard_normal((spec.n_blobs, spec.d)))
    labels = rng.integers(0, spec.n_blobs, size=n)

    cls = _normalize(
        topics_cls[labels]
        + spec.noise * rng.standard_normal((n, spec.d_cls)) / np.sqrt(spec.d_cls)
    )
    counts = rng.integers(spec.min_tokens, spec.max_tokens + 1, size=n)
    owner = np.repeat(np.arange(n), counts)
    tokens = _normalize(
        spec.topic_weight * topics_tok[labels[owner]]
        + rng.standard_normal((len(owner), spec.d)) / np.sqrt(spec.d)
    )

    offsets = np.concatenate([[0], np.cumsum(counts)])
    sources = rng.choice(n, size=spec.n_queries, replace=False)
    queries, qrels = [], {}
    for qi, src in enumerate(sources.tolist()):
        q_cls = cls[src]
        if spec.query_noise > 0:
            q_cls = _normalize(
                q_cls + spec.query_noise * rng.standard_normal(spec.d_cls) / np.sqrt(spec.d_cls)
            )
        picks = offsets[src] + rng.integers(0, counts[src], size=spec.query_tokens)
        q_tok = tokens[picks]
        if spec.query_token_noise > 0:
            q_tok = _normalize(
                q_tok
                + spec.query_token_noise
                * rng.standard_normal((spec.query_tokens, spec.d))
                / np.sqrt(spec.d)
            )
        qid = str(qi)
        queries.append(QueryEmbedding(qid, q_cls, q_tok))
        qrels[qid] = frozenset({src})

    return Corpus(
        doc_ids=np.arange(n, dtype=np.int64),
        cls=cls,
        token_counts=counts.astype(np.int64),
        tokens=tokens,
        queries=queries,
        qrels=qrels,
        labels=labels,
    )


def write_corpus(corpus, out_dir, dtype="float32", spec=None):
    if dtype not in _DTYPES:
        raise InvalidInputError(f"dtype must be one of {sorted(_DTYPES)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = _DTYPES[dtype]
    d, d_cls = corpus.tokens.shape[1], corpus.cls.shape[1]
    meta = {
        "n_docs": corpus.n_docs,
        "d": d,
        "d_cls": d_cls,
        "dtype": dtype,
        "doc_ids": corpus.doc_ids.tolist(),
        "token_counts": corpus.token_counts.tolist(),
    }
    if spec is not None:
        meta["spec"] = asdict(spec)
    (out / "corpus.json").write_text(json.dumps(meta))
    (out / "cls.bin").write_bytes(corpus.cls.astype(fmt).tobytes())
    (out / "bow.bin").write_bytes(corpus.tokens.astype(fmt).tobytes())

    q_counts = [q.tokens.shape[0] for q in corpus.queries]
    qmeta = {
        "n_queries": len(corpus.queries),
        "d": d,
        "d_cls": d_cls,
        "dtype": dtype,
        "query_ids": [str(q.query_id) for q in corpus.queries],
        "token_counts": q_counts,
    }
    (out / "queries.json").write_text(json.dumps(qmeta))
    q_cls = np.stack([q.cls for q in corpus.queries]) if corpus.queries else np.empty((0, d_cls))
    q_bow = np.concatenate([q.tokens for q in corpus.queries]) if corpus.queries else np.empty((0, d))
    (out / "queries_cls.bin").write_bytes(q_cls.astype(fmt).tobytes())
    (out / "queries_bow.bin").write_bytes(q_bow.astype(fmt).tobytes())
    write_qrels(out / "qrels.txt", corpus.qrels)
    return out


def _read_matrix(path, fmt, rows, cols):
    raw = Path(path).read_bytes()
    expected = rows * cols * np.dtype(fmt).itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=fmt).astype(np.float32).reshape(rows, cols)


def _load_meta(path):
    try:
        meta = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if meta.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    return meta


def read_corpus(corpus_dir, with_queries=True):
    """Load a corpus directory; rejects documents with zero tokens."""
    root = Path(corpus_dir)
    meta = _load_meta(root / "corpus.json")
    fmt = _DTYPES[meta["dtype"]]
    n, d, d_cls = meta["n_docs"], meta["d"], meta["d_cls"]
    counts = np.asarray(meta["token_counts"], dtype=np.int64)
    doc_ids = np.asarray(meta.get("doc_ids", range(n)), dtype=np.int64)
    if len(counts) != n or len(doc_ids) != n:
        raise FormatError(f"{root}: token_counts/doc_ids length differs from n_docs")
    if (counts < 1).any():
        raise InvalidInputError(f"{root}: documents with zero tokens: {doc_ids[counts < 1][:10].tolist()}")
    cls = _read_matrix(root / "cls.bin", fmt, n, d_cls)
    tokens = _read_matrix(root / "bow.bin", fmt, int(counts.sum()), d)
    if not (np.isfinite(cls).all() and np.isfinite(tokens).all()):
        raise InvalidInputError(f"{root}: embeddings contain NaN or Inf")

    queries, qrels = [], {}
    if with_queries and (root / "queries.json").exists():
        qmeta = _load_meta(root / "queries.json")
        qfmt = _DTYPES[qmeta["dtype"]]
        qn = qmeta["n_queries"]
        qcounts = np.asarray(qmeta["token_counts"], dtype=np.int64)
        q_cls = _read_matrix(root / "queries_cls.bin", qfmt, qn, d_cls)
        q_bow = _read_matrix(root / "queries_bow.bin", qfmt, int(qcounts.sum()), d)
        qoff = np.concatenate([[0], np.cumsum(qcounts)])
        queries = [
            QueryEmbedding(qid, q_cls[i], q_bow[qoff[i]:qoff[i + 1]])
            for i, qid in enumerate(qmeta["query_ids"])
        ]
        if (root / "qrels.txt").exists():
            qrels = load_qrels(root / "qrels.txt")
    return Corpus(doc_ids=doc_ids, cls=cls, token_counts=counts, tokens=tokens, queries=queries, qrels=qrels)
