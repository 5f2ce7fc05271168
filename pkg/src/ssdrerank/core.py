"""Domain types, the MaxSim kernel, score aggregation, ranking and IR metrics.

All scoring arithmetic is float32 with a fixed accumulation order (dot
products accumulate over dimensions in ascending order, MaxSim sums over
query tokens in ascending order). Scoring a document is therefore a pure
function of its own tokens: the batched kernel, the single-document kernel
and a naive scalar loop agree bit for bit, whatever batch a document is
scored in.
"""

from __future__ import annotations

from collections.abc import Hashable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidInputError
from .validation import check_finite, check_int

__all__ = [
    "EmbeddingMatrix",
    "ClsVector",
    "QueryEmbedding",
    "RankedList",
    "Qrels",
    "maxsim_score",
    "maxsim_batch",
    "aggregate_score",
    "aggregate_scores",
    "rank",
    "mrr_at_k",
    "recall_at_k",
    "load_qrels",
    "write_qrels",
]

Qrels = Mapping[Hashable, frozenset]


def _as_f32(array, name, ndim):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0 or 0 in arr.shape:
        raise InvalidInputError(f"{name}: empty array of shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name}: contains NaN or Inf")
    return arr


@dataclass(frozen=True, slots=True)
class EmbeddingMatrix:
    """Bag-of-words token embeddings of one document, shape ``(t, d)``."""

    doc_id: int
    tokens: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "doc_id", check_int(self.doc_id, "doc_id", minimum=0))
        object.__setattr__(self, "tokens", _as_f32(self.tokens, "tokens", 2))

    @classmethod
    def _trusted(cls, doc_id, tokens):
        # decode path: data was validated when the store was built
        obj = object.__new__(cls)
        object.__setattr__(obj, "doc_id", doc_id)
        object.__setattr__(obj, "tokens", tokens)
        return obj

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass(frozen=True, slots=True)
class ClsVector:
    """Single dense vector of one document, used for candidate generation."""

    doc_id: int
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "doc_id", check_int(self.doc_id, "doc_id", minimum=0))
        object.__setattr__(self, "vector", _as_f32(self.vector, "vector", 1))

    @classmethod
    def _trusted(cls, doc_id, vector):
        obj = object.__new__(cls)
        object.__setattr__(obj, "doc_id", doc_id)
        object.__setattr__(obj, "vector", vector)
        return obj


@dataclass(frozen=True, slots=True)
class QueryEmbedding:
    query_id: Hashable
    cls: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cls", _as_f32(self.cls, "cls", 1))
        object.__setattr__(self, "tokens", _as_f32(self.tokens, "tokens", 2))


@dataclass(frozen=True, slots=True)
class RankedList:
    """Documents ordered by descending score, ties by ascending ``doc_id``.

    Build one with :func:`rank`; the constructor only checks the ordering.
    """

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple((int(d), np.float32(s)) for d, s in self.entries)
        seen = set()
        prev = None
        for doc_id, score in entries:
            if doc_id in seen:
                raise InvalidInputError(f"duplicate doc_id {doc_id} in ranked list")
            seen.add(doc_id)
            key = (-score, doc_id)
            if prev is not None and not prev < key:
                raise InvalidInputError("entries are not sorted by (score desc, doc_id asc)")
            prev = key
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def doc_ids(self):
        return [d for d, _ in self.entries]

    @property
    def scores(self):
        return np.array([s for _, s in self.entries], dtype=np.float32)

    def top(self, k):
        return RankedList(self.entries[:k])

    def to_list(self):
        return [[d, float(s)] for d, s in self.entries]


def _tokens_of(x, name):
    if isinstance(x, (EmbeddingMatrix, QueryEmbedding)):
        return x.tokens
    return _as_f32(x, name, 2)


def _similarity(query_tokens, doc_tokens):
    """Token-token dot products, shape ``(..., q, t)``; fixed dimension order.

    ``doc_tokens`` is ``(t, d)`` or ``(n, t, d)``.
    """
    docs_t = np.moveaxis(doc_tokens, -1, 0)  # (d, ..., t)
    out_shape = doc_tokens.shape[:-2] + (query_tokens.shape[0], doc_tokens.shape[-2])
    sim = np.zeros(out_shape, dtype=np.float32)
    for k in range(query_tokens.shape[1]):
        sim += query_tokens[:, k, None] * docs_t[k][..., None, :]
    return sim


def maxsim_score(query, doc):
    """Late-interaction score of one document against one query.

    Sum over query tokens of the best dot product against any document
    token. ``query`` and ``doc`` may be :class:`QueryEmbedding` /
    :class:`EmbeddingMatrix` or raw ``(q, d)`` / ``(t, d)`` arrays.

    Returns
    -------
    numpy.float32
    """
    q = _tokens_of(query, "query tokens")
    d = _tokens_of(doc, "doc tokens")
    if q.shape[1] != d.shape[1]:
        raise InvalidInputError(
            f"dimension mismatch: query d={q.shape[1]}, doc d={d.shape[1]}"
        )
    best = _similarity(q, d).max(axis=1)
    total = np.float32(0.0)
    for value in best:
        total = np.float32(total + value)
    return total


def maxsim_batch(query, docs):
    """Score many documents at once; bit-identical to :func:`maxsim_score`.

    Documents are padded to the longest token count and padded positions
    are masked out of the max.
    """
    q = _tokens_of(query, "query tokens")
    mats = [_tokens_of(doc, "doc tokens") for doc in docs]
    if not mats:
        return np.empty(0, dtype=np.float32)
    dim = q.shape[1]
    bad = [i for i, m in enumerate(mats) if m.shape[1] != dim]
    if bad:
        raise InvalidInputError(f"dimension mismatch for documents at positions {bad[:10]}")
    lengths = np.fromiter((m.shape[0] for m in mats), dtype=np.int64, count=len(mats))
    t_max = int(lengths.max())
    padded = np.zeros((len(mats), t_max, dim), dtype=np.float32)
    for i, m in enumerate(mats):
        padded[i, : m.shape[0]] = m
    sim = _similarity(q, padded)
    pad_mask = np.arange(t_max)[None, :] >= lengths[:, None]
    sim[np.broadcast_to(pad_mask[:, None, :], sim.shape)] = -np.inf
    best = sim.max(axis=2)  # (n, q)
    total = np.zeros(len(mats), dtype=np.float32)
    for i in range(q.shape[0]):
        total += best[:, i]
    return total


def aggregate_score(cls_score, bow_score, alpha):
    """``alpha * cls_score + bow_score`` in float32."""
    for value, name in ((cls_score, "cls_score"), (bow_score, "bow_score"), (alpha, "alpha")):
        check_finite(float(value), name)
    return np.float32(np.float32(alpha) * np.float32(cls_score) + np.float32(bow_score))


def aggregate_scores(cls_scores, bow_scores, alpha):
    """Vectorised :func:`aggregate_score`; same rounding per element."""
    check_finite(float(alpha), "alpha")
    cls_arr = np.asarray(cls_scores, dtype=np.float32)
    bow_arr = np.asarray(bow_scores, dtype=np.float32)
    if not (np.isfinite(cls_arr).all() and np.isfinite(bow_arr).all()):
        raise InvalidInputError("scores must be finite")
    return np.float32(alpha) * cls_arr + bow_arr


def rank(scored):
    """Sort ``(doc_id, score)`` pairs into a :class:`RankedList`.

    Raises
    ------
    InvalidInputError
        On a duplicate ``doc_id`` or a non-finite score.
    """
    scored = list(scored)
    if not scored:
        return RankedList(())
    ids = np.array([int(d) for d, _ in scored], dtype=np.int64)
    scores = np.array([s for _, s in scored], dtype=np.float32)
    if (ids < 0).any():
        raise InvalidInputError("doc ids must be non-negative")
    if not np.isfinite(scores).all():
        raise InvalidInputError("scores must be finite")
    uniq, counts = np.unique(ids, return_counts=True)
    if (counts > 1).any():
        raise InvalidInputError(f"duplicate doc_ids: {uniq[counts > 1][:10].tolist()}")
    order = np.lexsort((ids, -scores))
    return RankedList(tuple(zip(ids[order].tolist(), scores[order])))


def _check_metric_args(qrels, k):
    check_int(k, "k", minimum=1)
    if not qrels:
        raise InvalidInputError("qrels is empty")


def _ids_of(result):
    if isinstance(result, RankedList):
        return result.doc_ids
    return [int(d) for d, *_ in result]


def mrr_at_k(results, qrels, k):
    """Mean reciprocal rank of the first relevant document within the top ``k``.

    The mean runs over the queries in ``qrels``; a query with no results or
    no relevant document in its top ``k`` contributes 0.
    """
    _check_metric_args(qrels, k)
    total = 0.0
    for qid, relevant in qrels.items():
        ids = _ids_of(results.get(qid, ()))[:k]
        for position, doc_id in enumerate(ids, start=1):
            if doc_id in relevant:
                total += 1.0 / position
                break
    return total / len(qrels)


def recall_at_k(results, qrels, k):
    """Mean over queries in ``qrels`` of the fraction of relevant docs in the top ``k``."""
    _check_metric_args(qrels, k)
    total = 0.0
    for qid, relevant in qrels.items():
        top = set(_ids_of(results.get(qid, ()))[:k])
        total += len(top & relevant) / len(relevant)
    return total / len(qrels)


def load_qrels(path):
    """Read TREC qrels (``query_id 0 doc_id relevance`` per line).

    Query ids stay strings; doc ids become ints. Lines with relevance <= 0
    are skipped, so every returned query has a non-empty relevant set.
    """
    qrels: dict[str, set[int]] = {}
    with open(path, encoding="utf8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, rel = parts
            try:
                doc = int(doc_id)
                relevance = float(rel)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if relevance > 0:
                qrels.setdefault(qid, set()).add(doc)
    return {qid: frozenset(docs) for qid, docs in qrels.items()}


def write_qrels(path, qrels: Mapping[Hashable, Iterable[int]]):
    with open(Path(path), "w", encoding="utf8") as fh:
        for qid, docs in qrels.items():
            for doc_id in sorted(docs):
                fh.write(f"{qid} 0 {doc_id} 1\n")
