"""In-memory IVF index over CLS vectors with a resumable, staged search.

A search is split into a :class:`SearchCursor` that visits the probed
clusters in a fixed plan order. Between two :meth:`SearchCursor.advance`
calls the running top-K can be read with :meth:`SearchCursor.snapshot`,
which is what the prefetcher keys its reads on.

Inner products are computed with a fixed, ascending-dimension float32
accumulation so a document's score does not depend on which cluster batch
it was scored in, on thread count, or on BLAS.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import FormatError, InvalidInputError, InvalidStateError
from .validation import check_doc_ids, check_int, check_matrix, check_vector

__all__ = [
    "IVFIndex",
    "SearchCursor",
    "CandidateList",
    "train",
    "begin_search",
    "advance",
    "snapshot",
    "finish",
    "inner_products",
]

MAGIC = b"ESPNIVF1"
_HEADER = struct.Struct("<8sIIQ")


def inner_products(columns, query):
    """Dot products of stored vectors with ``query``.

    ``columns`` is the transposed block ``(d, n)``; accumulation runs over
    dimensions in ascending order in float32.
    """
    acc = np.zeros(columns.shape[1], dtype=np.float32)
    for k in range(columns.shape[0]):
        acc += columns[k] * query[k]
    return acc


def _top(ids, scores, k):
    """First ``k`` of (ids, scores) ordered by score desc, id asc."""
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def _kmeans(X, nlist, max_iter, seed):
    """Lloyd's k-means with k-means++ seeding; returns float64 centroids."""
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    sq_norms = np.einsum("ij,ij->i", X, X)

    centroids = np.empty((nlist, X.shape[1]))
    first = rng.integers(n)
    centroids[0] = X[first]
    closest = np.maximum(sq_norms - 2 * X @ X[first] + sq_norms[first], 0.0)
    for c in range(1, nlist):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than clusters; duplicates get repaired below
            pick = rng.integers(n)
        else:
            pick = min(np.searchsorted(np.cumsum(closest), rng.random() * total), n - 1)
        centroids[c] = X[pick]
        dist = np.maximum(sq_norms - 2 * X @ X[pick] + sq_norms[pick], 0.0)
        np.minimum(closest, dist, out=closest)

    assign = None
    for _ in range(max_iter):
        new_assign = _nearest(X, centroids)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=nlist)
        sums = np.stack(
            [np.bincount(assign, weights=X[:, j], minlength=nlist) for j in range(X.shape[1])],
            axis=1,
        )
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        _split_empty(centroids, counts, rng)
    return centroids


def _split_empty(centroids, counts, rng):
    """Move each empty centroid next to the largest cluster's centroid."""
    counts = counts.copy()
    for empty in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))
        if counts[largest] < 2:
            break
        scale = np.abs(centroids[largest]).mean() or 1.0
        eps = rng.standard_normal(centroids.shape[1]) * 1e-4 * scale
        centroids[empty] = centroids[largest] + eps
        centroids[largest] = centroids[largest] - eps
        half = counts[largest] // 2
        counts[empty], counts[largest] = half, counts[largest] - half


def _nearest(X, centroids, chunk=4096):
    c_norms = np.einsum("ij,ij->i", centroids, centroids)
    out = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], chunk):
        block = X[start:start + chunk]
        out[start:start + chunk] = np.argmin(c_norms[None, :] - 2 * block @ centroids.T, axis=1)
    return out


@dataclass(frozen=True)
class CandidateList:
    """Candidates sorted by CLS score desc, doc id asc."""

    doc_ids: np.ndarray
    scores: np.ndarray
    clusters_visited: int

    def __len__(self):
        return len(self.doc_ids)

    @property
    def entries(self):
        return list(zip(self.doc_ids.tolist(), self.scores.tolist()))


class IVFIndex(BaseEstimator):
    """Inverted-file index with inner-product scoring.

    Parameters
    ----------
    nlist : int, default=1024
        Number of k-means cells.
    max_iter : int, default=25
        Lloyd iterations cap; training stops earlier once no assignment
        changes.
    random_state : int, default=0
        Seed for k-means++ initialisation and empty-cell repair.

    Attributes
    ----------
    centroids_ : ndarray of shape (nlist, d_cls), float32
    list_ids_ : list of ndarray
        Doc ids held by each cell.
    list_vectors_ : list of ndarray
        CLS vectors held by each cell, row-aligned with ``list_ids_``.
    n_features_in_ : int
    """

    def __init__(self, nlist=1024, max_iter=25, random_state=0):
        self.nlist = nlist
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None, doc_ids=None):
        """Train centroids on ``X`` and file every row into its nearest cell.

        ``doc_ids`` defaults to ``range(len(X))``. ``y`` is ignored.
        """
        nlist = check_int(self.nlist, "nlist", minimum=1)
        max_iter = check_int(self.max_iter, "max_iter", minimum=1)
        X = check_matrix(X, "X")
        if X.shape[0] < nlist:
            raise InvalidInputError(f"need at least nlist={nlist} vectors, got {X.shape[0]}")
        ids = np.arange(X.shape[0], dtype=np.uint64) if doc_ids is None else check_doc_ids(doc_ids)
        if len(ids) != X.shape[0]:
            raise InvalidInputError("doc_ids and X differ in length")
        if len(np.unique(ids)) != len(ids):
            raise InvalidInputError("doc_ids must be unique")

        centroids = _kmeans(X.astype(np.float64), nlist, max_iter, self.random_state)
        self.centroids_ = centroids.astype(np.float32)
        assign = _nearest(X.astype(np.float64), self.centroids_.astype(np.float64))
        order = np.argsort(assign, kind="stable")
        bounds = np.searchsorted(assign[order], np.arange(nlist + 1))
        self._set_lists(
            [ids[order[bounds[c]:bounds[c + 1]]] for c in range(nlist)],
            [X[order[bounds[c]:bounds[c + 1]]] for c in range(nlist)],
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _set_lists(self, list_ids, list_vectors):
        self.list_ids_ = [np.ascontiguousarray(i, dtype=np.uint64) for i in list_ids]
        self.list_vectors_ = [np.ascontiguousarray(v, dtype=np.float32) for v in list_vectors]
        sizes = np.array([len(i) for i in self.list_ids_], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        d = self.centroids_.shape[1]
        self._all_ids = (
            np.concatenate(self.list_ids_).astype(np.int64) if sizes.sum() else np.empty(0, np.int64)
        )
        stacked = np.concatenate(self.list_vectors_) if sizes.sum() else np.empty((0, d), np.float32)
        self._columns = np.ascontiguousarray(stacked.T)
        self._centroid_columns = np.ascontiguousarray(self.centroids_.T)

    @property
    def n_docs_(self):
        check_is_fitted(self, "centroids_")
        return int(self._offsets[-1])

    @property
    def doc_ids_(self):
        """Every indexed doc id, in list order."""
        check_is_fitted(self, "centroids_")
        return self._all_ids.copy()

    def predict(self, X):
        """Index of the nearest cell (L2) for each row of ``X``."""
        check_is_fitted(self, "centroids_")
        X = check_matrix(X, "X", n_cols=self.n_features_in_)
        return _nearest(X.astype(np.float64), self.centroids_.astype(np.float64))

    def centroid_scores(self, query_cls):
        check_is_fitted(self, "centroids_")
        q = check_vector(query_cls, "query_cls", size=self.n_features_in_)
        return inner_products(self._centroid_columns, q)

    def begin_search(self, query_cls, nprobe, k):
        return SearchCursor(self, query_cls, nprobe, k)

    def search(self, query_cls, nprobe, k):
        """One-shot search: visit all ``nprobe`` cells and return the top ``k``."""
        cursor = self.begin_search(query_cls, nprobe, k)
        cursor.advance(cursor.nprobe)
        return cursor.finish(k)

    def _scan(self, clusters, query):
        starts, stops = self._offsets[clusters], self._offsets[clusters + 1]
        if len(clusters) == 1:
            sl = slice(int(starts[0]), int(stops[0]))
            return self._all_ids[sl], inner_products(self._columns[:, sl], query)
        idx = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
        return self._all_ids[idx], inner_products(self._columns[:, idx], query)

    def save(self, path):
        """Write the index in the ``ESPNIVF1`` little-endian layout."""
        check_is_fitted(self, "centroids_")
        nlist, d = self.centroids_.shape
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, nlist, d, self.n_docs_))
            fh.write(self.centroids_.astype("<f4").tobytes())
            for ids, vecs in zip(self.list_ids_, self.list_vectors_):
                fh.write(struct.pack("<Q", len(ids)))
                fh.write(ids.astype("<u8").tobytes())
                fh.write(vecs.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, nlist, d, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        pos = _HEADER.size
        try:
            centroids = np.frombuffer(data, "<f4", nlist * d, pos).reshape(nlist, d)
            pos += centroids.nbytes
            list_ids, list_vecs = [], []
            for _ in range(nlist):
                (n,) = struct.unpack_from("<Q", data, pos)
                pos += 8
                list_ids.append(np.frombuffer(data, "<u8", n, pos))
                pos += 8 * n
                list_vecs.append(np.frombuffer(data, "<f4", n * d, pos).reshape(n, d))
                pos += 4 * n * d
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated body") from exc
        if pos != len(data) or sum(len(i) for i in list_ids) != count:
            raise FormatError(f"{path}: inconsistent list sizes")
        index = cls(nlist=nlist)
        index.centroids_ = centroids.astype(np.float32)
        index.n_features_in_ = d
        index._set_lists(list_ids, list_vecs)
        return index


class SearchCursor:
    """One query's progress through its cell visitation plan.

    The plan is the ``nprobe`` cells with the highest centroid inner product,
    best first (ties by cell index). The running top-K holds at most ``k``
    entries. Owned by a single query: ``advance`` must not race with another
    ``advance``; ``snapshot`` may run on another thread between advances.
    """

    def __init__(self, index, query_cls, nprobe, k):
        check_is_fitted(index, "centroids_")
        nlist = index.centroids_.shape[0]
        self.nprobe = check_int(nprobe, "nprobe", minimum=1, maximum=nlist)
        self.capacity = check_int(k, "k", minimum=1)
        self.index = index
        self.query = check_vector(query_cls, "query_cls", size=index.n_features_in_)
        scores = index.centroid_scores(self.query)
        order = np.lexsort((np.arange(nlist), -scores))
        self.plan = order[: self.nprobe]
        self.clusters_visited = 0
        self._heap = (np.empty(0, np.int64), np.empty(0, np.float32))
        self._lock = threading.Lock()

    @property
    def complete(self):
        return self.clusters_visited == self.nprobe

    def advance(self, n_clusters):
        """Scan the next ``n_clusters`` cells of the plan into the top-K."""
        n_clusters = check_int(n_clusters, "n_clusters", minimum=0)
        if self.clusters_visited + n_clusters > self.nprobe:
            raise InvalidInputError(
                f"cannot advance {n_clusters} cells: {self.clusters_visited} of "
                f"{self.nprobe} already visited"
            )
        if n_clusters == 0:
            return
        clusters = self.plan[self.clusters_visited:self.clusters_visited + n_clusters]
        ids, scores = self.index._scan(clusters, self.query)
        heap_ids, heap_scores = self._heap
        merged = _top(
            np.concatenate([heap_ids, ids]), np.concatenate([heap_scores, scores]), self.capacity
        )
        with self._lock:
            self._heap = merged
            self.clusters_visited += n_clusters

    def snapshot(self, top_k):
        """Current best ``top_k`` candidates; does not mutate the cursor."""
        top_k = check_int(top_k, "top_k", minimum=1)
        with self._lock:
            ids, scores = self._heap
            visited = self.clusters_visited
        return CandidateList(ids[:top_k].copy(), scores[:top_k].copy(), visited)

    def finish(self, k):
        if not self.complete:
            raise InvalidStateError(
                f"search visited {self.clusters_visited} of {self.nprobe} cells; advance first"
            )
        k = check_int(k, "k", minimum=1, maximum=self.capacity)
        return self.snapshot(k)


def train(vectors, nlist, max_iters=25, seed=0):
    """Fit an :class:`IVFIndex` on a sequence of :class:`~ssdrerank.core.ClsVector`."""
    vectors = list(vectors)
    if len(vectors) < nlist:
        raise InvalidInputError(f"need at least nlist={nlist} vectors, got {len(vectors)}")
    X = np.stack([v.vector for v in vectors])
    ids = np.array([v.doc_id for v in vectors], dtype=np.uint64)
    return IVFIndex(nlist=nlist, max_iter=max_iters, random_state=seed).fit(X, doc_ids=ids)


def begin_search(index, query_cls, nprobe, k):
    return index.begin_search(query_cls, nprobe, k)


def advance(cursor, n_clusters):
    cursor.advance(n_clusters)


def snapshot(cursor, top_k):
    return cursor.snapshot(top_k)


def finish(cursor, k):
    return cursor.finish(k)
