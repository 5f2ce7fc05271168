"""SSD-resident packed store of per-document CLS + BOW embeddings.

Each record is the CLS vector immediately followed by the token rows, so a
small document costs one block read instead of two. Records start on an
``alignment`` boundary; with ``alignment=1`` the data file is the bare
concatenation of payloads.

Files for a store named ``<name>``:

``<name>.espn``
    record payloads, fp16 or fp32 little-endian.
``<name>.manifest``
    header (magic ``ESPNSTR1``, version, d, d_cls, value_width, alignment,
    count) followed by one ``(doc_id u64, byte_offset u64, byte_length u32,
    token_count u32)`` row per record.
``<name>.manifest.json``
    the same content as JSON, for humans.

Reads go through a :class:`StoreHandle` opened in ``direct`` (O_DIRECT,
bypasses the page cache), ``buffered`` (pread through the page cache) or
``mmap`` mode. All modes return identical payloads.
"""

from __future__ import annotations

import json
import logging
import mmap
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ClsVector, EmbeddingMatrix
from .exceptions import (
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    StoreIOError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "StoreManifest",
    "StoreHandle",
    "FetchResult",
    "build_store",
    "open_store",
    "store_paths",
]

MAGIC = b"ESPNSTR1"
VERSION = 1
ALIGNMENTS = (1, 512, 4096)
WIDTHS = {2: np.dtype("<f2"), 4: np.dtype("<f4")}
MODES = ("direct", "buffered", "mmap")
PAGE_SIZE = 4096
_HEADER = struct.Struct("<8sIIIIIQ")
_RECORD = np.dtype(
    [("doc_id", "<u8"), ("byte_offset", "<u8"), ("byte_length", "<u4"), ("token_count", "<u4")]
)
_FP16_MAX = float(np.finfo(np.float16).max)


def store_paths(path):
    """``(data, manifest, manifest_json)`` paths for a store base name."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".espn", ".manifest") else path
    return (
        base.with_name(base.name + ".espn"),
        base.with_name(base.name + ".manifest"),
        base.with_name(base.name + ".manifest.json"),
    )


def _align_up(n, alignment):
    return -(-n // alignment) * alignment


@dataclass(frozen=True, eq=False)
class StoreManifest:
    """In-memory record table of a store.

    The per-record columns are parallel numpy arrays in file order.
    """

    d: int
    d_cls: int
    value_width: int
    alignment: int
    doc_ids: np.ndarray
    byte_offsets: np.ndarray
    byte_lengths: np.ndarray
    token_counts: np.ndarray
    version: int = VERSION
    _sorter: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_sorter", np.argsort(self.doc_ids, kind="stable"))

    @property
    def count(self):
        return len(self.doc_ids)

    def payload_length(self, token_count):
        return (self.d_cls + int(token_count) * self.d) * self.value_width

    def lookup(self, doc_ids):
        """Row positions of ``doc_ids``; unknown ids raise InvalidInputError."""
        ids = np.asarray(doc_ids, dtype=np.int64).astype(np.uint64)
        if ids.size == 0:
            return np.empty(0, dtype=np.int64)
        sorted_ids = self.doc_ids[self._sorter]
        pos = np.searchsorted(sorted_ids, ids)
        pos = np.minimum(pos, len(sorted_ids) - 1)
        missing = sorted_ids[pos] != ids
        if missing.any():
            raise InvalidInputError(
                f"unknown doc_ids: {sorted(set(ids[missing].tolist()))[:20]}"
            )
        return self._sorter[pos]

    def read_lengths(self, rows):
        """Bytes one read of each row transfers: record length, rounded up to the alignment."""
        return _align_up(self.byte_lengths[rows].astype(np.int64), self.alignment)

    def blocks(self, rows):
        """4 KiB-or-alignment blocks spanned by each row's record."""
        block = self.alignment if self.alignment > 1 else PAGE_SIZE
        start = self.byte_offsets[rows].astype(np.int64)
        end = start + self.byte_lengths[rows].astype(np.int64)
        return (end - 1) // block - start // block + 1

    def _records(self):
        rec = np.empty(self.count, dtype=_RECORD)
        rec["doc_id"] = self.doc_ids
        rec["byte_offset"] = self.byte_offsets
        rec["byte_length"] = self.byte_lengths
        rec["token_count"] = self.token_counts
        return rec

    def to_dict(self):
        return {
            "magic": MAGIC.decode(),
            "version": self.version,
            "d": self.d,
            "d_cls": self.d_cls,
            "value_width": self.value_width,
            "alignment": self.alignment,
            "count": self.count,
            "records": [
                {"doc_id": int(i), "byte_offset": int(o), "byte_length": int(n), "token_count": int(t)}
                for i, o, n, t in zip(
                    self.doc_ids, self.byte_offsets, self.byte_lengths, self.token_counts
                )
            ],
        }

    def save(self, path, json_path=None):
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    MAGIC, self.version, self.d, self.d_cls, self.value_width,
                    self.alignment, self.count,
                )
            )
            fh.write(self._records().tobytes())
        if json_path is not None:
            with open(json_path, "w", encoding="utf8") as fh:
                json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise FormatError(f"{path}: truncated manifest header")
        magic, version, d, d_cls, width, alignment, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if width not in WIDTHS or alignment not in ALIGNMENTS or d < 1 or d_cls < 1:
            raise FormatError(f"{path}: invalid header values")
        if len(data) != _HEADER.size + count * _RECORD.itemsize:
            raise FormatError(f"{path}: expected {count} records")
        rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=_HEADER.size)
        manifest = cls(
            d=d, d_cls=d_cls, value_width=width, alignment=alignment,
            doc_ids=rec["doc_id"].copy(), byte_offsets=rec["byte_offset"].copy(),
            byte_lengths=rec["byte_length"].copy(), token_counts=rec["token_count"].copy(),
            version=version,
        )
        manifest._check_layout(path)
        return manifest

    def _check_layout(self, path):
        expected = (self.d_cls + self.token_counts.astype(np.int64) * self.d) * self.value_width
        if not np.array_equal(expected, self.byte_lengths.astype(np.int64)):
            raise FormatError(f"{path}: record lengths disagree with token counts")
        if (self.token_counts == 0).any():
            raise FormatError(f"{path}: record with zero tokens")
        if len(np.unique(self.doc_ids)) != self.count:
            raise FormatError(f"{path}: duplicate doc ids")
        if self.alignment > 1 and (self.byte_offsets % self.alignment).any():
            raise FormatError(f"{path}: unaligned record offset")
        order = np.argsort(self.byte_offsets)
        ends = self.byte_offsets[order] + self.byte_lengths[order]
        if (ends[:-1] > self.byte_offsets[order][1:]).any():
            raise FormatError(f"{path}: overlapping records")


def build_store(docs, path, alignment=4096, value_width=2):
    """Write ``docs`` (pairs of ClsVector, EmbeddingMatrix) as a packed store.

    Returns the :class:`StoreManifest`, which is also written next to the
    data file in binary and JSON form.
    """
    if alignment not in ALIGNMENTS:
        raise InvalidInputError(f"alignment must be one of {ALIGNMENTS}, got {alignment}")
    if value_width not in WIDTHS:
        raise InvalidInputError(f"value_width must be 2 or 4, got {value_width}")
    dtype = WIDTHS[value_width]
    data_path, manifest_path, json_path = store_paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)

    ids, offsets, lengths, tcounts = [], [], [], []
    seen = set()
    d = d_cls = None
    pos = 0
    with open(data_path, "wb") as fh:
        for cls_vec, bow in docs:
            if cls_vec.doc_id != bow.doc_id:
                raise InvalidInputError(
                    f"CLS doc_id {cls_vec.doc_id} paired with BOW doc_id {bow.doc_id}"
                )
            if bow.doc_id in seen:
                raise InvalidInputError(f"duplicate doc_id {bow.doc_id}")
            seen.add(bow.doc_id)
            if d is None:
                d, d_cls = bow.dim, cls_vec.vector.shape[0]
            elif bow.dim != d or cls_vec.vector.shape[0] != d_cls:
                raise InvalidInputError(f"doc {bow.doc_id}: dimensions differ from the corpus")
            if value_width == 2 and (
                np.abs(cls_vec.vector).max() > _FP16_MAX or np.abs(bow.tokens).max() > _FP16_MAX
            ):
                raise InvalidInputError(f"doc {bow.doc_id}: values overflow fp16")
            payload = cls_vec.vector.astype(dtype).tobytes() + bow.tokens.astype(dtype).tobytes()
            start = _align_up(pos, alignment)
            if start > pos:
                fh.write(bytes(start - pos))
            fh.write(payload)
            pos = start + len(payload)
            ids.append(bow.doc_id)
            offsets.append(start)
            lengths.append(len(payload))
            tcounts.append(bow.n_tokens)
        end = _align_up(pos, alignment)
        if end > pos:
            fh.write(bytes(end - pos))
    if d is None:
        raise InvalidInputError("cannot build a store from zero documents")

    manifest = StoreManifest(
        d=d, d_cls=d_cls, value_width=value_width, alignment=alignment,
        doc_ids=np.array(ids, dtype=np.uint64), byte_offsets=np.array(offsets, dtype=np.uint64),
        byte_lengths=np.array(lengths, dtype=np.uint32), token_counts=np.array(tcounts, dtype=np.uint32),
    )
    manifest.save(manifest_path, json_path)
    logger.info("built store %s: %d docs, %d bytes", data_path, manifest.count, end)
    return manifest


@dataclass
class FetchResult:
    """Decoded records in request order plus I/O counters."""

    doc_ids: list
    cls: list
    docs: list
    blocks_read: int = 0
    bytes_read: int = 0
    wall_time: float = 0.0

    def __len__(self):
        return len(self.doc_ids)

    def __iter__(self):
        return iter(zip(self.cls, self.docs))


class StoreHandle:
    """Read handle over a built store; safe to share across threads.

    ``io_depth`` bounds how many reads are in flight at once per
    :meth:`fetch_batch` call.
    """

    def __init__(self, path, mode="buffered", io_depth=16):
        if mode not in MODES:
            raise InvalidConfigError(f"mode must be one of {MODES}, got {mode!r}")
        data_path, manifest_path, _ = store_paths(path)
        self.path = data_path
        self.mode = mode
        self.io_depth = max(1, int(io_depth))
        self.manifest = StoreManifest.load(manifest_path)
        if mode == "direct" and self.manifest.alignment < 512:
            raise InvalidConfigError(
                f"direct mode needs alignment >= 512, store has {self.manifest.alignment}"
            )
        self._dtype = WIDTHS[self.manifest.value_width]
        self._local = threading.local()
        self._mmap = None
        flags = os.O_RDONLY
        if mode == "direct":
            flags |= getattr(os, "O_DIRECT", 0)
        self._fd = os.open(self.path, flags)
        size = os.fstat(self._fd).st_size
        if self.manifest.count:
            last = int(np.max(self.manifest.byte_offsets + self.manifest.byte_lengths))
            if last > size:
                os.close(self._fd)
                raise FormatError(f"{self.path}: data file shorter than manifest ({size} < {last})")
        if mode == "mmap":
            self._mmap = mmap.mmap(self._fd, 0, access=mmap.ACCESS_READ)
            if hasattr(self._mmap, "madvise"):
                self._mmap.madvise(mmap.MADV_RANDOM)
        self._pool = ThreadPoolExecutor(max_workers=self.io_depth, thread_name_prefix="store-io")

    def close(self):
        self._pool.shutdown(wait=True)
        if self._mmap is not None:
            self._mmap.close()
            self._mmap = None
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _direct_buffer(self, size):
        buf = getattr(self._local, "buf", None)
        if buf is None or len(buf) < size:
            # anonymous mmap is page aligned, as O_DIRECT requires
            buf = mmap.mmap(-1, _align_up(size, PAGE_SIZE))
            self._local.buf = buf
        return buf

    def _read(self, offset, length):
        if self.mode == "mmap":
            raw = self._mmap[offset:offset + length]
        elif self.mode == "buffered":
            raw = os.pread(self._fd, length, offset)
        else:
            span = _align_up(length, self.manifest.alignment)
            buf = self._direct_buffer(span)
            got = os.preadv(self._fd, [memoryview(buf)[:span]], offset)
            if got < length:
                raise StoreIOError(f"short read at offset {offset}: {got} < {length}")
            raw = buf[:length]
        if len(raw) != length:
            raise StoreIOError(f"short read at offset {offset}: {len(raw)} < {length}")
        return raw

    def _decode(self, doc_id, raw, t):
        m = self.manifest
        values = np.frombuffer(raw, dtype=self._dtype).astype(np.float32)
        cls = ClsVector._trusted(doc_id, values[: m.d_cls])
        bow = EmbeddingMatrix._trusted(doc_id, values[m.d_cls:].reshape(t, m.d))
        return cls, bow

    def _read_rows(self, positions, rows, ids, out_cls, out_docs):
        m = self.manifest
        for pos, row, doc_id in zip(positions, rows, ids):
            raw = self._read(int(m.byte_offsets[row]), int(m.byte_lengths[row]))
            out_cls[pos], out_docs[pos] = self._decode(doc_id, raw, int(m.token_counts[row]))

    def fetch_batch(self, doc_ids):
        """Read and decode ``doc_ids``; results keep request order.

        Reads are spread over up to ``io_depth`` concurrent workers.
        Duplicate ids are read once per occurrence.
        """
        if self._fd is None:
            raise InvalidConfigError("store handle is closed")
        start = time.perf_counter()
        ids = [int(i) for i in doc_ids]
        rows = self.manifest.lookup(ids)
        n = len(ids)
        out_cls, out_docs = [None] * n, [None] * n
        if n:
            n_chunks = min(self.io_depth, n)
            chunks = np.array_split(np.arange(n), n_chunks)
            futures = [
                self._pool.submit(
                    self._read_rows, chunk, rows[chunk], [ids[i] for i in chunk], out_cls, out_docs
                )
                for chunk in chunks
            ]
            for f in futures:
                f.result()
        if self.mode == "direct":
            nbytes = int(self.manifest.read_lengths(rows).sum()) if n else 0
        else:
            nbytes = int(self.manifest.byte_lengths[rows].astype(np.int64).sum()) if n else 0
        return FetchResult(
            doc_ids=ids,
            cls=out_cls,
            docs=out_docs,
            blocks_read=int(self.manifest.blocks(rows).sum()) if n else 0,
            bytes_read=nbytes,
            wall_time=time.perf_counter() - start,
        )


def open_store(path, mode="buffered", io_depth=16):
    return StoreHandle(path, mode=mode, io_depth=io_depth)
