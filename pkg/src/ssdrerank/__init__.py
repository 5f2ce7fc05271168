"""Late-interaction retrieval with an in-memory IVF index and SSD-resident token embeddings."""

from .bandwidth import (
    AnnTimeTable,
    BudgetInputs,
    SsdProfile,
    batch_threshold,
    bytes_per_query,
    index_size_estimate,
    prefetch_budget,
    prefetch_step,
)
from .core import (
    ClsVector,
    EmbeddingMatrix,
    QueryEmbedding,
    RankedList,
    aggregate_score,
    maxsim_score,
    mrr_at_k,
    rank,
    recall_at_k,
)
from .corpus import CorpusSpec, generate_corpus, read_corpus, write_corpus
from .exceptions import (
    DataIntegrityError,
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    QueryError,
    SsdRerankError,
    StoreIOError,
)
from .ivf import IVFIndex, SearchCursor
from .pipeline import LateInteractionRetriever, PipelineConfig, QueryStats, measure_hit_rate, run_batch, run_query
from .store import StoreHandle, StoreManifest, build_store, open_store

__version__ = "0.1.0"

__all__ = [
    "AnnTimeTable",
    "BudgetInputs",
    "ClsVector",
    "CorpusSpec",
    "DataIntegrityError",
    "EmbeddingMatrix",
    "FormatError",
    "IVFIndex",
    "InvalidConfigError",
    "InvalidInputError",
    "InvalidStateError",
    "LateInteractionRetriever",
    "PipelineConfig",
    "QueryEmbedding",
    "QueryError",
    "QueryStats",
    "RankedList",
    "SearchCursor",
    "SsdProfile",
    "SsdRerankError",
    "StoreHandle",
    "StoreIOError",
    "StoreManifest",
    "aggregate_score",
    "batch_threshold",
    "build_store",
    "bytes_per_query",
    "generate_corpus",
    "index_size_estimate",
    "maxsim_score",
    "measure_hit_rate",
    "mrr_at_k",
    "open_store",
    "prefetch_budget",
    "prefetch_step",
    "rank",
    "read_corpus",
    "recall_at_k",
    "run_batch",
    "run_query",
    "write_corpus",
]
