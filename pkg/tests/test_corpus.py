import json

import numpy as np
import pytest

from ssdrerank.corpus import CorpusSpec, generate_corpus, read_corpus, write_corpus
from ssdrerank.exceptions import FormatError, InvalidInputError
from ssdrerank.ivf import IVFIndex


def test_same_seed_same_bytes(tmp_path):
    spec = CorpusSpec(n_docs=10, n_queries=3, seed=11)
    a = write_corpus(generate_corpus(spec), tmp_path / "a", spec=spec)
    b = write_corpus(generate_corpus(spec), tmp_path / "b", spec=spec)
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_different_seed_differs():
    a = generate_corpus(CorpusSpec(n_docs=10, n_queries=0, seed=1))
    b = generate_corpus(CorpusSpec(n_docs=10, n_queries=0, seed=2))
    assert a.cls.tobytes() != b.cls.tobytes()


def test_noiseless_query_finds_source():
    spec = CorpusSpec(n_docs=2000, n_queries=50, query_noise=0.0, query_token_noise=0.0, seed=4)
    corpus = generate_corpus(spec)
    index = IVFIndex(nlist=16).fit(corpus.cls, doc_ids=corpus.doc_ids)
    for q in corpus.queries:
        (source,) = corpus.qrels[q.query_id]
        top = index.search(q.cls, nprobe=16, k=1)
        assert int(top.doc_ids[0]) == source


def test_shapes_and_norms():
    spec = CorpusSpec(n_docs=200, min_tokens=3, max_tokens=5, n_queries=4, seed=0)
    c = generate_corpus(spec)
    assert c.cls.shape == (200, spec.d_cls) and c.cls.dtype == np.float32
    assert c.token_counts.min() >= 3 and c.token_counts.max() <= 5
    assert c.tokens.shape == (c.token_counts.sum(), spec.d)
    np.testing.assert_allclose(np.linalg.norm(c.cls, axis=1), 1.0, rtol=1e-5)
    assert [b.n_tokens for _, b in c.iter_docs()] == c.token_counts.tolist()


@pytest.mark.parametrize("dtype", ["float32", "float16"])
def test_roundtrip(tmp_path, dtype):
    c = generate_corpus(CorpusSpec(n_docs=50, n_queries=5, seed=2))
    write_corpus(c, tmp_path, dtype=dtype)
    back = read_corpus(tmp_path)
    cast = np.float32 if dtype == "float32" else np.float16
    assert back.cls.tobytes() == c.cls.astype(cast).astype(np.float32).tobytes()
    assert back.tokens.tobytes() == c.tokens.astype(cast).astype(np.float32).tobytes()
    assert back.qrels == {k: set(v) for k, v in c.qrels.items()}
    assert [q.query_id for q in back.queries] == [q.query_id for q in c.queries]


def test_zero_token_doc_rejected(tmp_path):
    write_corpus(generate_corpus(CorpusSpec(n_docs=5, n_queries=0)), tmp_path)
    meta = json.loads((tmp_path / "corpus.json").read_text())
    meta["token_counts"][0] = 0
    (tmp_path / "corpus.json").write_text(json.dumps(meta))
    with pytest.raises(InvalidInputError):
        read_corpus(tmp_path)


def test_truncated_binary(tmp_path):
    write_corpus(generate_corpus(CorpusSpec(n_docs=5, n_queries=0)), tmp_path)
    raw = (tmp_path / "cls.bin").read_bytes()
    (tmp_path / "cls.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_corpus(tmp_path)


@pytest.mark.parametrize(
    "kwargs", [{"n_docs": 0}, {"min_tokens": 5, "max_tokens": 4}, {"noise": -1.0}, {"n_queries": 20, "n_docs": 10}]
)
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidInputError):
        CorpusSpec(**kwargs)
