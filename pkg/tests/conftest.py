import pytest

from ssdrerank.corpus import CorpusSpec, generate_corpus
from ssdrerank.ivf import IVFIndex
from ssdrerank.store import build_store, open_store


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusSpec(n_docs=2000, n_queries=30, seed=3))


@pytest.fixture(scope="session")
def small_index(small_corpus):
    return IVFIndex(nlist=40, random_state=0).fit(small_corpus.cls, doc_ids=small_corpus.doc_ids)


@pytest.fixture(scope="session")
def small_store_path(small_corpus, tmp_path_factory):
    path = tmp_path_factory.mktemp("pipeline") / "store"
    build_store(small_corpus.iter_docs(), path, alignment=4096, value_width=2)
    return path


@pytest.fixture
def small_store(small_store_path):
    with open_store(small_store_path, "buffered") as handle:
        yield handle


# criterion number -> {part name: (passed, detail)}
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(criterion, part, passed, detail=""):
        ACCEPTANCE.setdefault(criterion, {})[part] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[criterion]
        ok = all(p for p, _ in parts.values())
        detail = "; ".join(f"{name}: {d}" for name, (_, d) in parts.items() if d)
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
