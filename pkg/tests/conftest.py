import pytest

from speechqa.dpr.corpus import Corpus
from tests.base import tiny_corpus


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    """A tiny generated corpus, shared by all tests that only read it."""
    return tiny_corpus()
