import os
from pathlib import Path

import pytest

from app.core.config import DEFAULT_DICTIONARY
from app.core.domains import DomainParser
from app.schemas.filters import FilterList
from app.schemas.labels import LabeledDataset
from app.services.feature_service import load_dictionary
from app.services.filterlist_service import parse_list
from app.services.labeler_service import label_dataset
from app.tests.corpus import FILTER_TEXT, Corpus, CorpusFiles, make_corpus


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    # Keep the developer's CLOAKWATCH_* variables and .env out of the tests.
    for name in list(os.environ):
        if name.startswith("CLOAKWATCH_"):
            monkeypatch.delenv(name)
    monkeypatch.chdir(tmp_path)


@pytest.fixture(scope="session")
def parser() -> DomainParser:
    return DomainParser()


@pytest.fixture(scope="session")
def dictionary() -> frozenset[str]:
    return load_dictionary(DEFAULT_DICTIONARY)


@pytest.fixture(scope="session")
def tracker_list() -> FilterList:
    return parse_list(FILTER_TEXT, "trackers")


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return make_corpus()


@pytest.fixture
def corpus_files(tmp_path, corpus) -> CorpusFiles:
    return corpus.write(tmp_path / "input")


@pytest.fixture(scope="session")
def labeled_corpus(corpus, tracker_list, parser) -> LabeledDataset:
    return label_dataset(corpus.sites, corpus.offline_resolver(), tracker_list, parser)


@pytest.fixture
def write_lines(tmp_path):
    def _write(name: str, lines: list[str]) -> Path:
        path = tmp_path / name
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    return _write
