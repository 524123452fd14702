from pathlib import Path

import pytest

from hypograph.kg import Provenance, load_edge_list

DATA_DIR = Path(__file__).parent / "data"
CORPUS_DIR = DATA_DIR / "cypher_corpus"
GOLDEN_DIR = DATA_DIR / "cypher_golden"


def corpus_names() -> list[str]:
    return sorted(p.stem for p in CORPUS_DIR.glob("*.cypher"))


def corpus_query(name: str) -> str:
    return (CORPUS_DIR / f"{name}.cypher").read_text()


def golden_table(name: str) -> str:
    return (GOLDEN_DIR / f"{name}.tsv").read_text()


@pytest.fixture(scope="session")
def fixture_graph():
    return load_edge_list(DATA_DIR / "fixture_kg.tsv", Provenance.KNOWLEDGE_BASE)
