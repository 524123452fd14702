"""PNG rendering smoke tests: valid files, no leaked figures."""

from pathlib import Path

import matplotlib.pyplot as plt
import pytest

from hypograph.explain import Explanation
from hypograph.kg import KnowledgeGraph, NodeId, Provenance, load_edge_list
from hypograph.linkpred import TrainConfig, train
from hypograph.viz import explanation_figure, training_figure

DATA = Path(__file__).parent / "data"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def node(text):
    return NodeId.parse(text)


@pytest.fixture
def explanation():
    head, tail = node("DrugBank_Compound:DB00335"), node("MeSH_Disease:D002311")
    scored = {
        (node("ATC_Class:C07"), node("DrugBank_Compound:DB00335")): 0.91,
        (node("DrugBank_Compound:DB00264"), node("MeSH_Disease:D002311")):
            0.64,
        (node("DrugBank_Compound:DB00264"), node("UniProt:P08588")): 0.33,
        (head, tail): 1.0,
    }
    sub = load_edge_list(DATA / "fixture_kg.tsv", Provenance.KNOWLEDGE_BASE)
    ranked = sorted(((pair, s) for pair, s in scored.items()
                     if pair != (head, tail)), key=lambda item: -item[1])
    return Explanation(target=(head, tail), predicted_probability=0.82,
                       edge_scores=scored, top_k=ranked,
                       computation_subgraph=sub)


def test_explanation_png(tmp_path, explanation):
    out = explanation_figure(explanation, tmp_path / "expl.png")
    assert out.exists()
    assert out.read_bytes().startswith(PNG_MAGIC)
    assert plt.get_fignums() == []


def test_explanation_png_no_context_edges(tmp_path, explanation):
    bare = Explanation(target=explanation.target,
                       predicted_probability=0.5,
                       edge_scores={explanation.target: 1.0}, top_k=[],
                       computation_subgraph=KnowledgeGraph())
    out = explanation_figure(bare, tmp_path / "bare.png")
    assert out.read_bytes().startswith(PNG_MAGIC)


def test_training_report_png(tmp_path):
    graph = load_edge_list(DATA / "fixture_kg.tsv",
                           Provenance.KNOWLEDGE_BASE)
    result = train(graph, None, TrainConfig(epochs=40, seed=0))
    out = training_figure(result, tmp_path / "report.png")
    assert out.exists()
    assert out.read_bytes().startswith(PNG_MAGIC)
    assert plt.get_fignums() == []
