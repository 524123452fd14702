"""Edge-mask explanations: gradients, recovery of planted paths, exports."""

import math
import re

import numpy as np
import pytest

from hypograph.explain import (
    ExplainConfig,
    ExplainError,
    Explanation,
    computation_subgraph,
    explain_edge,
    export_explanation,
    _objective_and_grads,
)
from hypograph.kg import Edge, KnowledgeGraph, NodeId, Provenance
from hypograph.linkpred import LinkModel, TrainConfig, gcn_forward, normalize_adjacency


def n(text):
    return NodeId.parse(text)


def make_graph(pairs, extra_nodes=()):
    graph = KnowledgeGraph()
    for a, b in pairs:
        graph.add_edge(Edge(n(a), "-linked-", n(b), Provenance.KNOWLEDGE_BASE))
    for name in extra_nodes:
        graph.nodes.add(n(name))
    return graph


def planted_model(graph, w_node, c=10.0):
    """Hand-set weights whose output provably flows through w_node.

    With identity features, a one-hot first layer and a scalar second
    layer, node i embeds to c times the two-step propagation weight from
    i to w_node. The target score is then driven entirely by paths
    through w_node.
    """
    nodes = graph.sorted_nodes()
    index = {node: i for i, node in enumerate(nodes)}
    x = np.eye(len(nodes))
    w1 = np.zeros((len(nodes), 1))
    w1[index[w_node], 0] = 1.0
    w2 = np.array([[float(c)]])
    model = LinkModel(w1=w1, w2=w2, threshold=0.5,
                      config=TrainConfig(hidden=1, out=1), nodes=tuple(nodes))
    return model, x


def planted_graph(seed, noise_nodes=12, noise_edges=15):
    """u-w-v path plus random clutter that avoids u/w and w/v shortcuts."""
    rng = np.random.default_rng(seed)
    names = [f"p:n{i:02d}" for i in range(noise_nodes)]
    pairs = [("p:u", "p:w"), ("p:w", "p:v")]
    seen = set()
    while len(seen) < noise_edges:
        i = int(rng.integers(noise_nodes))
        j = int(rng.integers(noise_nodes))
        if i != j and (min(i, j), max(i, j)) not in seen:
            seen.add((min(i, j), max(i, j)))
            pairs.append((names[min(i, j)], names[max(i, j)]))
    for anchor in ("p:u", "p:v"):
        for k in rng.choice(noise_nodes, size=2, replace=False):
            pairs.append((anchor, names[int(k)]))
    return make_graph(pairs)


PATH = [("x:a", "x:b"), ("x:b", "x:c"), ("x:c", "x:d"), ("x:d", "x:e")]


class TestComputationSubgraph:
    def test_star_from_center(self):
        graph = make_graph([("s:hub", f"s:leaf{i}") for i in range(5)])
        sub = computation_subgraph(graph, (n("s:hub"), n("s:leaf0")), 1)
        assert sub.nodes == graph.nodes
        assert len(sub.edges) == 5

    def test_path_union_covers_both_balls(self):
        graph = make_graph(PATH)
        sub = computation_subgraph(graph, (n("x:a"), n("x:e")), 2)
        assert sub.nodes == graph.nodes
        assert len(sub.edges) == 4

    def test_isolated_endpoints(self):
        graph = make_graph(PATH, extra_nodes=["x:lone", "x:lone2"])
        sub = computation_subgraph(graph, (n("x:lone"), n("x:lone2")), 2)
        assert sub.nodes == {n("x:lone"), n("x:lone2")}
        assert len(sub.edges) == 0

    def test_unknown_endpoint(self):
        graph = make_graph(PATH)
        with pytest.raises(ExplainError):
            computation_subgraph(graph, (n("x:a"), n("x:ghost")), 2)


class TestMaskGradients:
    def test_matches_finite_differences(self):
        graph = make_graph(PATH + [("x:b", "x:d")])
        nodes = graph.sorted_nodes()
        index = {node: i for i, node in enumerate(nodes)}
        a_base = np.zeros((len(nodes), len(nodes)))
        for edge in graph.edges.values():
            i, j = index[edge.head], index[edge.tail]
            a_base[i, j] = a_base[j, i] = 1.0
        pairs = np.array([(index[min(e.head, e.tail)],
                           index[max(e.head, e.tail)])
                          for e in graph.edges.values()])
        rng = np.random.default_rng(41)
        for point in range(20):
            x = rng.normal(size=(len(nodes), 3))
            w1 = rng.normal(size=(3, 4))
            w2 = rng.normal(size=(4, 2))
            theta = rng.normal(scale=1.5, size=len(pairs))
            args = (w1, w2, x, a_base, pairs, index[n("x:a")],
                    index[n("x:e")], 0.005, 1.0)

            obj, grad, _ = _objective_and_grads(theta, *args)
            assert math.isfinite(obj)
            fd = np.zeros_like(theta)
            h = 1e-6
            for e in range(len(theta)):
                up, down = theta.copy(), theta.copy()
                up[e] += h
                down[e] -= h
                fd[e] = (_objective_and_grads(up, *args)[0]
                         - _objective_and_grads(down, *args)[0]) / (2 * h)
            scale = max(np.linalg.norm(grad), np.linalg.norm(fd))
            assert np.linalg.norm(grad - fd) <= 1e-4 * scale + 1e-8


@pytest.fixture(scope="module")
def planted():
    graph = planted_graph(0)
    model, x = planted_model(graph, n("p:w"))
    expl = explain_edge(model, graph, (n("p:u"), n("p:v")), 10, features=x)
    return graph, model, x, expl


class TestExplainEdge:
    def test_scores_in_open_interval(self, planted):
        _, _, _, expl = planted
        target = tuple(sorted((n("p:u"), n("p:v"))))
        for pair, score in expl.edge_scores.items():
            if pair == target:
                continue
            assert 0.0 < score < 1.0

    def test_target_listed_at_one_and_not_ranked(self, planted):
        _, _, _, expl = planted
        target = tuple(sorted((n("p:u"), n("p:v"))))
        assert expl.edge_scores[target] == 1.0
        assert all(pair != target for pair, _ in expl.top_k)

    def test_top_k_descending_and_bounded(self, planted):
        _, _, _, expl = planted
        scores = [s for _, s in expl.top_k]
        assert scores == sorted(scores, reverse=True)
        assert len(expl.top_k) <= 10

    def test_k_zero_keeps_scores(self, planted):
        graph, model, x, _ = planted
        expl = explain_edge(model, graph, (n("p:u"), n("p:v")), 0, features=x)
        assert expl.top_k == []
        assert len(expl.edge_scores) > 1

    def test_k_exceeding_edges_returns_all(self, planted):
        graph, model, x, expl_ten = planted
        expl = explain_edge(model, graph, (n("p:u"), n("p:v")), 10_000,
                            features=x)
        assert len(expl.top_k) == len(expl.edge_scores) - 1

    def test_top_k_prefix_property(self, planted):
        graph, model, x, _ = planted
        target = (n("p:u"), n("p:v"))
        for k in (1, 3, 5):
            small = explain_edge(model, graph, target, k, features=x)
            big = explain_edge(model, graph, target, k + 1, features=x)
            assert big.top_k[:k] == small.top_k

    def test_deterministic_rerun(self, planted):
        graph, model, x, first = planted
        second = explain_edge(model, graph, (n("p:u"), n("p:v")), 10,
                              features=x)
        assert first.edge_scores == second.edge_scores
        assert first.top_k == second.top_k
        assert first.predicted_probability == second.predicted_probability

    def test_unknown_endpoint(self, planted):
        graph, model, x, _ = planted
        with pytest.raises(ExplainError):
            explain_edge(model, graph, (n("p:u"), n("p:ghost")), 5, features=x)

    def test_probability_reported_from_unmasked_graph(self, planted):
        graph, model, x, expl = planted
        a_hat = normalize_adjacency(graph)
        z = gcn_forward(model.w1, model.w2, x, a_hat)
        nodes = graph.sorted_nodes()
        index = {node: i for i, node in enumerate(nodes)}
        s = float(z[index[n("p:u")]] @ z[index[n("p:v")]])
        expected = 1.0 / (1.0 + math.exp(-s))
        assert expl.predicted_probability == pytest.approx(expected, abs=1e-12)

    def test_sparsity_pressure_shrinks_masks(self, planted):
        graph, model, x, _ = planted
        target = (n("p:u"), n("p:v"))
        loose = explain_edge(model, graph, target, 10,
                             ExplainConfig(lambda_sparsity=0.0), features=x)
        tight = explain_edge(model, graph, target, 10,
                             ExplainConfig(lambda_sparsity=0.5), features=x)
        t = tuple(sorted(target))

        def mean_mask(expl):
            vals = [s for pair, s in expl.edge_scores.items() if pair != t]
            return sum(vals) / len(vals)

        assert mean_mask(tight) < mean_mask(loose)

    def test_non_finite_objective_reports_iteration(self, planted):
        graph, _, x, _ = planted
        nodes = graph.sorted_nodes()
        w1 = np.full((len(nodes), 1), np.nan)
        broken = LinkModel(w1=w1, w2=np.array([[1.0]]), threshold=0.5,
                           config=TrainConfig(hidden=1, out=1),
                           nodes=tuple(nodes))
        with pytest.raises(ExplainError, match="iteration"):
            explain_edge(broken, graph, (n("p:u"), n("p:v")), 5, features=x)


class TestPlantedRecovery:
    def test_planted_path_edges_recovered(self):
        hits = 0
        for seed in range(20):
            graph = planted_graph(seed)
            model, x = planted_model(graph, n("p:w"))
            expl = explain_edge(model, graph, (n("p:u"), n("p:v")), 10,
                                features=x)
            top_pairs = {pair for pair, _ in expl.top_k}
            want_a = tuple(sorted((n("p:u"), n("p:w"))))
            want_b = tuple(sorted((n("p:w"), n("p:v"))))
            if want_a in top_pairs and want_b in top_pairs:
                hits += 1
        assert hits >= 18

    def test_faithfulness_of_top_score(self, planted):
        graph, model, x, expl = planted

        def probability_without(drop_pair):
            trimmed = KnowledgeGraph()
            trimmed.nodes.update(graph.nodes)
            for edge in graph.edges.values():
                pair = tuple(sorted((edge.head, edge.tail)))
                if pair != drop_pair:
                    trimmed.add_edge(edge)
            a_hat = normalize_adjacency(trimmed)
            z = gcn_forward(model.w1, model.w2, x, a_hat)
            nodes = trimmed.sorted_nodes()
            index = {node: i for i, node in enumerate(nodes)}
            s = float(z[index[n("p:u")]] @ z[index[n("p:v")]])
            return 1.0 / (1.0 + math.exp(-s))

        base = expl.predicted_probability
        ranked = [pair for pair, _ in expl.top_k]
        top_delta = abs(base - probability_without(ranked[0]))
        t = tuple(sorted((n("p:u"), n("p:v"))))
        bottom_pair = min(
            ((pair, s) for pair, s in expl.edge_scores.items() if pair != t),
            key=lambda item: item[1])[0]
        bottom_delta = abs(base - probability_without(bottom_pair))
        assert top_delta >= bottom_delta


# ------------------------------------------------------------------ export

def check_dot(text):
    """Minimal DOT grammar check: graph ID { stmt* } with quoted node ids,
    -- edges, and well-formed attribute lists."""
    tokens = re.findall(
        r'"(?:[^"\\]|\\.)*"|--|[{}\[\];,=]|[A-Za-z_][A-Za-z0-9_]*'
        r'|[-+]?[0-9.]+', text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take(expected=None):
        nonlocal pos
        if pos >= len(tokens):
            raise AssertionError("unexpected end of DOT input")
        tok = tokens[pos]
        if expected is not None and tok != expected:
            raise AssertionError(f"expected {expected!r}, found {tok!r}")
        pos += 1
        return tok

    def is_id(tok):
        return tok is not None and tok not in "{}[];,=" and tok != "--"

    def attr_list():
        take("[")
        while peek() != "]":
            assert is_id(take()), "attribute name"
            take("=")
            assert is_id(take()), "attribute value"
            if peek() == ",":
                take(",")
        take("]")

    take("graph")
    if is_id(peek()):
        take()
    take("{")
    while peek() != "}":
        first = take()
        assert is_id(first), f"statement must start with an id, got {first!r}"
        if peek() == "--":
            take("--")
            assert is_id(take()), "edge target"
        if peek() == "[":
            attr_list()
        take(";")
    take("}")
    assert pos == len(tokens), "trailing tokens after closing brace"


class TestExport:
    def test_tsv_rows_and_target_last(self, planted, tmp_path):
        _, _, _, expl = planted
        tsv_path, dot_path = export_explanation(expl, tmp_path)
        lines = tsv_path.read_text().strip().split("\n")
        assert lines[0] == "head\ttail\tscore"
        assert len(lines) == len(expl.edge_scores) + 1
        last = lines[-1].split("\t")
        assert last == ["p:u", "p:v", "1.0"]
        scores = [float(line.split("\t")[2]) for line in lines[1:-1]]
        assert scores == sorted(scores, reverse=True)

    def test_file_name_pattern(self, planted, tmp_path):
        _, _, _, expl = planted
        tsv_path, dot_path = export_explanation(expl, tmp_path)
        assert tsv_path.name == "p:u_p:v_edge_importance.tsv"
        assert dot_path.name == "p:u_p:v_edge_importance.dot"

    def test_three_edge_explanation_writes_four_rows(self, tmp_path):
        graph = make_graph(PATH[:3])
        expl = Explanation(
            target=(n("x:a"), n("x:d")),
            predicted_probability=0.75,
            edge_scores={
                tuple(sorted((n("x:a"), n("x:b")))): 0.9,
                tuple(sorted((n("x:b"), n("x:c")))): 0.8,
                tuple(sorted((n("x:c"), n("x:d")))): 0.7,
                tuple(sorted((n("x:a"), n("x:d")))): 1.0,
            },
            top_k=[(tuple(sorted((n("x:a"), n("x:b")))), 0.9)],
            computation_subgraph=graph)
        tsv_path, _ = export_explanation(expl, tmp_path)
        lines = tsv_path.read_text().strip().split("\n")
        assert len(lines) == 5  # header + 3 scored + target

    def test_equal_scores_fall_back_to_lexicographic(self, tmp_path):
        graph = make_graph(PATH[:3])
        same = 0.5
        expl = Explanation(
            target=(n("x:a"), n("x:d")),
            predicted_probability=0.6,
            edge_scores={
                tuple(sorted((n("x:c"), n("x:d")))): same,
                tuple(sorted((n("x:a"), n("x:b")))): same,
                tuple(sorted((n("x:b"), n("x:c")))): same,
                tuple(sorted((n("x:a"), n("x:d")))): 1.0,
            },
            top_k=[],
            computation_subgraph=graph)
        tsv_path, _ = export_explanation(expl, tmp_path)
        lines = tsv_path.read_text().strip().split("\n")[1:-1]
        heads = [line.split("\t")[0] for line in lines]
        tails = [line.split("\t")[1] for line in lines]
        assert list(zip(heads, tails)) == sorted(zip(heads, tails))

    def test_dot_output_parses(self, planted, tmp_path):
        _, _, _, expl = planted
        _, dot_path = export_explanation(expl, tmp_path)
        text = dot_path.read_text()
        check_dot(text)
        assert "style=dashed" in text
        assert f"{expl.predicted_probability:.4f}" in text

    def test_dot_pen_width_tracks_score(self, planted, tmp_path):
        _, _, _, expl = planted
        _, dot_path = export_explanation(expl, tmp_path)
        widths = {}
        for line in dot_path.read_text().split("\n"):
            m = re.match(r'\s*"([^"]+)" -- "([^"]+)" \[penwidth=([0-9.]+)', line)
            if m and "dashed" not in line:
                widths[(m.group(1), m.group(2))] = float(m.group(3))
        ranked = sorted(expl.edge_scores.items(), key=lambda kv: -kv[1])
        t = tuple(sorted(expl.target))
        ordered = [(str(a), str(b)) for (a, b), _ in ranked if (a, b) != t]
        got = [widths[pair] for pair in ordered if pair in widths]
        assert len(got) == len(ordered)
        assert got == sorted(got, reverse=True)
