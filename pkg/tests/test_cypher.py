"""Query language: lexing, parsing, validation, execution, goldens."""

import random

import pytest

from hypograph.cypher import (
    CypherError,
    Diagnostics,
    execute,
    parse,
    pretty_print,
    run_query,
    validate,
)
from hypograph.kg import Edge, KnowledgeGraph, NodeId, Provenance

from conftest import corpus_names, corpus_query, golden_table


def tiny_graph(triples):
    g = KnowledgeGraph()
    for h, r, t in triples:
        g.add_edge(Edge(NodeId.parse(h), r, NodeId.parse(t),
                        Provenance.KNOWLEDGE_BASE))
    return g


class TestParse:
    def test_smoke_query_shape(self):
        ast = parse("MATCH (n) RETURN n LIMIT 5")
        branch = ast.branches[0]
        assert len(ast.branches) == 1
        assert len(branch.clauses) == 1
        clause = branch.clauses[0]
        assert not clause.optional
        assert clause.pattern.nodes[0].var == "n"
        assert clause.pattern.nodes[0].label is None
        assert branch.returns.limit == 5

    def test_empty_input_position(self):
        with pytest.raises(CypherError) as err:
            parse("")
        assert err.value.diagnostics.kind == "parse"
        assert err.value.diagnostics.position.offset == 0

    def test_backtick_relation_is_one_token(self):
        ast = parse("MATCH (a)-[:`-treats->`]->(b) RETURN a")
        rel = ast.branches[0].clauses[0].pattern.rels[0]
        assert rel.types == ("-treats->",)
        assert rel.direction == "out"

    def test_relation_alternation_mixes_quoting(self):
        ast = parse("MATCH (a)-[r:interacts_with|`-ppi-`]->(b) RETURN a")
        rel = ast.branches[0].clauses[0].pattern.rels[0]
        assert rel.types == ("interacts_with", "-ppi-")

    def test_line_comments_ignored(self):
        ast = parse("// intro\nMATCH (n) // trailing\nRETURN n")
        assert len(ast.branches[0].clauses) == 1

    def test_keywords_case_insensitive(self):
        a = parse("match (n) where n.name = 'X:1' return n.name as Name order by Name desc limit 2")
        b = parse("MATCH (n) WHERE n.name = 'X:1' RETURN n.name AS Name ORDER BY Name DESC LIMIT 2")
        assert a == b

    def test_trailing_semicolon(self):
        assert parse("RETURN 1;") == parse("RETURN 1")

    def test_corpus_parses(self):
        for name in corpus_names():
            parse(corpus_query(name))

    def test_error_position_points_at_offending_token(self):
        query = "MATCH (n RETURN n"
        with pytest.raises(CypherError) as err:
            parse(query)
        assert err.value.diagnostics.position.offset == query.index("RETURN")

    @pytest.mark.parametrize("bad", [
        "CREATE (n) RETURN n",
        "MATCH (a)-[*1..3]->(b) RETURN a",
        "MATCH (n {name: 'x'}) RETURN n",
        "MATCH (n) RETURN n SKIP 2",
        "MATCH (n)",
    ])
    def test_out_of_subset_is_parse_error(self, bad):
        with pytest.raises(CypherError) as err:
            parse(bad)
        assert err.value.diagnostics.kind in ("lex", "parse")

    def test_unterminated_string_is_lex_error(self):
        with pytest.raises(CypherError) as err:
            parse("MATCH (n) WHERE n.name = 'oops RETURN n")
        assert err.value.diagnostics.kind == "lex"


class TestValidate:
    def test_unbound_variable_named(self):
        diag = validate("MATCH (n) RETURN m")
        assert diag is not None
        assert diag.kind == "bind"
        assert "'m'" in diag.message

    def test_plain_literal_return_ok(self):
        assert validate("RETURN 1") is None

    def test_parse_error_surface(self):
        diag = validate("MATCH (n RETURN n")
        assert diag is not None and diag.kind == "parse"

    def test_corpus_validates(self):
        for name in corpus_names():
            assert validate(corpus_query(name)) is None, name

    def test_union_column_mismatch(self):
        diag = validate("RETURN 1 AS a UNION ALL RETURN 1 AS b")
        assert diag is not None and diag.kind == "type"

    def test_aggregate_in_where(self):
        diag = validate("MATCH (n) WHERE COUNT(n) = 1 RETURN n")
        assert diag is not None and diag.kind == "type"

    def test_aggregate_nested_in_expression(self):
        diag = validate("MATCH (n) RETURN n.name = COLLECT(n.name) AS x")
        assert diag is not None and diag.kind == "type"

    def test_order_by_must_use_output_columns(self):
        diag = validate("MATCH (n) RETURN n.name AS Name ORDER BY n")
        assert diag is not None and diag.kind == "bind"

    def test_unknown_property_flagged(self):
        diag = validate("MATCH (n) RETURN n.id AS x")
        assert diag is not None and diag.kind == "type"
        assert "name" in (diag.suggestion or "")


class TestExecute:
    def test_limit_exceeding_size(self):
        g = tiny_graph([("A:1", "r", "A:2"), ("A:2", "r", "A:3")])
        table = run_query("MATCH (n) RETURN n LIMIT 5", g)
        assert len(table.rows) == 3

    def test_optional_match_yields_empty_collection(self):
        # one treated disease, one untreated: the untreated row keeps an
        # empty Compounds list instead of disappearing
        g = tiny_graph([
            ("DrugBank_Compound:DB00264", "-treats->", "MeSH_Disease:D002312"),
            ("MeSH_Disease:D002311", "-is_a->", "MeSH_Tree_Disease:C14"),
        ])
        table = run_query(
            "WITH ['DrugBank_Compound:DB00264'] AS drugList "
            "MATCH (disease:MeSH_Disease) "
            "WHERE disease.name IN ['MeSH_Disease:D002312','MeSH_Disease:D002311'] "
            "OPTIONAL MATCH (m)-[:`-treats->`]->(disease) WHERE m.name IN drugList "
            "RETURN disease.name AS Disease, COLLECT(DISTINCT m.name) AS Compounds",
            g)
        assert table.columns == ["Disease", "Compounds"]
        rows = {row[0]: row[1] for row in table.rows}
        assert rows == {
            "MeSH_Disease:D002312": ["DrugBank_Compound:DB00264"],
            "MeSH_Disease:D002311": [],
        }

    def test_count_and_order_desc_pick_top_degree(self):
        g = tiny_graph([
            ("DrugBank_Compound:DB1", "a", "X:1"),
            ("DrugBank_Compound:DB1", "b", "X:2"),
            ("X:3", "c", "DrugBank_Compound:DB1"),
            ("DrugBank_Compound:DB2", "a", "X:1"),
        ])
        table = run_query(
            "MATCH (d:DrugBank_Compound)-[r]-() "
            "RETURN d.name AS Drug, COUNT(r) AS Connections "
            "ORDER BY Connections DESC LIMIT 1", g)
        assert table.rows == [("DrugBank_Compound:DB1", 3)]

    def test_undirected_rel_matches_both_directions(self):
        g = tiny_graph([("A:1", "r", "B:1"), ("B:2", "r", "A:1")])
        table = run_query("MATCH (a)-[r]-(b) WHERE a.name = 'A:1' "
                          "RETURN COUNT(r) AS c", g)
        assert table.rows == [(2,)]

    def test_unknown_label_empty_not_error(self):
        g = tiny_graph([("A:1", "r", "B:1")])
        table = run_query("MATCH (n:Nonexistent) RETURN n", g)
        assert table.rows == []

    def test_contains_and_any(self):
        g = tiny_graph([("DrugBank_Compound:DB00264", "r", "X:1")])
        table = run_query(
            "MATCH (d:DrugBank_Compound) "
            "WHERE any(key IN ['DB00264', 'DB09999'] WHERE d.name CONTAINS key) "
            "RETURN d.name AS name", g)
        assert table.rows == [("DrugBank_Compound:DB00264",)]

    def test_type_mismatch_excludes_row_with_warning(self):
        g = tiny_graph([("A:1", "r", "B:1")])
        table = run_query("MATCH (n) WHERE n.name CONTAINS 5 RETURN n", g)
        assert table.rows == []
        assert table.type_mismatch_warnings > 0

    def test_null_fails_comparisons(self):
        g = tiny_graph([("A:1", "r", "B:1")])
        table = run_query(
            "MATCH (a) OPTIONAL MATCH (a)-[:never]->(z) "
            "RETURN a.name AS name, z.name = 'B:1' AS eq, "
            "COUNT(z) AS zs", g)
        for _, eq, zs in table.rows:
            assert eq is False
            assert zs == 0

    def test_union_all_concatenates(self):
        g = tiny_graph([("A:1", "r", "B:1")])
        table = run_query(
            "MATCH (n) RETURN n.name AS name UNION ALL "
            "MATCH (n) RETURN n.name AS name", g)
        assert len(table.rows) == 4

    def test_with_carries_bindings_through(self):
        g = tiny_graph([
            ("DrugBank_Compound:DB1", "targets", "UniProt:P1"),
            ("UniProt:P1", "interacts_with", "UniProt:P2"),
        ])
        table = run_query(
            "MATCH (d:DrugBank_Compound)-[:targets]->(t:UniProt) "
            "WITH DISTINCT t "
            "MATCH (t)-[:interacts_with]->(u:UniProt) "
            "RETURN t.name AS a, u.name AS b", g)
        assert table.rows == [("UniProt:P1", "UniProt:P2")]

    def test_collect_plain_keeps_duplicates(self):
        g = tiny_graph([
            ("A:1", "r", "B:1"),
            ("A:2", "r", "B:1"),
        ])
        table = run_query(
            "MATCH (a)-[:r]->(b) RETURN COLLECT(b.name) AS bs", g)
        assert table.rows == [(["B:1", "B:1"],)]

    def test_collect_distinct_sorted(self):
        g = tiny_graph([
            ("A:2", "r", "B:9"),
            ("A:1", "r", "B:9"),
            ("A:3", "r", "B:9"),
        ])
        table = run_query(
            "MATCH (a)-[:r]->(b) RETURN b.name AS b, "
            "COLLECT(DISTINCT a.name) AS heads", g)
        assert table.rows == [("B:9", ["A:1", "A:2", "A:3"])]

    def test_execute_does_not_mutate_graph(self, fixture_graph):
        before_nodes = set(fixture_graph.nodes)
        before_edges = dict(fixture_graph.edges)
        for name in corpus_names():
            run_query(corpus_query(name), fixture_graph)
        assert fixture_graph.nodes == before_nodes
        assert fixture_graph.edges == before_edges

    def test_limit_is_prefix_of_unlimited(self, fixture_graph):
        full = run_query(
            "MATCH (n) RETURN n.name AS name ORDER BY name", fixture_graph)
        for n in (1, 3, 7):
            cut = run_query(
                f"MATCH (n) RETURN n.name AS name ORDER BY name LIMIT {n}",
                fixture_graph)
            assert cut.rows == full.rows[:n]

    def test_order_by_ties_use_full_row_then_input(self):
        g = tiny_graph([
            ("A:2", "same", "B:1"),
            ("A:1", "same", "B:1"),
        ])
        table = run_query(
            "MATCH (a)-[:same]->(b) RETURN a.name AS name, b.name AS tgt "
            "ORDER BY tgt", g)
        # tgt ties; full-row lexicographic puts A:1 first
        assert [r[0] for r in table.rows] == ["A:1", "A:2"]


class TestGoldens:
    @pytest.mark.parametrize("name", corpus_names())
    def test_corpus_matches_golden(self, name, fixture_graph):
        table = run_query(corpus_query(name), fixture_graph)
        assert table.to_tsv() == golden_table(name), name


def _random_query(rng: random.Random) -> str:
    """Generate a random query inside the supported subset."""
    labels = ["DrugBank_Compound", "UniProt", "MeSH_Disease", None]
    rels = ["-treats->", "interacts_with", "-ppi-", "enables", None]
    parts = []
    var = "a"
    label = rng.choice(labels)
    parts.append(f"MATCH ({var}{':' + label if label else ''})")
    if rng.random() < 0.7:
        rel = rng.choice(rels)
        reltxt = ""
        if rng.random() < 0.5:
            reltxt = "r"
        if rel is not None:
            quoted = f"`{rel}`" if not rel.isidentifier() else rel
            reltxt += f":{quoted}"
        if not reltxt:
            reltxt = "r"
        arrow = rng.choice(["->", "-"])
        parts.append(f"-[{reltxt}]{arrow}(b)")
    pattern = "".join(parts)
    where = ""
    if rng.random() < 0.6:
        conds = []
        for _ in range(rng.randint(1, 2)):
            kind = rng.randrange(3)
            if kind == 0:
                conds.append(f"{var}.name = 'X:{rng.randrange(5)}'")
            elif kind == 1:
                items = ", ".join(f"'N:{i}'" for i in range(rng.randint(0, 3)))
                conds.append(f"{var}.name IN [{items}]")
            else:
                conds.append(
                    f"any(k IN ['DB{rng.randrange(99)}'] WHERE {var}.name CONTAINS k)")
        where = " WHERE " + f" {rng.choice(['AND', 'OR'])} ".join(conds)
    if rng.random() < 0.4:
        ret = f"RETURN {var}.name AS name, COLLECT(DISTINCT {var}.name) AS all_names"
    else:
        ret = f"RETURN {var}.name AS name"
    order = " ORDER BY name DESC" if rng.random() < 0.4 else ""
    limit = f" LIMIT {rng.randrange(1, 9)}" if rng.random() < 0.4 else ""
    return f"{pattern}{where} {ret}{order}{limit}"


class TestRoundTrip:
    @pytest.mark.parametrize("name", corpus_names())
    def test_corpus_fixpoint(self, name):
        first = parse(corpus_query(name))
        printed = pretty_print(first)
        assert parse(printed) == first

    def test_fuzzed_fixpoint(self):
        rng = random.Random(2024)
        for _ in range(300):
            query = _random_query(rng)
            first = parse(query)
            assert parse(pretty_print(first)) == first, query

    def test_fuzzed_execution_agrees_with_pretty_printed(self, fixture_graph):
        rng = random.Random(7)
        for _ in range(100):
            query = _random_query(rng)
            a = run_query(query, fixture_graph)
            b = run_query(pretty_print(parse(query)), fixture_graph)
            assert a.rows == b.rows and a.columns == b.columns
