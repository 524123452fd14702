"""Retrieval and reasoning pipelines: entity linking, a draft-verify-execute
query loop, weighted literature search with relevance filtering, and
prediction interpretation.

The pipeline owns no session state beyond the explanation registry; the
session layer supplies transcripts and persists logs.
"""

from __future__ import annotations

import datetime as dt
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .corpus import ArticleType, Document, DocumentSet, hierarchical_summarize
from .cypher import CypherError, ResultTable, execute, parse, validate
from .embedding import SOURCE_DOC_SECTION, SOURCE_KG_NODE, score_document, search
from .explain import ExplainConfig, Explanation, explain_edge
from .kg import KnowledgeGraph, NodeId
from .linkpred import Prediction, predict_candidates
from .llm import Gateway, GatewayError, user

logger = logging.getLogger(__name__)

_KEYWORDS = ("query", "predict", "search", "summarize")
_METHOD_RANK = {"exact_name": 0, "normalized_name": 1, "vector_similarity": 2}
_TYPE_RANK = {ArticleType.ORIGINAL_CONTRIBUTION: 0, ArticleType.REVIEW: 1,
              ArticleType.CLINICAL_CASE_REPORT: 2, ArticleType.OTHER: 3}
_GROUP_HEADERS = {ArticleType.ORIGINAL_CONTRIBUTION: "Original contributions",
                  ArticleType.REVIEW: "Reviews",
                  ArticleType.CLINICAL_CASE_REPORT: "Case reports",
                  ArticleType.OTHER: "Other documents"}
_CYPHER_PHRASE = "cypher command used to access this information"


class AgentsError(Exception):
    pass


class UsageError(AgentsError):
    pass


class VerificationError(AgentsError):
    """Query drafting exhausted its attempts; trace holds every try."""

    def __init__(self, message: str, trace: list[tuple[str, str]]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Command:
    kind: str  # query | predict | search | summarize | chat
    payload: str


@dataclass(frozen=True)
class EntityMatch:
    query_span: str
    node: NodeId
    method: str  # exact_name | normalized_name | vector_similarity
    similarity: float


@dataclass(frozen=True)
class SearchHit:
    document: Document
    score: float
    chunks: tuple[str, ...]
    rationale: str


@dataclass
class AgentResponse:
    answer_text: str
    evidence: list[dict]
    agent_trace: list[tuple[str, str, str]]


def _strip_quotes(payload: str) -> str:
    if (len(payload) >= 2 and payload[0] == payload[-1]
            and payload[0] in "\"'" and payload[0] not in payload[1:-1]):
        return payload[1:-1]
    return payload


def route(user_input: str) -> Command:
    parts = user_input.strip().split(None, 1)
    if not parts:
        return Command("chat", "")
    head = parts[0].lower()
    rest = parts[1].strip() if len(parts) > 1 else ""
    if head in _KEYWORDS:
        payload = _strip_quotes(rest)
        if not payload and head != "summarize":
            raise UsageError(f'usage: {head} "<text>"')
        return Command(head, payload)
    return Command("chat", user_input.strip())


def _extract_cypher(raw: str) -> str:
    text = raw.strip()
    fenced = re.search(r"```[A-Za-z]*\n(.*?)```", text, re.DOTALL)
    if fenced:
        return fenced.group(1).strip()
    return text


def _name_tokens(name: str) -> list[str]:
    return re.findall(r"[A-Za-z0-9]+", name.lower())


class AgentPipeline:
    def __init__(self, graph: KnowledgeGraph, gateway: Gateway, *,
                 index=None, embedder=None,
                 corpus: Optional[DocumentSet] = None, doc_index=None,
                 model=None, link_threshold: float = 0.35,
                 explain_k: int = 10,
                 explain_config: Optional[ExplainConfig] = None,
                 predict_n: int = 5, top_docs: int = 4,
                 summary_budget: int = 500, clock=time.time,
                 drug_namespace: str = "DrugBank_Compound",
                 disease_namespace: str = "MeSH_Disease",
                 class_namespace: str = "ATC_Class"):
        self.graph = graph
        self.gateway = gateway
        self.index = index
        self.embedder = embedder
        self.corpus = corpus
        self.doc_index = doc_index
        self.model = model
        self.link_threshold = link_threshold
        self.explain_k = explain_k
        self.explain_config = explain_config or ExplainConfig()
        self.predict_n = predict_n
        self.top_docs = top_docs
        self.summary_budget = summary_budget
        self.clock = clock
        self.drug_namespace = drug_namespace
        self.disease_namespace = disease_namespace
        self.class_namespace = class_namespace
        self.explanations: dict[str, Explanation] = {}

    # ------------------------------------------------------------- linking

    def link_entities(self, query_text: str) -> list[EntityMatch]:
        matches: dict[NodeId, EntityMatch] = {}

        def consider(node, method, similarity, span):
            old = matches.get(node)
            if old is None or ((_METHOD_RANK[method], -similarity)
                               < (_METHOD_RANK[old.method], -old.similarity)):
                matches[node] = EntityMatch(span, node, method, similarity)

        for node in self.graph.sorted_nodes():
            node_id = str(node)
            if node_id in query_text:
                consider(node, "exact_name", 1.0, node_id)
            name = self.graph.node_text.get(node)
            if name and name in query_text:
                consider(node, "exact_name", 1.0, name)

        for node in sorted(self.graph.node_text):
            tokens = _name_tokens(self.graph.node_text[node])
            if not tokens:
                continue
            pattern = (r"\b" + r"\W+".join(re.escape(t) for t in tokens)
                       + r"\b")
            found = re.search(pattern, query_text, re.IGNORECASE)
            if found:
                consider(node, "normalized_name", 1.0, found.group(0))

        if self.index is not None and self.embedder is not None \
                and len(self.index):
            query_vec = self.embedder.embed(query_text)
            for chk, sim in search(self.index, query_vec,
                                   min(20, len(self.index))):
                if sim < self.link_threshold:
                    break  # results come back sorted descending
                if chk.source != SOURCE_KG_NODE:
                    continue
                node = NodeId.parse(chk.source_id)
                if self.graph.has_node(node):
                    consider(node, "vector_similarity", sim,
                             query_text.strip())

        return sorted(matches.values(),
                      key=lambda m: (-m.similarity, _METHOD_RANK[m.method],
                                     str(m.node)))

    # ------------------------------------------------------------- schema

    def schema_summary(self) -> str:
        namespaces = sorted({node.namespace for node in self.graph.nodes})
        lines = ["Namespaces: " + ", ".join(namespaces),
                 "Relations with sample triples:"]
        relations = sorted({e.relation for e in self.graph.edges.values()})
        for relation in relations:
            lines.append(f"  {relation}")
            edges = sorted(self.graph.edges_with_relation(relation),
                           key=lambda e: (str(e.head), str(e.tail)))
            for edge in edges[:3]:
                lines.append(f"    ({edge.head}) -[{relation}]-> ({edge.tail})")
        return "\n".join(lines)

    # ---------------------------------------------------------- query loop

    def generate_verified_cypher(self, question: str,
                                 entities: Sequence[EntityMatch],
                                 max_attempts: int = 3
                                 ) -> tuple[str, ResultTable]:
        if max_attempts < 1:
            raise AgentsError("max_attempts must be >= 1")
        entity_lines = "\n".join(
            f"  {m.node} ({m.method}, similarity {m.similarity:.2f}, "
            f"matched {m.query_span!r})" for m in entities) or "  (none)"
        base_prompt = (
            f"Question: {question}\n"
            f"Linked entities:\n{entity_lines}\n"
            f"Graph schema:\n{self.schema_summary()}\n"
            "Write one Cypher query answering the question on this graph. "
            "Reply with only the query.")

        trace: list[tuple[str, str]] = []
        agent, prompt = "cypher_query", base_prompt
        reformulated = False
        empty_result: Optional[tuple[str, ResultTable]] = None
        for _ in range(max_attempts):
            draft = _extract_cypher(self.gateway.complete(agent,
                                                          [user(prompt)]))
            diagnostics = validate(draft)
            if diagnostics is not None:
                trace.append((draft, str(diagnostics)))
                agent = "query_verification"
                prompt = (f"This Cypher draft failed validation.\n"
                          f"Draft:\n{draft}\n"
                          f"Diagnostics:\n{diagnostics}\n"
                          "Reply with only the corrected query.")
                continue
            try:
                table = execute(parse(draft), self.graph)
            except CypherError as exc:
                trace.append((draft, str(exc.diagnostics)))
                agent = "query_verification"
                prompt = (f"This Cypher draft failed to execute.\n"
                          f"Draft:\n{draft}\nDiagnostics:\n{exc.diagnostics}\n"
                          "Reply with only the corrected query.")
                continue
            trace.append((draft, f"ok ({len(table.rows)} rows)"))
            if table.rows or reformulated:
                return draft, table
            # valid but empty: allow a single fresh drafting round
            reformulated = True
            empty_result = (draft, table)
            agent = "cypher_query"
            prompt = (f"{base_prompt}\n"
                      f"A previous query was valid but returned no rows:\n"
                      f"{draft}\n"
                      "Write a different query.")
        if empty_result is not None:
            return empty_result
        raise VerificationError(
            f"no valid Cypher query after {max_attempts} attempts", trace)

    # ------------------------------------------------------------ retrieval

    def literature_search(self, question: str,
                          top_docs: Optional[int] = None) -> list[SearchHit]:
        top_docs = top_docs or self.top_docs
        if self.corpus is None:
            raise AgentsError("no document corpus loaded")
        if self.embedder is None or self.doc_index is None \
                or len(self.doc_index) == 0:
            raise AgentsError("document index is empty")
        query_vec = self.embedder.embed(question)
        ranked_chunks = search(self.doc_index, query_vec,
                               min(50, len(self.doc_index)))
        owners: dict[str, list[str]] = {}
        for chk, _sim in ranked_chunks:
            if chk.source != SOURCE_DOC_SECTION:
                continue
            pmid = chk.source_id.split("#", 1)[0]
            owners.setdefault(pmid, []).append(chk.source_id)

        candidates = []
        for pmid, chunk_ids in owners.items():
            doc = self.corpus.documents.get(pmid)
            if doc is None:
                continue
            score = score_document(query_vec, doc, self.doc_index)
            candidates.append((doc, score, tuple(chunk_ids)))
        candidates.sort(key=lambda item: (-item[1], item[0].pmid))

        hits = []
        for doc, score, chunk_ids in candidates[:top_docs]:
            abstract = doc.sections.get("Abstract", "")
            prompt = (
                f"Question: {question}\n"
                f"Document pmid {doc.pmid} ({doc.article_type.value}): "
                f"{doc.title}\n"
                f"Abstract: {abstract[:800]}\n"
                "Is this document relevant to the question? Reply "
                "'relevant - <reason>' or 'irrelevant - <reason>'.")
            verdict = self.gateway.complete("text_evaluator",
                                            [user(prompt)]).strip()
            if verdict.lower().startswith("irrelevant"):
                logger.info("evaluator dropped %s: %s", doc.pmid, verdict)
                continue
            hits.append(SearchHit(doc, score, chunk_ids, verdict))
        hits.sort(key=lambda h: (_TYPE_RANK[h.document.article_type],
                                 -h.score, h.document.pmid))
        return hits

    # -------------------------------------------------------- interpretation

    def _relations_among(self, nodes) -> tuple[str, ResultTable]:
        ids = sorted({str(node) for node in nodes})
        id_list = ", ".join(f"'{i}'" for i in ids)
        query = (f"MATCH (a)-[r]-(b) WHERE a.name IN [{id_list}] "
                 f"AND b.name IN [{id_list}] "
                 "RETURN a.name AS Head, r.name AS Relation, b.name AS Tail "
                 "ORDER BY Head, Relation, Tail")
        return query, execute(parse(query), self.graph)

    def interpret_prediction(self, pred: Prediction,
                             expl: Explanation) -> str:
        probability = expl.predicted_probability
        lines = ["Predicted probability",
                 f"  {pred.head} -> {pred.tail}: {probability!r}"]
        if not expl.top_k:
            return "\n".join(lines)

        lines.append("Influential edges")
        for (a, b), score in expl.top_k:
            lines.append(f"  {a} -- {b}: {score!r}")
        involved = {pred.head, pred.tail}
        for (a, b), _score in expl.top_k:
            involved.update((a, b))
        rel_query, rel_table = self._relations_among(involved)
        seen = set()
        relation_lines = []
        for head, relation, tail in rel_table.rows:
            key = (min(head, tail), relation, max(head, tail))
            if key in seen:
                continue
            seen.add(key)
            relation_lines.append(f"    {head} {relation} {tail}")
        if relation_lines:
            lines.append("  Existing relations among these nodes:")
            lines.extend(relation_lines)
        lines.append(f"  {_CYPHER_PHRASE}:")
        lines.append(f"    {rel_query}")

        facts = "\n".join(lines)
        try:
            prose = self.gateway.complete("prediction_interpreter", [user(
                "Interpret this link prediction for a biomedical researcher. "
                "Do not invent scores.\n" + facts)]).strip()
            lines.append("Implications")
            lines.append(f"  {prose}")
        except GatewayError as exc:
            logger.warning("interpreter agent unavailable, using template "
                           "only: %s", exc)
        lines.append("Reliability")
        lines.append(
            f"  The model assigns probability {probability:.4f} to this "
            "link. Edge scores come from a mask explanation of the trained "
            "model and should be weighed against the literature before any "
            "experimental follow-up.")
        return "\n".join(lines)

    # ------------------------------------------------------------- summary

    def summarize_session(self, session_id: str,
                          turns: Sequence[tuple[str, str]],
                          out_dir: str | Path) -> tuple[str, Path]:
        if not turns:
            raise UsageError("nothing to summarize yet")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sections = {f"turn {i + 1}": f"user: {u}\nassistant: {a}"
                    for i, (u, a) in enumerate(turns)}
        transcript = Document(pmid=f"session-{session_id}", sections=sections)
        condensed = hierarchical_summarize(
            transcript, self._condense, threshold_tokens=self.summary_budget)
        summary = self.gateway.complete("summarizer", [user(
            f"Summarize this exploration session:\n{condensed}")])
        stamp = dt.datetime.fromtimestamp(
            self.clock(), dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        path = out_dir / f"summary_{session_id}_{stamp}.txt"
        path.write_text(summary, encoding="utf-8")
        return summary, path

    def _condense(self, text: str) -> str:
        return self.gateway.complete("summarizer", [user(
            f"Condense, keeping every factual claim:\n{text}")])

    # ------------------------------------------------------------ dispatch

    def answer(self, command: Command,
               transcript: Optional[tuple[str, Sequence[tuple[str, str]],
                                          str | Path]] = None
               ) -> AgentResponse:
        start = len(self.gateway.records)
        handler = {"query": self._answer_query,
                   "predict": self._answer_predict,
                   "search": self._answer_search,
                   "chat": self._answer_chat}.get(command.kind)
        if handler is not None:
            answer_text, evidence = handler(command.payload)
        elif command.kind == "summarize":
            if transcript is None:
                raise UsageError("nothing to summarize yet")
            session_id, turns, out_dir = transcript
            answer_text, path = self.summarize_session(session_id, turns,
                                                       out_dir)
            # bare filename: logs stay reproducible across machines
            evidence = [{"kind": "summary_file", "path": path.name}]
        else:
            raise AgentsError(f"unknown command kind {command.kind!r}")
        trace = [(r["agent"], r["input_digest"], r["output_digest"] or "")
                 for r in self.gateway.records[start:]]
        return AgentResponse(answer_text=answer_text, evidence=evidence,
                             agent_trace=trace)

    def _answer_query(self, payload: str):
        entities = self.link_entities(payload)
        query, table = self.generate_verified_cypher(payload, entities)
        tsv = table.to_tsv()
        answer_text = (f"Results ({len(table.rows)} rows):\n{tsv}\n"
                       f"{_CYPHER_PHRASE}:\n{query}")
        evidence = [{"kind": "cypher", "query": query, "table_tsv": tsv}]
        return answer_text, evidence

    def _answer_chat(self, payload: str):
        if not payload:
            raise UsageError("empty message")
        prose = self.gateway.complete("reasoning", [user(payload)])
        return prose, []

    def _answer_search(self, payload: str):
        hits = self.literature_search(payload)
        lines = []
        evidence = []
        current = None
        for hit in hits:
            header = _GROUP_HEADERS[hit.document.article_type]
            if header != current:
                lines.append(f"{header}:")
                current = header
            lines.append(f"  [{hit.document.pmid}] {hit.document.title}")
            lines.append(f"    score {hit.score:.4f}; {hit.rationale}")
            sections = sorted({c.split("#")[1] for c in hit.chunks
                               if c.count("#") >= 2})
            evidence.append({"kind": "citation", "pmid": hit.document.pmid,
                             "sections": sections,
                             "chunks": list(hit.chunks),
                             "score": hit.score,
                             "rationale": hit.rationale})
        if not hits:
            lines.append("No relevant documents found.")
        return "\n".join(lines), evidence

    def _answer_predict(self, payload: str):
        if self.model is None:
            raise AgentsError(
                "no trained model loaded; train one with the predict "
                "subcommand and point the service at its checkpoint")
        entities = self.link_entities(payload)
        drugs = {m.node for m in entities
                 if m.node.namespace == self.drug_namespace}
        for match in entities:
            if match.node.namespace == self.class_namespace:
                drugs.update(
                    nb for nb in self.graph.neighbors(match.node)
                    if nb.namespace == self.drug_namespace)
        diseases = {m.node for m in entities
                    if m.node.namespace == self.disease_namespace}
        if not drugs:
            raise AgentsError(
                "no drug or drug-class entities matched in the request")
        if not diseases:
            raise AgentsError("no disease entities matched in the request")
        pairs = sorted((drug, disease)
                       for drug in drugs for disease in diseases)
        predictions = predict_candidates(self.model, self.graph, pairs,
                                         n=self.predict_n)
        if not predictions:
            raise AgentsError(
                "every candidate pair already has an edge in the graph")
        top = predictions[0]
        expl = explain_edge(self.model, self.graph, (top.head, top.tail),
                            self.explain_k, self.explain_config)
        prediction_id = f"{top.head}__{top.tail}"
        self.explanations[prediction_id] = expl
        narrative = self.interpret_prediction(top, expl)
        lines = [f"Scored {len(pairs)} candidate pairs; "
                 f"top {len(predictions)} new links:"]
        for p in predictions:
            lines.append(f"  {p.rank}. {p.head} -> {p.tail} "
                         f"(probability {p.probability:.4f})")
        lines.append("")
        lines.append(narrative)
        evidence = [{"kind": "prediction",
                     "prediction_id": f"{p.head}__{p.tail}",
                     "head": str(p.head), "tail": str(p.tail),
                     "probability": p.probability, "rank": p.rank}
                    for p in predictions]
        return "\n".join(lines), evidence
