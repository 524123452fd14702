"""In-memory knowledge graph: namespaced nodes, typed edges, load/merge/filter.

Graphs are built once (load or merge) and treated as immutable afterwards;
all read operations are safe to call from multiple threads.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class KgError(Exception):
    """Raised for malformed identifiers, missing nodes, or merge conflicts."""


class Provenance(str, Enum):
    KNOWLEDGE_BASE = "knowledge_base"
    TEXT_MINING = "text_mining"
    PREDICTED = "predicted"


@dataclass(frozen=True, order=True)
class NodeId:
    """Namespaced entity id, canonically written "namespace:local_id"."""

    namespace: str
    local_id: str

    def __post_init__(self):
        if not self.namespace or not self.local_id:
            raise KgError(f"empty namespace or local id in {self.namespace!r}:{self.local_id!r}")
        if ":" in self.namespace:
            raise KgError(f"namespace may not contain ':': {self.namespace!r}")

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        ns, sep, local = text.partition(":")
        if not sep or not ns or not local:
            raise KgError(f"not a namespaced node id: {text!r}")
        return cls(ns, local)

    def __str__(self) -> str:
        return f"{self.namespace}:{self.local_id}"


@dataclass(frozen=True)
class Edge:
    head: NodeId
    relation: str
    tail: NodeId
    provenance: Provenance
    weight: Optional[float] = None

    def __post_init__(self):
        if not self.relation:
            raise KgError("edge relation must be non-empty")

    def key(self) -> tuple:
        """Dedup identity: provenance-qualified triple, weight excluded."""
        return (self.head, self.relation, self.tail, self.provenance)


@dataclass
class LoadReport:
    """Counters accumulated while building a graph from flat files."""

    malformed_lines: int = 0
    self_loops_dropped: int = 0
    duplicates_collapsed: int = 0
    weight_conflicts: int = 0
    header_skipped: bool = False


@dataclass
class GraphStats:
    node_count: int
    edge_count: int
    average_degree: float
    feature_dim: int
    has_isolated_nodes: bool
    has_self_loops: bool


@dataclass(eq=False)
class KnowledgeGraph:
    """Labeled multigraph with optional per-node features and descriptions.

    ``edges`` is keyed by (head, relation, tail, provenance) so at most one
    edge exists per quadruple. Adjacency indexes are built lazily and cached.
    """

    nodes: set[NodeId] = field(default_factory=set)
    edges: dict[tuple, Edge] = field(default_factory=dict)
    node_features: dict[NodeId, np.ndarray] = field(default_factory=dict)
    node_text: dict[NodeId, str] = field(default_factory=dict)
    load_report: LoadReport = field(default_factory=LoadReport)

    _neighbors: Optional[dict[NodeId, set[NodeId]]] = field(default=None, repr=False)
    _incident: Optional[dict[NodeId, list[Edge]]] = field(default=None, repr=False)
    _by_namespace: Optional[dict[str, list[NodeId]]] = field(default=None, repr=False)
    _by_relation: Optional[dict[str, list[Edge]]] = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        if self.nodes != other.nodes or self.edges.keys() != other.edges.keys():
            return False
        if any(self.edges[k].weight != other.edges[k].weight for k in self.edges):
            return False
        if self.node_text != other.node_text:
            return False
        if self.node_features.keys() != other.node_features.keys():
            return False
        return all(np.array_equal(v, other.node_features[k]) for k, v in self.node_features.items())

    @property
    def feature_dim(self) -> int:
        if not self.node_features:
            return 0
        return len(next(iter(self.node_features.values())))

    def has_node(self, node: NodeId) -> bool:
        return node in self.nodes

    def has_undirected_edge(self, u: NodeId, v: NodeId) -> bool:
        """True if any stored edge joins u and v, regardless of direction or relation."""
        return v in self.neighbors(u)

    def add_edge(self, edge: Edge) -> None:
        """Insert during construction; enforces dedup/self-loop invariants."""
        if edge.head == edge.tail:
            self.load_report.self_loops_dropped += 1
            self.nodes.add(edge.head)
            return
        key = edge.key()
        existing = self.edges.get(key)
        if existing is not None:
            self.load_report.duplicates_collapsed += 1
            if existing.weight != edge.weight:
                self.load_report.weight_conflicts += 1
                logger.warning("conflicting weights for %s -%s-> %s: keeping %s, ignoring %s",
                               edge.head, edge.relation, edge.tail, existing.weight, edge.weight)
            return
        self.edges[key] = edge
        self.nodes.add(edge.head)
        self.nodes.add(edge.tail)
        self._invalidate_indexes()

    def _invalidate_indexes(self) -> None:
        self._neighbors = None
        self._incident = None
        self._by_namespace = None
        self._by_relation = None

    def neighbors(self, node: NodeId) -> set[NodeId]:
        if self._neighbors is None:
            nbrs: dict[NodeId, set[NodeId]] = {n: set() for n in self.nodes}
            for e in self.edges.values():
                nbrs[e.head].add(e.tail)
                nbrs[e.tail].add(e.head)
            self._neighbors = nbrs
        return self._neighbors.get(node, set())

    def incident_edges(self, node: NodeId) -> list[Edge]:
        if self._incident is None:
            inc: dict[NodeId, list[Edge]] = {n: [] for n in self.nodes}
            for e in self.edges.values():
                inc[e.head].append(e)
                inc[e.tail].append(e)
            self._incident = inc
        return self._incident.get(node, [])

    def nodes_in_namespace(self, namespace: str) -> list[NodeId]:
        if self._by_namespace is None:
            idx: dict[str, list[NodeId]] = {}
            for n in sorted(self.nodes):
                idx.setdefault(n.namespace, []).append(n)
            self._by_namespace = idx
        return self._by_namespace.get(namespace, [])

    def edges_with_relation(self, relation: str) -> list[Edge]:
        if self._by_relation is None:
            idx: dict[str, list[Edge]] = {}
            for e in self.edges.values():
                idx.setdefault(e.relation, []).append(e)
            self._by_relation = idx
        return self._by_relation.get(relation, [])

    def sorted_nodes(self) -> list[NodeId]:
        return sorted(self.nodes)

    def check_endpoints(self) -> None:
        """Every edge endpoint must be a member of the node set."""
        for e in self.edges.values():
            if e.head not in self.nodes or e.tail not in self.nodes:
                raise KgError(f"edge endpoint outside node set: {e.head} -{e.relation}-> {e.tail}")


def _parse_weight(token: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise KgError(f"unparseable weight field: {token!r}")


def load_edge_list(path: str | Path, provenance: Provenance = Provenance.KNOWLEDGE_BASE,
                   delimiter: str = "\t") -> KnowledgeGraph:
    """Read a 3/4-column edge list into a graph.

    Lines starting with '#' and blank lines are ignored. A leading header row
    (third field not a namespaced id) is skipped. Malformed lines are counted
    in the returned graph's ``load_report``; the load fails only when every
    data line is malformed.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise KgError(f"cannot read edge list {path}: {exc}") from exc

    graph = KnowledgeGraph()
    data_lines = 0
    first_data_line = True
    for raw in text.splitlines():
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split(delimiter)
        if first_data_line and len(fields) >= 3 and not _looks_like_node(fields[2]):
            graph.load_report.header_skipped = True
            first_data_line = False
            continue
        first_data_line = False
        data_lines += 1
        try:
            if len(fields) < 3:
                raise KgError(f"expected 3 or 4 fields, got {len(fields)}")
            head = NodeId.parse(fields[0].strip())
            relation = fields[1].strip()
            tail = NodeId.parse(fields[2].strip())
            weight = _parse_weight(fields[3].strip()) if len(fields) > 3 and fields[3].strip() else None
            if not relation:
                raise KgError("empty relation")
            graph.add_edge(Edge(head, relation, tail, provenance, weight))
        except KgError:
            graph.load_report.malformed_lines += 1
    if data_lines > 0 and graph.load_report.malformed_lines == data_lines:
        raise KgError(f"every data line in {path} is malformed")
    graph.check_endpoints()
    return graph


def _looks_like_node(token: str) -> bool:
    try:
        NodeId.parse(token.strip())
        return True
    except KgError:
        return False


def write_edge_list(graph: KnowledgeGraph, path: str | Path, delimiter: str = "\t") -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for e in sorted(graph.edges.values(), key=lambda e: (e.head, e.relation, e.tail, e.provenance.value)):
            fields = [str(e.head), e.relation, str(e.tail)]
            if e.weight is not None:
                fields.append(repr(e.weight))
            fh.write(delimiter.join(fields) + "\n")


def load_node_features(graph: KnowledgeGraph, path: str | Path, delimiter: str = "\t") -> KnowledgeGraph:
    """Attach feature vectors from "NodeId<TAB>v1,v2,...,vF" records.

    Nodes without a record get the zero vector. Records for unknown nodes are
    ignored with a warning.
    """
    path = Path(path)
    vectors: dict[NodeId, np.ndarray] = {}
    dim: Optional[int] = None
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        node_tok, _, vec_tok = line.partition(delimiter)
        node = NodeId.parse(node_tok.strip())
        values = np.array([float(v) for v in vec_tok.strip().split(",")], dtype=np.float64)
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise KgError(f"feature dimension mismatch: {len(values)} vs {dim} at node {node}")
        if node not in graph.nodes:
            logger.warning("feature record for unknown node %s ignored", node)
            continue
        vectors[node] = values
    if dim is None:
        return graph
    out = _copy_graph(graph)
    out.node_features = {n: vectors.get(n, np.zeros(dim)) for n in graph.nodes}
    return out


def load_node_text(graph: KnowledgeGraph, path: str | Path, delimiter: str = "\t") -> KnowledgeGraph:
    """Attach free-text descriptions from "NodeId<TAB>text" records."""
    path = Path(path)
    texts: dict[NodeId, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        node_tok, _, text = line.partition(delimiter)
        node = NodeId.parse(node_tok.strip())
        if node in graph.nodes:
            texts[node] = text.strip()
    out = _copy_graph(graph)
    out.node_text = texts
    return out


def _copy_graph(graph: KnowledgeGraph) -> KnowledgeGraph:
    return KnowledgeGraph(
        nodes=set(graph.nodes),
        edges=dict(graph.edges),
        node_features=dict(graph.node_features),
        node_text=dict(graph.node_text),
        load_report=graph.load_report,
    )


def merge_graphs(base: KnowledgeGraph, overlay: KnowledgeGraph) -> KnowledgeGraph:
    """Union of node sets and deduplicated edge sets; base wins weight conflicts."""
    if base.node_features and overlay.node_features and base.feature_dim != overlay.feature_dim:
        raise KgError(
            f"feature-dimension conflict: base has F={base.feature_dim}, overlay has F={overlay.feature_dim}")
    merged = KnowledgeGraph()
    merged.nodes = set(base.nodes) | set(overlay.nodes)
    for e in base.edges.values():
        merged.add_edge(e)
    for e in overlay.edges.values():
        merged.add_edge(e)
    merged.node_features = {**overlay.node_features, **base.node_features}
    merged.node_text = {**overlay.node_text, **base.node_text}
    merged.check_endpoints()
    return merged


def k_hop_filter(graph: KnowledgeGraph, seeds: Iterable[NodeId], k: int = 2) -> KnowledgeGraph:
    """Subgraph induced by all nodes within undirected distance k of any seed."""
    seeds = list(seeds)
    unknown = [s for s in seeds if s not in graph.nodes]
    if unknown:
        raise KgError("unknown seed nodes: " + ", ".join(str(s) for s in sorted(unknown)))
    if k < 0:
        raise KgError(f"k must be non-negative, got {k}")

    keep: set[NodeId] = set(seeds)
    frontier = deque((s, 0) for s in seeds)
    dist = {s: 0 for s in seeds}
    while frontier:
        node, d = frontier.popleft()
        if d == k:
            continue
        for nbr in graph.neighbors(node):
            if nbr not in dist:
                dist[nbr] = d + 1
                keep.add(nbr)
                frontier.append((nbr, d + 1))

    out = KnowledgeGraph()
    out.nodes = keep
    for e in graph.edges.values():
        if e.head in keep and e.tail in keep:
            out.edges[e.key()] = e
    out.node_features = {n: v for n, v in graph.node_features.items() if n in keep}
    out.node_text = {n: t for n, t in graph.node_text.items() if n in keep}
    out.check_endpoints()
    return out


def _undirected_simple_edges(graph: KnowledgeGraph) -> set[frozenset]:
    return {frozenset((e.head, e.tail)) for e in graph.edges.values()}


def graph_summary(graph: KnowledgeGraph) -> GraphStats:
    """Node/edge counts and degree statistics over the undirected simple view."""
    if not graph.nodes:
        raise KgError("cannot summarize an empty graph")
    simple = _undirected_simple_edges(graph)
    node_count = len(graph.nodes)
    edge_count = len(simple)
    return GraphStats(
        node_count=node_count,
        edge_count=edge_count,
        average_degree=2.0 * edge_count / node_count,
        feature_dim=graph.feature_dim,
        has_isolated_nodes=any(not graph.neighbors(n) for n in graph.nodes),
        has_self_loops=any(e.head == e.tail for e in graph.edges.values()),
    )


def degree(graph: KnowledgeGraph, node: NodeId) -> int:
    """Incident edge count in the undirected multigraph view."""
    if node not in graph.nodes:
        raise KgError(f"unknown node: {node}")
    return len(graph.incident_edges(node))
