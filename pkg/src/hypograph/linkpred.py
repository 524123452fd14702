"""Two-layer graph convolutional link predictor with hand-rolled gradients.

Training is full-batch gradient descent over binary cross-entropy, one
positive and one sampled negative pair per positive edge. Message passing
uses only training-partition edges so evaluation edges never leak into the
propagation matrix. Everything is plain numpy and deterministic per seed.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kg import Edge, KnowledgeGraph, NodeId, Provenance

logger = logging.getLogger(__name__)

Pair = tuple[NodeId, NodeId]

_MAGIC = b"LPMD"
_VERSION = 1
_RATIOS = (0.85, 0.05, 0.10)
_MIN_EDGES = 20


class LinkpredError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    out: int = 32
    learning_rate: float = 0.01
    epochs: int = 1000
    clip_norm: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class EdgeSplit:
    """Disjoint positive partitions plus equal-size sampled negatives."""

    train: tuple[Pair, ...]
    val: tuple[Pair, ...]
    test: tuple[Pair, ...]
    train_neg: tuple[Pair, ...]
    val_neg: tuple[Pair, ...]
    test_neg: tuple[Pair, ...]
    seed: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: Optional[float]
    auprc: Optional[float]
    threshold: float
    loss_curve: tuple[float, ...] = ()


@dataclass(eq=False)
class LinkModel:
    w1: np.ndarray
    w2: np.ndarray
    threshold: Optional[float]
    config: TrainConfig
    nodes: tuple[NodeId, ...]


@dataclass(eq=False)
class Embeddings:
    nodes: tuple[NodeId, ...]
    matrix: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {node: i for i, node in enumerate(self.nodes)}

    def vector(self, node: NodeId) -> np.ndarray:
        try:
            return self.matrix[self._index[node]]
        except KeyError:
            raise LinkpredError(f"node {node} has no embedding") from None


@dataclass(frozen=True)
class Prediction:
    head: NodeId
    tail: NodeId
    probability: float
    rank: int


@dataclass(eq=False)
class TrainResult:
    model: LinkModel
    embeddings: Embeddings
    split: EdgeSplit
    val: MetricsReport
    test: MetricsReport


# ---------------------------------------------------------------- splitting

def partition_sizes(n_edges: int) -> tuple[int, int, int]:
    """85:5:10 with largest-remainder rounding; remainder ties favor the
    earlier partition (train, then val, then test)."""
    quotas = [r * n_edges for r in _RATIOS]
    sizes = [int(math.floor(q)) for q in quotas]
    leftover = n_edges - sum(sizes)
    order = sorted(range(3), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[:leftover]:
        sizes[k] += 1
    return tuple(sizes)


def _undirected_pairs(graph: KnowledgeGraph) -> list[Pair]:
    pairs = set()
    for edge in graph.edges.values():
        u, v = edge.head, edge.tail
        pairs.add((u, v) if u <= v else (v, u))
    return sorted(pairs)


def split_edges(graph: KnowledgeGraph, seed: int) -> EdgeSplit:
    pairs = _undirected_pairs(graph)
    if len(pairs) < _MIN_EDGES:
        raise LinkpredError(
            f"need at least {_MIN_EDGES} distinct undirected edges to split, "
            f"got {len(pairs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    n_train, n_val, n_test = partition_sizes(len(pairs))
    positives = (tuple(shuffled[:n_train]),
                 tuple(shuffled[n_train:n_train + n_val]),
                 tuple(shuffled[n_train + n_val:]))

    nodes = graph.sorted_nodes()
    needed = len(pairs)
    taken: set[Pair] = set()
    negatives: list[Pair] = []
    attempts_left = 1000 * needed + 1000
    while len(negatives) < needed:
        if attempts_left <= 0:
            raise LinkpredError(
                "could not sample enough negative pairs; graph is too dense")
        attempts_left -= 1
        i = int(rng.integers(len(nodes)))
        j = int(rng.integers(len(nodes)))
        if i == j:
            continue
        u, v = nodes[i], nodes[j]
        if u > v:
            u, v = v, u
        if (u, v) in taken or graph.has_undirected_edge(u, v):
            continue
        taken.add((u, v))
        negatives.append((u, v))

    return EdgeSplit(
        train=positives[0], val=positives[1], test=positives[2],
        train_neg=tuple(negatives[:n_train]),
        val_neg=tuple(negatives[n_train:n_train + n_val]),
        test_neg=tuple(negatives[n_train + n_val:]),
        seed=seed)


def serialize_split(split: EdgeSplit) -> bytes:
    out = [b"SPLT", struct.pack("<q", split.seed)]
    for part in (split.train, split.val, split.test,
                 split.train_neg, split.val_neg, split.test_neg):
        out.append(struct.pack("<I", len(part)))
        for u, v in part:
            out.append(f"{u}\t{v}\n".encode("utf-8"))
    return b"".join(out)


# ------------------------------------------------------------- propagation

def normalize_adjacency(graph: KnowledgeGraph) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops over the
    undirected simple view; rows follow ``graph.sorted_nodes()`` order."""
    nodes = graph.sorted_nodes()
    if not nodes:
        raise LinkpredError("cannot normalize an empty graph")
    index = {node: i for i, node in enumerate(nodes)}
    b = np.eye(len(nodes))
    for edge in graph.edges.values():
        i, j = index[edge.head], index[edge.tail]
        b[i, j] = 1.0
        b[j, i] = 1.0
    inv_sqrt = 1.0 / np.sqrt(b.sum(axis=1))
    return inv_sqrt[:, None] * b * inv_sqrt[None, :]


def default_features(a_hat: np.ndarray) -> np.ndarray:
    """Fallback node features: the node's propagation row plus a bias one.

    The adjacency row is what lets the model tell structurally distinct
    nodes apart when no external feature table is supplied.
    """
    n = a_hat.shape[0]
    return np.hstack([a_hat, np.ones((n, 1))])


def gcn_forward(w1: np.ndarray, w2: np.ndarray, x: np.ndarray,
                a_hat: np.ndarray) -> np.ndarray:
    n = a_hat.shape[0]
    if a_hat.shape != (n, n) or x.shape[0] != n or x.shape[1] != w1.shape[0] \
            or w1.shape[1] != w2.shape[0]:
        raise LinkpredError(
            f"dimension mismatch: adj {a_hat.shape}, features {x.shape}, "
            f"w1 {w1.shape}, w2 {w2.shape}")
    hidden = np.maximum(a_hat @ x @ w1, 0.0)
    return a_hat @ (hidden @ w2)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s, dtype=float)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _pair_scores(z: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", z[pairs[:, 0]], z[pairs[:, 1]])


def _loss_and_grads(w1: np.ndarray, w2: np.ndarray, x: np.ndarray,
                    a_hat: np.ndarray, pairs: np.ndarray,
                    labels: np.ndarray):
    """Binary cross-entropy over pair logits and its exact weight gradients."""
    m_mat = a_hat @ x
    h_pre = m_mat @ w1
    a1 = np.maximum(h_pre, 0.0)
    za = a1 @ w2
    z = a_hat @ za

    s = _pair_scores(z, pairs)
    # log(1+e^-s) / log(1+e^s) without overflow; labels are exactly 0 or 1
    loss = float(np.mean(np.where(labels > 0.5, np.logaddexp(0.0, -s),
                                  np.logaddexp(0.0, s))))

    ds = (_sigmoid(s) - labels) / len(s)
    dz = np.zeros_like(z)
    np.add.at(dz, pairs[:, 0], ds[:, None] * z[pairs[:, 1]])
    np.add.at(dz, pairs[:, 1], ds[:, None] * z[pairs[:, 0]])

    dza = a_hat.T @ dz
    dw2 = a1.T @ dza
    da1 = dza @ w2.T
    dh = da1 * (h_pre > 0)
    dw1 = m_mat.T @ dh
    return loss, dw1, dw2


# ----------------------------------------------------------------- metrics

def evaluate(scores: Sequence[float], labels: Sequence[int],
             threshold: float) -> MetricsReport:
    if len(scores) != len(labels):
        raise LinkpredError("scores and labels differ in length")
    if not scores:
        raise LinkpredError("cannot evaluate an empty score list")
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)

    predicted = s >= threshold
    tp = int(np.sum(predicted & y))
    fp = int(np.sum(predicted & ~y))
    fn = int(np.sum(~predicted & y))
    tn = int(np.sum(~predicted & ~y))
    accuracy = (tp + tn) / len(s)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)

    n_pos, n_neg = int(np.sum(y)), int(np.sum(~y))
    auroc = auprc = None
    if n_pos and n_neg:
        auroc = _auroc_rank(s, y, n_pos, n_neg)
        auprc = _average_precision(s, y, n_pos)
    return MetricsReport(accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, auroc=auroc, auprc=auprc,
                         threshold=threshold)


def _auroc_rank(s: np.ndarray, y: np.ndarray, n_pos: int, n_neg: int) -> float:
    # Mann-Whitney statistic via midranks, which credits ties at 0.5
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=float)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = float(np.sum(ranks[y])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_precision(s: np.ndarray, y: np.ndarray, n_pos: int) -> float:
    order = np.argsort(-s, kind="stable")
    s_desc, y_desc = s[order], y[order]
    tp = np.cumsum(y_desc)
    hits = np.arange(1, len(s) + 1)
    # evaluate only at the last index of each tied-score block
    block_end = np.ones(len(s), dtype=bool)
    block_end[:-1] = s_desc[:-1] != s_desc[1:]
    precision = tp[block_end] / hits[block_end]
    recall = tp[block_end] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def select_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    if not scores:
        raise LinkpredError("cannot choose a threshold from an empty score list")
    if not any(labels):
        raise LinkpredError("threshold selection needs at least one positive")
    distinct = sorted(set(float(v) for v in scores))
    candidates = [0.0, 1.0]
    candidates.extend((a + b) / 2.0 for a, b in zip(distinct, distinct[1:]))
    best_t, best_f1 = None, -1.0
    for t in sorted(candidates):
        f1 = evaluate(scores, labels, t).f1
        if f1 > best_f1 + 1e-15:
            best_t, best_f1 = t, f1
    return best_t


# ---------------------------------------------------------------- training

def _feature_matrix(graph: KnowledgeGraph, features, a_hat: np.ndarray) -> np.ndarray:
    if features is not None:
        x = np.asarray(features, dtype=float)
    elif graph.node_features:
        dim = graph.feature_dim
        rows = [graph.node_features.get(node, np.zeros(dim))
                for node in graph.sorted_nodes()]
        x = np.asarray(rows, dtype=float)
    else:
        x = default_features(a_hat)
    if x.shape[0] != a_hat.shape[0]:
        raise LinkpredError(
            f"feature rows ({x.shape[0]}) do not match node count "
            f"({a_hat.shape[0]})")
    return x


def _message_graph(graph: KnowledgeGraph, pairs: Sequence[Pair]) -> KnowledgeGraph:
    mg = KnowledgeGraph()
    mg.nodes.update(graph.nodes)
    for u, v in pairs:
        mg.add_edge(Edge(u, "-linked-", v, Provenance.KNOWLEDGE_BASE))
    return mg


def _pair_index(pairs: Sequence[Pair], index: dict) -> np.ndarray:
    return np.array([(index[u], index[v]) for u, v in pairs], dtype=int)


def train(graph: KnowledgeGraph, features, config: TrainConfig) -> TrainResult:
    split = split_edges(graph, config.seed)
    nodes = graph.sorted_nodes()
    index = {node: i for i, node in enumerate(nodes)}

    a_hat = normalize_adjacency(_message_graph(graph, split.train))
    x = _feature_matrix(graph, features, a_hat)

    rng = np.random.default_rng([config.seed, 1])
    f, h, d = x.shape[1], config.hidden, config.out
    # wider-than-usual init: the dot-product decoder is quadratic in the
    # weight scale, so a small init strands plain gradient descent on the
    # near-flat region around zero at this learning rate
    w1 = rng.normal(0.0, math.sqrt(32.0 / (f + h)), (f, h))
    w2 = rng.normal(0.0, math.sqrt(32.0 / (h + d)), (h, d))

    train_pairs = _pair_index(split.train + split.train_neg, index)
    train_labels = np.array([1.0] * len(split.train)
                            + [0.0] * len(split.train_neg))

    curve = []
    for epoch in range(config.epochs):
        loss, g1, g2 = _loss_and_grads(w1, w2, x, a_hat, train_pairs,
                                       train_labels)
        if not math.isfinite(loss):
            raise LinkpredError(
                f"training diverged: non-finite loss at epoch {epoch + 1}")
        curve.append(loss)
        norm = math.sqrt(float(np.sum(g1 * g1) + np.sum(g2 * g2)))
        if norm > config.clip_norm:
            g1 = g1 * (config.clip_norm / norm)
            g2 = g2 * (config.clip_norm / norm)
        w1 = w1 - config.learning_rate * g1
        w2 = w2 - config.learning_rate * g2

    z = gcn_forward(w1, w2, x, a_hat)
    embeddings = Embeddings(nodes=tuple(nodes), matrix=z)

    def scored(pos, neg):
        s = _sigmoid(_pair_scores(z, _pair_index(pos + neg, index)))
        return s.tolist(), [1] * len(pos) + [0] * len(neg)

    val_scores, val_labels = scored(split.val, split.val_neg)
    threshold = select_threshold(val_scores, val_labels)
    loss_curve = tuple(curve)
    val_report = replace(evaluate(val_scores, val_labels, threshold),
                         loss_curve=loss_curve)
    test_scores, test_labels = scored(split.test, split.test_neg)
    test_report = replace(evaluate(test_scores, test_labels, threshold),
                          loss_curve=loss_curve)

    model = LinkModel(w1=w1, w2=w2, threshold=threshold, config=config,
                      nodes=tuple(nodes))
    return TrainResult(model=model, embeddings=embeddings, split=split,
                       val=val_report, test=test_report)


def embed_graph(model: LinkModel, graph: KnowledgeGraph,
                features=None) -> Embeddings:
    """Run the trained weights over a graph's own propagation matrix."""
    a_hat = normalize_adjacency(graph)
    x = _feature_matrix(graph, features, a_hat)
    if x.shape[1] != model.w1.shape[0]:
        raise LinkpredError(
            f"feature width {x.shape[1]} does not match the trained model "
            f"({model.w1.shape[0]}); was the model trained on this graph?")
    z = gcn_forward(model.w1, model.w2, x, a_hat)
    return Embeddings(nodes=tuple(graph.sorted_nodes()), matrix=z)


def score_edge(embeddings: Embeddings, u: NodeId, v: NodeId) -> float:
    s = float(np.dot(embeddings.vector(u), embeddings.vector(v)))
    return float(_sigmoid(np.array([s]))[0])


# -------------------------------------------------------------- prediction

def predict_candidates(model: LinkModel, graph: KnowledgeGraph,
                       pairs: Sequence[Pair], n: int,
                       out_path: Optional[str | Path] = None) -> list[Prediction]:
    if n < 1:
        raise LinkpredError("need n >= 1 predictions")
    embeddings = embed_graph(model, graph)

    scored = []
    for u, v in pairs:
        if not graph.has_node(u) or not graph.has_node(v):
            missing = u if not graph.has_node(u) else v
            logger.warning("skipping pair (%s, %s): unknown node %s", u, v,
                           missing)
            continue
        probability = score_edge(embeddings, u, v)
        existing = graph.has_undirected_edge(u, v)
        scored.append((u, v, probability, existing))
    scored.sort(key=lambda row: (-row[2], row[0], row[1]))

    predictions = []
    rows = []
    for u, v, probability, existing in scored:
        rank = None
        if not existing and len(predictions) < n:
            rank = len(predictions) + 1
            predictions.append(Prediction(head=u, tail=v,
                                          probability=probability, rank=rank))
        rows.append((str(u), "predicted", str(v), repr(probability),
                     "" if rank is None else str(rank), str(existing)))

    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["head", "relation", "tail", "probability",
                             "rank", "excluded_existing"])
            writer.writerows(rows)
    return predictions


# -------------------------------------------------------------- checkpoint

def save_model(model: LinkModel, path: str | Path) -> None:
    cfg = model.config
    threshold = float("nan") if model.threshold is None else model.threshold
    f, h = model.w1.shape
    d = model.w2.shape[1]
    parts = [
        struct.pack("<4sI", _MAGIC, _VERSION),
        struct.pack("<IIIq", cfg.hidden, cfg.out, cfg.epochs, cfg.seed),
        struct.pack("<ddd", cfg.learning_rate, cfg.clip_norm, threshold),
        struct.pack("<III", f, h, d),
        np.ascontiguousarray(model.w1, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.w2, dtype="<f8").tobytes(),
        struct.pack("<I", len(model.nodes)),
    ]
    for node in model.nodes:
        raw = str(node).encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> LinkModel:
    raw = Path(path).read_bytes()
    try:
        magic, version = struct.unpack_from("<4sI", raw, 0)
        if magic != _MAGIC:
            raise LinkpredError(f"{path} is not a link model checkpoint")
        if version != _VERSION:
            raise LinkpredError(
                f"unsupported checkpoint version {version} in {path}")
        offset = 8
        hidden, out, epochs, seed = struct.unpack_from("<IIIq", raw, offset)
        offset += struct.calcsize("<IIIq")
        lr, clip, threshold = struct.unpack_from("<ddd", raw, offset)
        offset += struct.calcsize("<ddd")
        f, h, d = struct.unpack_from("<III", raw, offset)
        offset += struct.calcsize("<III")
        w1 = np.frombuffer(raw, dtype="<f8", count=f * h,
                           offset=offset).reshape(f, h).copy()
        offset += f * h * 8
        w2 = np.frombuffer(raw, dtype="<f8", count=h * d,
                           offset=offset).reshape(h, d).copy()
        offset += h * d * 8
        (n_nodes,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        nodes = []
        for _ in range(n_nodes):
            (length,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            text = raw[offset:offset + length].decode("utf-8")
            if len(text.encode("utf-8")) != length:
                raise LinkpredError(f"truncated checkpoint {path}")
            offset += length
            nodes.append(NodeId.parse(text))
    except (struct.error, ValueError) as exc:
        raise LinkpredError(f"corrupt checkpoint {path}: {exc}") from exc
    config = TrainConfig(hidden=hidden, out=out, epochs=epochs, seed=seed,
                         learning_rate=lr, clip_norm=clip)
    return LinkModel(w1=w1, w2=w2,
                     threshold=None if math.isnan(threshold) else threshold,
                     config=config, nodes=tuple(nodes))
