"""Text chunking, deterministic reference embeddings, and exact search.

The reference embedder is a hashed bag-of-tokens: every token is hashed to
a bucket and a sign, accumulated, then L2-normalized. It stands in for a
neural embedder so that retrieval behavior is reproducible in tests; an
HTTP client against an embedding service is provided for live use.

Search is exact brute-force cosine over the whole index. At this corpus
scale that is faster than building an approximate structure and it makes
oracle tests possible.

Persistence keeps only what retrieval needs (source tag, source id,
vector); chunk text and token spans are not round-tripped.
"""

from __future__ import annotations

import hashlib
import struct
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import httpx
import numpy as np

from .corpus import Document, DocumentSet, SectionClass, classify_section
from .kg import KnowledgeGraph


class EmbedError(Exception):
    pass


# ---------------------------------------------------------------------------
# Tokens and chunks

def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Unicode-whitespace split, then peel leading/trailing punctuation."""
    tokens: list[str] = []
    for piece in text.split():
        start, end = 0, len(piece)
        lead: list[str] = []
        while start < end and _is_punct(piece[start]):
            lead.append(piece[start])
            start += 1
        trail: list[str] = []
        while end > start and _is_punct(piece[end - 1]):
            trail.append(piece[end - 1])
            end -= 1
        tokens.extend(lead)
        if start < end:
            tokens.append(piece[start:end])
        tokens.extend(reversed(trail))
    return tokens


SOURCE_KG_NODE = "kg_node"
SOURCE_KG_EDGE = "kg_edge"
SOURCE_DOC_SECTION = "doc_section"

_SOURCE_TAGS = {SOURCE_KG_NODE: 0, SOURCE_KG_EDGE: 1, SOURCE_DOC_SECTION: 2}
_TAG_SOURCES = {v: k for k, v in _SOURCE_TAGS.items()}


@dataclass(frozen=True)
class Chunk:
    source: str  # kg_node | kg_edge | doc_section
    source_id: str  # NodeId text, edge triple text, or "pmid#section#index"
    token_span: tuple[int, int]
    text: str


def chunk(tokens: list[str], size: int, source: str = SOURCE_DOC_SECTION,
          source_id: str = "") -> list[Chunk]:
    """Cut tokens into consecutive windows of `size`; the last may be shorter.

    Document-section chunks get "#index" appended to source_id so every
    chunk id is addressable; graph chunks keep the id verbatim.
    """
    if size < 1:
        raise EmbedError(f"chunk size must be >= 1, got {size}")
    out: list[Chunk] = []
    for index, start in enumerate(range(0, len(tokens), size)):
        window = tokens[start:start + size]
        cid = f"{source_id}#{index}" if source == SOURCE_DOC_SECTION else source_id
        out.append(Chunk(source, cid, (start, start + len(window)),
                         " ".join(window)))
    return out


# ---------------------------------------------------------------------------
# Embedders

def _token_hash(token: str, person: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             person=person).digest()
    return int.from_bytes(digest, "little")


def embed_reference(text: str, d: int = 256) -> np.ndarray:
    """Hashed bag-of-tokens embedding; unit L2 norm except for empty input."""
    if d < 8:
        raise EmbedError(f"embedding dimension must be >= 8, got {d}")
    vec = np.zeros(d, dtype=np.float64)
    for token in tokenize(text):
        bucket = _token_hash(token, b"bucket") % d
        sign = 1.0 if _token_hash(token, b"signhash") % 2 == 0 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


class ReferenceEmbedder:
    def __init__(self, d: int = 256):
        self.d = d

    def embed(self, text: str) -> np.ndarray:
        return embed_reference(text, self.d)


class HttpEmbedder:
    """Client for an embedding endpoint with the local-service JSON shape:
    POST {base_url}/api/embeddings {"model": ..., "prompt": ...} ->
    {"embedding": [...]}."""

    def __init__(self, base_url: str, model: str, d: int,
                 client: Optional[httpx.Client] = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.d = d
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        response = self._client.post(
            f"{self.base_url}/api/embeddings",
            json={"model": self.model, "prompt": text})
        response.raise_for_status()
        values = response.json().get("embedding")
        if not isinstance(values, list) or len(values) != self.d:
            raise EmbedError(
                f"embedding service returned {type(values).__name__} "
                f"of length {len(values) if isinstance(values, list) else 'n/a'}, "
                f"expected {self.d}")
        vec = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise EmbedError("embedding service returned non-finite values")
        return vec


# ---------------------------------------------------------------------------
# Index

@dataclass
class EmbeddingIndex:
    d: int
    entries: list[tuple[Chunk, np.ndarray]]

    def __init__(self, d: int):
        self.d = d
        self.entries = []

    def add(self, chk: Chunk, vector: np.ndarray) -> None:
        if vector.shape != (self.d,):
            raise EmbedError(
                f"vector shape {vector.shape} does not match index dimension {self.d}")
        self.entries.append((chk, np.asarray(vector, dtype=np.float64)))

    def __len__(self) -> int:
        return len(self.entries)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def search(index: EmbeddingIndex, query_vec: np.ndarray,
           top_n: int) -> list[tuple[Chunk, float]]:
    """Exact cosine ranking, descending; ties broken by source_id ascending."""
    if top_n < 1:
        raise EmbedError(f"top_n must be >= 1, got {top_n}")
    if query_vec.shape != (index.d,):
        raise EmbedError(
            f"query shape {query_vec.shape} does not match index dimension {index.d}")
    scored = [(chk, _cosine(query_vec, vec)) for chk, vec in index.entries]
    scored.sort(key=lambda pair: (-pair[1], pair[0].source_id,
                                  pair[0].token_span, pair[0].text))
    return scored[:top_n]


# ---------------------------------------------------------------------------
# Builders

def index_graph(graph: KnowledgeGraph, embedder, kg_chunk: int = 20,
                index: Optional[EmbeddingIndex] = None) -> EmbeddingIndex:
    """Embed node and edge surface text. A node's text is its canonical id
    plus any loaded description; an edge is the "head relation tail" string."""
    index = index or EmbeddingIndex(embedder.d)
    for node in graph.sorted_nodes():
        text = str(node)
        description = graph.node_text.get(node)
        if description:
            text = f"{text} {description}"
        for chk in chunk(tokenize(text), kg_chunk, SOURCE_KG_NODE, str(node)):
            index.add(chk, embedder.embed(chk.text))
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        text = f"{edge.head} {edge.relation} {edge.tail}"
        for chk in chunk(tokenize(text), kg_chunk, SOURCE_KG_EDGE, text):
            index.add(chk, embedder.embed(chk.text))
    return index


def doc_section_items(doc: Document) -> list[tuple[str, str]]:
    """Sections to embed for a document: title/metadata fields first (they
    classify as metadata), then the body sections verbatim."""
    items: list[tuple[str, str]] = []
    if doc.title:
        items.append(("title", doc.title))
    for name, value in doc.metadata.items():
        if value:
            items.append((name, value))
    items.extend(doc.sections.items())
    return items


def index_documents(documents: DocumentSet | Iterable[Document], embedder,
                    article_chunk: int = 500,
                    index: Optional[EmbeddingIndex] = None) -> EmbeddingIndex:
    index = index or EmbeddingIndex(embedder.d)
    for doc in documents:
        for section_name, text in doc_section_items(doc):
            tokens = tokenize(text)
            base = f"{doc.pmid}#{section_name}"
            for chk in chunk(tokens, article_chunk, SOURCE_DOC_SECTION, base):
                index.add(chk, embedder.embed(chk.text))
    return index


# ---------------------------------------------------------------------------
# Section-weighted document scoring

@dataclass(frozen=True)
class SectionWeights:
    abstract: float = 0.7
    results: float = 0.1
    metadata: float = 0.1
    other: float = 0.1

    def __post_init__(self):
        total = self.abstract + self.results + self.metadata + self.other
        if abs(total - 1.0) > 1e-9:
            raise EmbedError(f"section weights must sum to 1, got {total}")

    def weight(self, cls: SectionClass) -> float:
        return getattr(self, cls.value)


def _chunk_section(chk: Chunk, pmid: str) -> str:
    # source_id is "pmid#section#index"; the section name may itself
    # contain '#', so strip the known prefix and the final index
    middle = chk.source_id[len(pmid) + 1:]
    return middle[:middle.rfind("#")]


def score_document(query_vec: np.ndarray, doc: Document,
                   index: EmbeddingIndex,
                   weights: SectionWeights = SectionWeights()) -> float:
    """Weighted per-class best-chunk cosine; classes with no chunks score 0."""
    prefix = f"{doc.pmid}#"
    best: dict[SectionClass, float] = {}
    found = False
    for chk, vec in index.entries:
        if chk.source != SOURCE_DOC_SECTION or not chk.source_id.startswith(prefix):
            continue
        found = True
        cls = classify_section(_chunk_section(chk, doc.pmid))
        sim = _cosine(query_vec, vec)
        if cls not in best or sim > best[cls]:
            best[cls] = sim
    if not found:
        raise EmbedError(f"document {doc.pmid} has no chunks in the index")
    return sum(weights.weight(cls) * sim for cls, sim in best.items())


# ---------------------------------------------------------------------------
# Persistence: magic "RGIX", version, d, count, then fixed-layout records

_MAGIC = b"RGIX"
_VERSION = 1


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQ", _MAGIC, _VERSION, index.d,
                             len(index.entries)))
        for chk, vec in index.entries:
            id_bytes = chk.source_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise EmbedError(f"source id too long to persist: {chk.source_id[:50]}...")
            fh.write(struct.pack("<BH", _SOURCE_TAGS[chk.source], len(id_bytes)))
            fh.write(id_bytes)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIIQ"))
        if len(header) != struct.calcsize("<4sIIQ"):
            raise EmbedError(f"{path} is truncated")
        magic, version, d, count = struct.unpack("<4sIIQ", header)
        if magic != _MAGIC:
            raise EmbedError(f"{path} is not an embedding index (bad magic)")
        if version != _VERSION:
            raise EmbedError(f"unsupported index version {version}")
        index = EmbeddingIndex(d)
        for _ in range(count):
            tag, id_len = struct.unpack("<BH", fh.read(3))
            source = _TAG_SOURCES.get(tag)
            if source is None:
                raise EmbedError(f"unknown source tag {tag}")
            source_id = fh.read(id_len).decode("utf-8")
            raw = fh.read(4 * d)
            if len(raw) != 4 * d:
                raise EmbedError(f"{path} is truncated mid-record")
            vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            index.entries.append((Chunk(source, source_id, (0, 0), ""), vec))
    return index
