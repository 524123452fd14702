"""Publication corpus: loading, section classes, hierarchical summarization.

The corpus file is either a JSON array or a JSON-lines stream of records:

    {"pmid": "387170", "title": "...", "article_type": "clinical_case_report",
     "sections": {"Abstract": "...", "Methods": "..."},
     "metadata": {"journal": "...", "year": "1979", "mesh": "..."}}

`article_type` may be omitted; it is then inferred from publication-type
strings found in the metadata values ("Review", "Case Reports",
"Journal Article"). See docs/corpus_schema.md for the full schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable


class CorpusError(Exception):
    pass


class ArticleType(str, Enum):
    ORIGINAL_CONTRIBUTION = "original_contribution"
    REVIEW = "review"
    CLINICAL_CASE_REPORT = "clinical_case_report"
    OTHER = "other"


class SectionClass(str, Enum):
    ABSTRACT = "abstract"
    RESULTS = "results"
    METADATA = "metadata"
    OTHER = "other"


@dataclass
class Document:
    pmid: str
    title: str = ""
    article_type: ArticleType = ArticleType.OTHER
    sections: dict[str, str] = field(default_factory=dict)  # insertion order
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass
class DocumentSet:
    documents: dict[str, Document] = field(default_factory=dict)  # pmid -> doc
    skipped_missing_pmid: int = 0
    skipped_duplicate_pmid: int = 0

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents.values())

    def type_counts(self) -> dict[ArticleType, int]:
        counts = {t: 0 for t in ArticleType}
        for doc in self:
            counts[doc.article_type] += 1
        return counts


_TYPE_MARKERS = [
    ("case reports", ArticleType.CLINICAL_CASE_REPORT),
    ("review", ArticleType.REVIEW),
    ("journal article", ArticleType.ORIGINAL_CONTRIBUTION),
]

_METADATA_SECTIONS = {"title", "authors", "journal", "keywords", "mesh"}


def _infer_article_type(record: dict) -> ArticleType:
    explicit = record.get("article_type")
    if explicit:
        try:
            return ArticleType(str(explicit))
        except ValueError:
            return ArticleType.OTHER
    metadata = record.get("metadata") or {}
    joined = " ".join(str(v) for v in metadata.values()).lower()
    for marker, article_type in _TYPE_MARKERS:
        if marker in joined:
            return article_type
    return ArticleType.OTHER


def _record_to_document(record: dict) -> Document:
    sections = {str(k): str(v) for k, v in (record.get("sections") or {}).items()}
    metadata = {str(k): str(v) for k, v in (record.get("metadata") or {}).items()}
    return Document(
        pmid=str(record["pmid"]),
        title=str(record.get("title", "")),
        article_type=_infer_article_type(record),
        sections=sections,
        metadata=metadata,
    )


def load_corpus(path: str | Path) -> DocumentSet:
    """Load a JSON array or JSON-lines corpus file into a DocumentSet.

    Records without a pmid are skipped and counted; a later record reusing
    an already-seen pmid is skipped and counted.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            records = json.loads(text)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CorpusError(f"corpus file {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise CorpusError(f"corpus file {path} must hold a list of records")

    out = DocumentSet()
    for record in records:
        if not isinstance(record, dict) or not str(record.get("pmid") or "").strip():
            out.skipped_missing_pmid += 1
            continue
        doc = _record_to_document(record)
        if doc.pmid in out.documents:
            out.skipped_duplicate_pmid += 1
            continue
        out.documents[doc.pmid] = doc
    return out


def classify_section(section_name: str) -> SectionClass:
    """Total, case-insensitive mapping of a section name to its weight class."""
    lowered = section_name.strip().lower()
    if "abstract" in lowered:
        return SectionClass.ABSTRACT
    if "result" in lowered:
        return SectionClass.RESULTS
    if lowered in _METADATA_SECTIONS:
        return SectionClass.METADATA
    return SectionClass.OTHER


class SummaryText(str):
    """Plain string plus a flag saying the recursion cap cut summarization short."""

    truncated: bool = False

    def __new__(cls, text: str, truncated: bool = False):
        obj = super().__new__(cls, text)
        obj.truncated = truncated
        return obj


def _token_count(text: str) -> int:
    from .embedding import tokenize

    return len(tokenize(text))


_SUMMARY_PASS_CAP = 3


def hierarchical_summarize(doc: Document,
                           summarizer: Callable[[str], str],
                           threshold_tokens: int = 500) -> SummaryText:
    """Shrink a document under the token threshold by summarizing per section.

    Each pass summarizes every section independently and concatenates the
    results; passes repeat until under the threshold or the cap of
    3 passes, after which the result is flagged truncated.
    """
    if threshold_tokens <= 0:
        raise CorpusError("threshold_tokens must be positive")
    sections = dict(doc.sections)
    text = "\n\n".join(sections.values())
    if _token_count(text) <= threshold_tokens:
        return SummaryText(text)
    for _ in range(_SUMMARY_PASS_CAP):
        summarized = {}
        for name, body in sections.items():
            try:
                summarized[name] = summarizer(body)
            except Exception as exc:
                raise CorpusError(
                    f"summarizer failed on section {name!r} of {doc.pmid}: {exc}"
                ) from exc
        sections = summarized
        text = "\n\n".join(sections.values())
        if _token_count(text) <= threshold_tokens:
            return SummaryText(text)
    return SummaryText(text, truncated=True)
