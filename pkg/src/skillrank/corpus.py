"""Course corpus ingestion, HTML cleanup, and query/document text templates."""

from __future__ import annotations

import html
import json
import logging
import re
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Iterable, Optional

log = logging.getLogger(__name__)

PROVIDERS = frozenset({"udemy", "udemy_business", "edx", "goodhabitz", "other"})

# Tags that imply a word break when stripped. Inline tags (b, i, em, ...) do not.
_BLOCK_TAGS = frozenset({
    "p", "div", "br", "li", "ul", "ol", "tr", "td", "th", "table", "h1", "h2",
    "h3", "h4", "h5", "h6", "section", "article", "header", "footer", "blockquote",
    "pre", "hr",
})

SUMMARIZATION_PROMPT = (
    "I will provide you with a course title and description of an online course "
    "that I want you to summarize in 2 to 3 lines.\n"
    "I want the summary to only include information about the content of the course. "
    "You can leave out any information about the author, at which company the course "
    "is used and information about a 30 day money back guarantee.\n"
    "You can also leave out any student reviews about the course. I want you to write "
    "the summary as if it were a new shortened course description.\n"
    "Course title: {title}\n"
    "Course description: {description}"
)


@dataclass(frozen=True)
class CourseDoc:
    """One course with provider metadata and description variants."""

    id: str
    provider: str
    title: str
    description: str = ""
    summaries: dict[str, str] = field(default_factory=dict)
    level: Optional[str] = None
    rating: Optional[float] = None
    url: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("course id must be non-empty")
        if not self.title:
            raise ValueError(f"course {self.id}: title must be non-empty")
        if self.provider not in PROVIDERS:
            raise ValueError(f"course {self.id}: unknown provider {self.provider!r}")
        if self.rating is not None and not (0.0 <= self.rating <= 5.0):
            raise ValueError(f"course {self.id}: rating {self.rating} outside [0, 5]")
        for name, text in self.summaries.items():
            if not text:
                raise ValueError(f"course {self.id}: empty summary variant {name!r}")


@dataclass(frozen=True)
class Query:
    """A skill--occupation pair, optionally with a short skill description."""

    id: str
    skill: str
    occupation: str
    skill_description: Optional[str] = None

    def __post_init__(self):
        if not self.skill or not self.occupation:
            raise ValueError(f"query {self.id}: skill and occupation must be non-empty")


@dataclass(frozen=True)
class FieldVariant:
    """Which description text to use: the original or a named summary.

    Docs missing the requested summary fall back to the original description
    (logged as a warning) so partial summary coverage never breaks indexing.
    """

    kind: str = "original"
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("original", "summary"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.kind == "summary" and not self.name:
            raise ValueError("summary variant requires a name")

    @classmethod
    def original(cls) -> "FieldVariant":
        return cls("original")

    @classmethod
    def summary(cls, name: str) -> "FieldVariant":
        return cls("summary", name)

    @classmethod
    def parse(cls, spec: str) -> "FieldVariant":
        """Parse the CLI form: "original" or "summary:<name>"."""
        if spec == "original":
            return cls.original()
        if spec.startswith("summary:"):
            return cls.summary(spec.split(":", 1)[1])
        raise ValueError(f"bad variant spec {spec!r} (use 'original' or 'summary:<name>')")

    def __str__(self) -> str:
        return self.kind if self.kind == "original" else f"summary:{self.name}"

    def resolve(self, doc: CourseDoc) -> str:
        """Return the description text for this variant, falling back if missing."""
        if self.kind == "summary":
            text = doc.summaries.get(self.name or "")
            if text is not None:
                return text
            log.warning("doc %s has no %r summary, falling back to original", doc.id, self.name)
        return doc.description


@dataclass
class CorpusStats:
    """Token-length distribution of title+description per provider."""

    histogram: dict[str, list[int]]
    bucket_width: int
    over_limit_fraction: float
    limit: int

    def total_count(self) -> int:
        return sum(sum(counts) for counts in self.histogram.values())


class _TagStripper(HTMLParser):
    def __init__(self):
        # charrefs already decoded before parsing; see strip_html
        super().__init__(convert_charrefs=False)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in ("script", "style"):
            self._skip_depth += 1
        if tag in _BLOCK_TAGS:
            self.parts.append(" ")

    def handle_endtag(self, tag):
        if tag in ("script", "style") and self._skip_depth > 0:
            self._skip_depth -= 1
        if tag in _BLOCK_TAGS:
            self.parts.append(" ")

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)

    def handle_entityref(self, name):
        if not self._skip_depth:
            self.parts.append(f"&{name};")

    def handle_charref(self, name):
        if not self._skip_depth:
            self.parts.append(f"&#{name};")


def strip_html(raw: str) -> str:
    """Convert HTML to plain text: tags removed, entities decoded, whitespace collapsed.

    Entities are decoded to a fixpoint *before* tag removal so the result is
    idempotent: a second pass finds neither tags nor decodable entities.
    Malformed markup is handled best-effort by the tolerant stdlib parser.
    """
    text = raw
    for _ in range(10):  # fixpoint decode; bounded against pathological nesting
        decoded = html.unescape(text)
        if decoded == text:
            break
        text = decoded
    parser = _TagStripper()
    parser.feed(text)
    parser.close()
    return re.sub(r"\s+", " ", "".join(parser.parts)).strip()


def ingest_courses(path: str | Path) -> list[CourseDoc]:
    """Load a line-delimited course file (one JSON object per line).

    Blank lines are skipped. Malformed lines and duplicate ids raise ValueError
    naming the offending line / id.
    """
    docs: list[CourseDoc] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
            try:
                doc = CourseDoc(
                    id=str(record["id"]),
                    provider=record.get("provider", "other"),
                    title=record["title"],
                    description=record.get("description", ""),
                    summaries=dict(record.get("summaries") or {}),
                    level=record.get("level"),
                    rating=record.get("rating"),
                    url=record.get("url"),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if doc.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {doc.id}")
            seen.add(doc.id)
            docs.append(doc)
    return docs


def write_courses(docs: Iterable[CourseDoc], path: str | Path) -> None:
    """Write courses in the same line-delimited format ingest_courses reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            record = {
                "id": doc.id,
                "provider": doc.provider,
                "title": doc.title,
                "description": doc.description,
                "summaries": doc.summaries,
                "level": doc.level,
                "rating": doc.rating,
                "url": doc.url,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def build_query_text(q: Query) -> str:
    """Render the retrieval query, e.g. "Python for Data Analyst"."""
    return f"{q.skill} for {q.occupation}"


def build_document_text(doc: CourseDoc, variant: FieldVariant = FieldVariant()) -> str:
    """Render the document-side text: "Title: <title> Description: <description>"."""
    return f"Title: {doc.title} Description: {variant.resolve(doc)}"


def build_rerank_input(
    q: Query,
    doc: CourseDoc,
    variant: FieldVariant = FieldVariant(),
    include_skill_desc: bool = False,
) -> str:
    """Render the re-ranker input: "Query: <query> Document: <document>".

    With include_skill_desc, the skill description is appended to the query
    segment with a ". " separator before the Document part.
    """
    query_text = build_query_text(q)
    if include_skill_desc:
        if not q.skill_description:
            raise ValueError(f"query {q.id}: include_skill_desc set but no skill_description")
        query_text = f"{query_text}. {q.skill_description}"
    return f"Query: {query_text} Document: {build_document_text(doc, variant)}"


def build_summarization_prompt(doc: CourseDoc) -> str:
    """Render the fixed summarization instruction prompt for one course."""
    return SUMMARIZATION_PROMPT.format(title=doc.title, description=doc.description)


def corpus_stats(
    corpus: list[CourseDoc],
    tokenizer: Callable[[str], list],
    limit: int = 512,
    bucket_width: int = 64,
) -> CorpusStats:
    """Token-length histogram of title+description per provider.

    over_limit_fraction counts docs whose tokenized length is strictly greater
    than `limit`.
    """
    if not corpus:
        raise ValueError("corpus_stats requires a non-empty corpus")
    histogram: dict[str, list[int]] = {}
    over = 0
    for doc in corpus:
        n_tokens = len(tokenizer(f"{doc.title} {doc.description}"))
        if n_tokens > limit:
            over += 1
        counts = histogram.setdefault(doc.provider, [])
        bucket = n_tokens // bucket_width
        if bucket >= len(counts):
            counts.extend([0] * (bucket - len(counts) + 1))
        counts[bucket] += 1
    return CorpusStats(
        histogram=histogram,
        bucket_width=bucket_width,
        over_limit_fraction=over / len(corpus),
        limit=limit,
    )
