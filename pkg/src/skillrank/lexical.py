"""Field-weighted BM25 index with the in-production exact-title-match boost.

Scoring is classic Okapi BM25 computed per field (title, description), with
idf = ln(1 + (N - df + 0.5)/(df + 0.5)), combined as a weighted sum. When the
analyzed course title equals the analyzed skill text as a full string, the
combined score is multiplied by the exact-title boost (7.0 by default).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .corpus import CourseDoc, FieldVariant, Query, build_query_text
from .types import ScoredList

INDEX_FORMAT = "skillrank-lexical-index"
INDEX_VERSION = 1

# Tokens start with a word character; "+" and "#" survive inside/after words
# so IT skill names like "c++" and "c#" stay intact.
_TOKEN_RE = re.compile(r"\w[\w+#]*")


def analyze(text: str) -> list[str]:
    """Lowercase, Unicode-aware word split; punctuation dropped."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75
    title_weight: float = 2.0
    desc_weight: float = 1.0
    exact_title_boost: float = 7.0

    def __post_init__(self):
        if self.k1 <= 0 or not (0.0 <= self.b <= 1.0):
            raise ValueError(f"bad BM25 constants k1={self.k1} b={self.b}")
        if min(self.title_weight, self.desc_weight, self.exact_title_boost) <= 0:
            raise ValueError("field weights and boost must be positive")


@dataclass
class _FieldIndex:
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_len: dict[str, int] = field(default_factory=dict)
    avg_len: float = 0.0


@dataclass
class LexicalIndex:
    params: Bm25Params
    variant: str
    doc_count: int
    fields: dict[str, _FieldIndex]
    normalized_title: dict[str, str]


def index_corpus(
    corpus: list[CourseDoc],
    variant: FieldVariant = FieldVariant(),
    params: Bm25Params = Bm25Params(),
) -> LexicalIndex:
    """Build title and description postings; the description field uses `variant`."""
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    fields = {"title": _FieldIndex(), "description": _FieldIndex()}
    normalized_title = {}
    for doc in corpus:
        texts = {"title": doc.title, "description": variant.resolve(doc)}
        normalized_title[doc.id] = " ".join(analyze(doc.title))
        for name, text in texts.items():
            tokens = analyze(text)
            fidx = fields[name]
            fidx.doc_len[doc.id] = len(tokens)
            counts: dict[str, int] = {}
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
            for term, tf in counts.items():
                fidx.postings.setdefault(term, []).append((doc.id, tf))
    for fidx in fields.values():
        for plist in fidx.postings.values():
            plist.sort(key=lambda entry: entry[0])
        fidx.avg_len = sum(fidx.doc_len.values()) / len(corpus)
    return LexicalIndex(
        params=params,
        variant=str(variant),
        doc_count=len(corpus),
        fields=fields,
        normalized_title=normalized_title,
    )


def _field_scores(fidx: _FieldIndex, terms: list[str], n_docs: int, params: Bm25Params) -> dict[str, float]:
    scores: dict[str, float] = {}
    k1, b = params.k1, params.b
    avg = fidx.avg_len
    for term in terms:  # duplicates in the query score once per occurrence
        plist = fidx.postings.get(term)
        if not plist:
            continue
        df = len(plist)
        idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        for doc_id, tf in plist:
            dl = fidx.doc_len[doc_id]
            norm = dl / avg if avg else 0.0
            contribution = idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
            scores[doc_id] = scores.get(doc_id, 0.0) + contribution
    return scores


def search(index: LexicalIndex, q: Query, k: int) -> ScoredList:
    """Top-k by weighted-sum BM25 with the exact-title-match multiplier.

    Only docs matching at least one query term appear; ties break by doc id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    params = index.params
    terms = analyze(build_query_text(q))
    title_scores = _field_scores(index.fields["title"], terms, index.doc_count, params)
    desc_scores = _field_scores(index.fields["description"], terms, index.doc_count, params)
    skill_norm = " ".join(analyze(q.skill))
    combined: dict[str, float] = {}
    for doc_id in title_scores.keys() | desc_scores.keys():
        score = (
            params.title_weight * title_scores.get(doc_id, 0.0)
            + params.desc_weight * desc_scores.get(doc_id, 0.0)
        )
        if index.normalized_title[doc_id] == skill_norm:
            score = score * params.exact_title_boost
        combined[doc_id] = score
    ranked = sorted(combined.items(), key=lambda item: (-item[1], item[0]))[:k]
    return ScoredList(query_id=q.id, entries=ranked, stage="lexical")


def save_index(index: LexicalIndex, path: str | Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "params": asdict(index.params),
        "variant": index.variant,
        "doc_count": index.doc_count,
        "normalized_title": index.normalized_title,
        "fields": {
            name: {
                "avg_len": fidx.avg_len,
                "doc_len": fidx.doc_len,
                "postings": {term: [[d, tf] for d, tf in plist] for term, plist in fidx.postings.items()},
            }
            for name, fidx in index.fields.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False)


def load_index(path: str | Path) -> LexicalIndex:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != INDEX_FORMAT:
        raise ValueError(f"{path}: not a {INDEX_FORMAT} file")
    if payload.get("version") != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {payload.get('version')}")
    fields = {}
    for name, data in payload["fields"].items():
        fields[name] = _FieldIndex(
            postings={term: [(d, tf) for d, tf in plist] for term, plist in data["postings"].items()},
            doc_len=data["doc_len"],
            avg_len=data["avg_len"],
        )
    return LexicalIndex(
        params=Bm25Params(**payload["params"]),
        variant=payload["variant"],
        doc_count=payload["doc_count"],
        fields=fields,
        normalized_title=payload["normalized_title"],
    )
