"""Shared result types passed between retrieval stages."""

from __future__ import annotations

from dataclasses import dataclass, field

STAGES = ("lexical", "dense", "reranked")


@dataclass
class ScoredList:
    """Ordered (doc id, score) results for one query, produced by any stage.

    Scores are non-increasing and doc ids unique; both are enforced on
    construction.
    """

    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)
    stage: str = "lexical"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        ids = [doc_id for doc_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"query {self.query_id}: duplicate doc ids in scored list")
        scores = [score for _, score in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"query {self.query_id}: scores must be non-increasing")

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)
