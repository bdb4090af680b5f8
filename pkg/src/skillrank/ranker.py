"""Scoring head, re-ranking, listwise softmax loss, and hard-negative lists."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import CourseDoc, FieldVariant, Query, build_rerank_input
from .encoder import Model, TokenBatch
from .tokenizer import WordTokenizer
from .types import ScoredList

log = logging.getLogger(__name__)

MAX_INPUT_LENS = (128, 256, 512)


@dataclass(frozen=True)
class RerankConfig:
    depth: int = 20
    max_input_len: int = 256
    variant: FieldVariant = field(default_factory=FieldVariant)
    include_skill_desc: bool = False

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.max_input_len not in MAX_INPUT_LENS:
            raise ValueError(f"max_input_len must be one of {MAX_INPUT_LENS}")


@dataclass
class TrainList:
    """One listwise training example: doc ids plus binary relevance labels."""

    query_id: str
    doc_ids: list[str]
    labels: list[int]

    def __post_init__(self):
        if len(self.doc_ids) != len(self.labels):
            raise ValueError("doc_ids and labels must have equal length")
        if not any(self.labels):
            raise ValueError(f"train list for {self.query_id} has no positive label")


def truncate_tokens(ids: list[int], max_len: int) -> list[int]:
    """Keep the first min(len, max_len) tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return ids[:max_len]


def listwise_softmax_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """-sum_i y_i * log softmax(scores)_i with y = labels / sum(labels)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    total = labels.sum()
    if total <= 0:
        raise ValueError("at least one positive label required")
    shifted = scores - scores.max()
    log_softmax = shifted - np.log(np.exp(shifted).sum())
    return float(-(labels / total) @ log_softmax)


def loss_gradient(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d loss / d scores = softmax(scores) - labels / sum(labels)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    total = labels.sum()
    if total <= 0:
        raise ValueError("at least one positive label required")
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum() - labels / total


def rerank_by_scores(candidates: ScoredList, scores: dict[str, float], depth: int) -> ScoredList:
    """Sort the top-`depth` candidates by the given scores (ties by doc id);
    append the remaining candidates below in their first-stage order.

    Tail entries keep their relative order but get synthetic strictly
    decreasing scores below the rescored head, so the output satisfies the
    non-increasing score invariant. depth 0 only updates the stage tag.
    """
    if not candidates.entries:
        raise ValueError("rerank requires a non-empty candidate list")
    if depth == 0:
        return ScoredList(
            query_id=candidates.query_id, entries=list(candidates.entries), stage="reranked"
        )
    head = candidates.entries[:depth]
    tail = candidates.entries[depth:]
    entries = sorted(
        ((doc_id, float(scores[doc_id])) for doc_id, _ in head),
        key=lambda item: (-item[1], item[0]),
    )
    floor = min(score for _, score in entries)
    for i, (doc_id, _) in enumerate(tail):
        entries.append((doc_id, floor - (i + 1)))
    return ScoredList(query_id=candidates.query_id, entries=entries, stage="reranked")


class Reranker:
    """Bundles the encoder model with a tokenizer and the pooling choice."""

    def __init__(self, model: Model, tokenizer: WordTokenizer, pooling: str = "first"):
        if pooling not in ("first", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.model = model
        self.tokenizer = tokenizer
        self.pooling = pooling

    def _pool(self, hidden: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
        if self.pooling == "first":
            return hidden[:, 0, :].contiguous()
        m = torch.from_numpy(mask).to(torch.float32).unsqueeze(-1)
        return (hidden * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)

    def pooled_features(self, texts: list[str], max_len: int) -> torch.Tensor:
        seqs = [truncate_tokens(self.tokenizer.encode(t), max_len) for t in texts]
        batch = TokenBatch.from_sequences(seqs)
        hidden = self.model.hidden_states(batch)
        return self._pool(hidden, batch.mask)

    def score_texts(self, texts: list[str], max_len: int) -> np.ndarray:
        """Scores for prepared re-rank input strings, one batch."""
        if not texts:
            return np.zeros(0, dtype=np.float32)
        pooled = self.pooled_features(texts, max_len)
        scores = self.model.apply_linear("head.proj", pooled)
        return scores.numpy().reshape(-1)

    def score(self, q: Query, doc: CourseDoc, cfg: RerankConfig) -> float:
        """Build the re-rank input, encode, pool, project to a scalar."""
        if cfg.max_input_len > self.model.config.max_input_len:
            raise ValueError("rerank max_input_len exceeds the encoder's max input length")
        text = build_rerank_input(q, doc, cfg.variant, cfg.include_skill_desc)
        return float(self.score_texts([text], cfg.max_input_len)[0])

    def rerank(
        self,
        q: Query,
        candidates: ScoredList,
        docs: dict[str, CourseDoc],
        cfg: RerankConfig,
    ) -> ScoredList:
        """Rescore the top-`depth` candidates; keep the tail in first-stage order."""
        if cfg.depth == 0:
            return rerank_by_scores(candidates, {}, 0)
        head_ids = [doc_id for doc_id, _ in candidates.entries[: cfg.depth]]
        texts = [
            build_rerank_input(q, docs[doc_id], cfg.variant, cfg.include_skill_desc)
            for doc_id in head_ids
        ]
        scores = self.score_texts(texts, cfg.max_input_len)
        return rerank_by_scores(candidates, dict(zip(head_ids, scores.tolist())), cfg.depth)


def sample_hard_negatives(
    run: ScoredList,
    qrels_for_query: dict[str, int],
    list_size: int = 36,
    seed: int = 0,
) -> TrainList | None:
    """One uniformly chosen positive plus (list_size - 1) negatives sampled
    without replacement from run docs lacking a positive label.

    Returns None (skip signal) when the query has no positively labelled doc.
    """
    positives = sorted(d for d, grade in qrels_for_query.items() if grade >= 1)
    if not positives:
        log.info("query %s has no positive label, skipped", run.query_id)
        return None
    if len(run) < list_size:
        raise ValueError(f"run depth {len(run)} below list size {list_size}")
    negatives = [d for d in run.doc_ids() if qrels_for_query.get(d, 0) < 1]
    if len(negatives) < list_size - 1:
        raise ValueError(
            f"query {run.query_id}: only {len(negatives)} negatives for list size {list_size}"
        )
    rng = np.random.default_rng(seed)
    positive = positives[int(rng.integers(len(positives)))]
    chosen = rng.choice(len(negatives), size=list_size - 1, replace=False)
    doc_ids = [positive] + [negatives[i] for i in chosen]
    labels = [1] + [0] * (list_size - 1)
    return TrainList(query_id=run.query_id, doc_ids=doc_ids, labels=labels)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"non-finite loss at step {step}")
        self.trace = trace


def train_toy(
    reranker: Reranker,
    lists: list[TrainList],
    queries: dict[str, Query],
    docs: dict[str, CourseDoc],
    cfg: RerankConfig,
    lr: float = 1e-4,
    steps: int = 50,
) -> list[float]:
    """Plain gradient descent on the scoring head against the listwise loss.

    The encoder stays frozen, so pooled features are computed once per list.
    Returns the per-step loss trace; the head weight is updated in place.
    """
    features = []
    for tl in lists:
        texts = [
            build_rerank_input(queries[tl.query_id], docs[d], cfg.variant, cfg.include_skill_desc)
            for d in tl.doc_ids
        ]
        feats = reranker.pooled_features(texts, cfg.max_input_len).numpy().astype(np.float64)
        features.append((feats, np.array(tl.labels, dtype=np.float64)))

    head = reranker.model.linears["head.proj"]
    w = head.weight.numpy().astype(np.float64).reshape(-1)
    trace: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected, not raised
        for step in range(steps):
            total_loss = 0.0
            grad = np.zeros_like(w)
            for feats, labels in features:
                scores = feats @ w
                total_loss += listwise_softmax_loss(scores, labels)
                grad += feats.T @ loss_gradient(scores, labels)
            trace.append(total_loss)
            if not np.isfinite(total_loss):
                raise TrainingDiverged(step, trace)
            w = w - lr * grad
    head.weight = torch.from_numpy(w.astype(np.float32).reshape(-1, 1))
    return trace
