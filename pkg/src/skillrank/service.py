"""Recommendation service: two-stage pipeline, A/B arms, funnel, questionnaire.

Control arm (even user ids) serves BM25-only results; treatment arm (odd ids)
serves dense retrieval re-ranked by the quantized encoder. Funnel events and
questionnaire responses land in append-only line-delimited stores on disk so
rates and aggregates can always be recomputed from scratch.
"""

from __future__ import annotations

import base64
import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from pydantic import BaseModel

from .corpus import CourseDoc, FieldVariant, Query, ingest_courses
from .dense import EmbeddingStore, cosine_topk, load_embeddings
from .lexical import LexicalIndex, index_corpus, search
from .quant import QuantConfig, apply_quantization, load_quantized_model
from .ranker import Reranker, RerankConfig
from .tokenizer import WordTokenizer
from .types import ScoredList

log = logging.getLogger(__name__)

ARMS = ("control_bm25", "treatment_rankt5")
EVENT_KINDS = ("open_skill_card", "open_course_card", "go_to_course")
SYSTEM_TAGS = ("system_a", "system_b")  # a = in-production BM25, b = two-stage
CHOICES = ("system_a", "system_b", "no_preference")
QUESTIONNAIRE_LIST_SIZE = 5


@dataclass(frozen=True)
class PipelineConfig:
    first_stage: str = "bm25"
    rerank: Optional[RerankConfig] = None
    scheme: str = "none"
    top_n: int = 10

    def __post_init__(self):
        if self.first_stage not in ("bm25", "dense"):
            raise ValueError(f"unknown first stage {self.first_stage!r}")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.rerank is not None and self.rerank.depth < self.top_n:
            raise ValueError("rerank depth must be >= top_n")


@dataclass(frozen=True)
class ABAssignment:
    user_id: int
    arm: str

    def __post_init__(self):
        if self.user_id < 0:
            raise ValueError("user_id must be non-negative")
        expected = "control_bm25" if self.user_id % 2 == 0 else "treatment_rankt5"
        if self.arm != expected:
            raise ValueError(f"user {self.user_id} must be in arm {expected}")


def assign_arm(user_id: int) -> ABAssignment:
    """Even user ids get the in-production ranker; odd ids the two-stage one."""
    if user_id < 0:
        raise ValueError("user_id must be non-negative")
    arm = "control_bm25" if user_id % 2 == 0 else "treatment_rankt5"
    return ABAssignment(user_id=user_id, arm=arm)


@dataclass(frozen=True)
class FunnelEvent:
    event_id: str
    user_id: int
    arm: str
    kind: str
    query_id: str = ""
    doc_id: Optional[str] = None
    timestamp: float = 0.0

    def __post_init__(self):
        if not self.event_id:
            raise ValueError("event_id must be non-empty")
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}")
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


class EventStore:
    """Append-only JSONL event log; duplicate event ids are ignored."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._seen: set[str] = set()
        self._events: list[FunnelEvent] = []
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    event = FunnelEvent(**json.loads(line))
                    if event.event_id not in self._seen:
                        self._seen.add(event.event_id)
                        self._events.append(event)

    def record(self, event: FunnelEvent) -> bool:
        """Returns False when the event id was already stored (idempotent)."""
        with self._lock:
            if event.event_id in self._seen:
                return False
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.__dict__) + "\n")
            self._seen.add(event.event_id)
            self._events.append(event)
            return True

    def events(self) -> list[FunnelEvent]:
        with self._lock:
            return list(self._events)


def funnel_rates(events: list[FunnelEvent], arm: str) -> dict:
    """Stage-to-stage conversion rates for one arm; 0/0 reported as 0 + flag."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    counts = {kind: 0 for kind in EVENT_KINDS}
    for event in events:
        if event.arm == arm:
            counts[event.kind] += 1
    undefined = []
    course_per_skill = 0.0
    if counts["open_skill_card"]:
        course_per_skill = counts["open_course_card"] / counts["open_skill_card"]
    else:
        undefined.append("course_per_skill")
    go_per_course = 0.0
    if counts["open_course_card"]:
        go_per_course = counts["go_to_course"] / counts["open_course_card"]
    else:
        undefined.append("go_per_course")
    return {
        "arm": arm,
        "counts": counts,
        "course_per_skill": course_per_skill,
        "go_per_course": go_per_course,
        "undefined": undefined,
    }


# ---------------------------------------------------------------------------
# Questionnaire
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreferenceResponse:
    respondent: str
    query_id: str
    choice: str
    shown_first: str
    reason: str

    def __post_init__(self):
        if self.choice not in CHOICES:
            raise ValueError(f"unknown choice {self.choice!r}")
        if self.shown_first not in SYSTEM_TAGS:
            raise ValueError(f"unknown system tag {self.shown_first!r}")
        if not self.reason.strip():
            raise ValueError("reason must be non-empty")


class PreferenceStore:
    """Append-only JSONL; the latest response per (respondent, query) wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._latest: dict[tuple[str, str], PreferenceResponse] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    r = PreferenceResponse(**json.loads(line))
                    self._latest[(r.respondent, r.query_id)] = r

    def record(self, response: PreferenceResponse) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(response.__dict__) + "\n")
            self._latest[(response.respondent, response.query_id)] = response

    def aggregate(self, query_id: str) -> dict[str, int]:
        counts = {tag: 0 for tag in CHOICES}
        with self._lock:
            for (_, qid), response in self._latest.items():
                if qid == query_id:
                    counts[response.choice] += 1
        return counts

    def responses(self) -> list[PreferenceResponse]:
        with self._lock:
            return list(self._latest.values())


def card(doc: CourseDoc) -> dict:
    """Displayed fields only; thumbnails fall back to a placeholder."""
    return {
        "doc_id": doc.id,
        "title": doc.title,
        "thumbnail": None,
        "rating": doc.rating,
        "provider": doc.provider,
        "level": doc.level,
    }


def encode_order_token(query_id: str, shown_first: str) -> str:
    return base64.urlsafe_b64encode(json.dumps({"q": query_id, "first": shown_first}).encode()).decode()


def decode_order_token(token: str) -> tuple[str, str]:
    data = json.loads(base64.urlsafe_b64decode(token.encode()).decode())
    if data.get("first") not in SYSTEM_TAGS:
        raise ValueError("corrupt order token")
    return data["q"], data["first"]


def questionnaire_pair(
    query: Query,
    system_a: ScoredList,
    system_b: ScoredList,
    docs: dict[str, CourseDoc],
    rng: random.Random,
) -> Optional[dict]:
    """Two blinded 5-card lists with a randomized, recorded display order.

    Returns None (with a warning) when either system has fewer than 5 results.
    """
    if len(system_a) < QUESTIONNAIRE_LIST_SIZE or len(system_b) < QUESTIONNAIRE_LIST_SIZE:
        log.warning(
            "query %s excluded from questionnaire: %d/%d results",
            query.id, len(system_a), len(system_b),
        )
        return None
    cards = {
        "system_a": [card(docs[d]) for d in system_a.doc_ids()[:QUESTIONNAIRE_LIST_SIZE]],
        "system_b": [card(docs[d]) for d in system_b.doc_ids()[:QUESTIONNAIRE_LIST_SIZE]],
    }
    first = rng.choice(SYSTEM_TAGS)
    second = "system_b" if first == "system_a" else "system_a"
    return {
        "query_id": query.id,
        "query_text": f"{query.skill} for {query.occupation}",
        "list_one": cards[first],
        "list_two": cards[second],
        "token": encode_order_token(query.id, first),
    }


def resolve_choice(token: str, picked: str) -> tuple[str, str, str]:
    """Map a positional pick ("first"/"second"/"none") to stable system tags."""
    query_id, first = decode_order_token(token)
    second = "system_b" if first == "system_a" else "system_a"
    if picked == "first":
        choice = first
    elif picked == "second":
        choice = second
    elif picked == "none":
        choice = "no_preference"
    else:
        raise ValueError(f"unknown pick {picked!r}")
    return query_id, first, choice


# ---------------------------------------------------------------------------
# Engine: indexes, models, pipelines
# ---------------------------------------------------------------------------

class RecommendEngine:
    """Shared read-only indexes and models for both A/B arms."""

    def __init__(
        self,
        docs: list[CourseDoc],
        lexical_index: LexicalIndex,
        doc_embeddings: Optional[EmbeddingStore],
        query_embeddings: Optional[EmbeddingStore],
        known_queries: list[Query],
        reranker: Optional[Reranker],
    ):
        self.docs = {d.id: d for d in docs}
        self.lexical_index = lexical_index
        self.doc_embeddings = doc_embeddings
        self.query_embeddings = query_embeddings
        self.known_queries = known_queries
        self._query_key = {
            (q.skill.lower(), q.occupation.lower()): q.id for q in known_queries
        }
        self.reranker = reranker

    def _dense_candidates(self, q: Query, k: int) -> Optional[ScoredList]:
        if self.doc_embeddings is None or self.query_embeddings is None:
            return None
        qid = self._query_key.get((q.skill.lower(), q.occupation.lower()))
        if qid is None or qid not in self.query_embeddings:
            return None
        return cosine_topk(self.doc_embeddings, self.query_embeddings.vector(qid), k, query_id=q.id)

    def retrieve(self, q: Query, cfg: PipelineConfig) -> ScoredList:
        """First stage retrieves rerank depth (or top_n) candidates, optional
        re-rank, truncated to top_n. Free-text queries unknown to the dense
        store fall back to BM25 retrieval (logged)."""
        k = cfg.rerank.depth if cfg.rerank else cfg.top_n
        candidates: Optional[ScoredList] = None
        if cfg.first_stage == "dense":
            candidates = self._dense_candidates(q, k)
            if candidates is None:
                log.info("no dense embedding for %r/%r; falling back to BM25", q.skill, q.occupation)
        if candidates is None:
            candidates = search(self.lexical_index, q, k)
        if candidates.entries and cfg.rerank is not None and self.reranker is not None:
            candidates = self.reranker.rerank(q, candidates, self.docs, cfg.rerank)
        return ScoredList(
            query_id=candidates.query_id,
            entries=candidates.entries[: cfg.top_n],
            stage=candidates.stage,
        )

    def recommend(self, q: Query, cfg: PipelineConfig) -> list[dict]:
        """Top-n course cards for one query under the given pipeline."""
        cards = []
        for doc_id, score in self.retrieve(q, cfg).entries:
            entry = card(self.docs[doc_id])
            entry["score"] = score
            entry["url"] = self.docs[doc_id].url
            cards.append(entry)
        return cards


@dataclass
class ServiceConfig:
    """Parsed pipeline.conf; all paths resolved against the config directory."""

    courses: Path
    doc_embeddings: Optional[Path]
    query_embeddings: Optional[Path]
    queries: Optional[Path]
    weights: Optional[Path]
    vocab: Optional[Path]
    vocab_size: int
    scheme: str
    rerank: Optional[RerankConfig]
    first_stage: str
    top_n: int
    event_store: Path
    preference_store: Path

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent

        def resolve(key: str) -> Optional[Path]:
            value = raw.get(key)
            return None if value is None else (base / value)

        rerank = None
        if raw.get("rerank"):
            r = raw["rerank"]
            rerank = RerankConfig(
                depth=r.get("depth", 20),
                max_input_len=r.get("max_input_len", 256),
                variant=FieldVariant.parse(r.get("variant", "original")),
                include_skill_desc=r.get("include_skill_desc", False),
            )
        return cls(
            courses=base / raw["courses"],
            doc_embeddings=resolve("doc_embeddings"),
            query_embeddings=resolve("query_embeddings"),
            queries=resolve("queries"),
            weights=resolve("weights"),
            vocab=resolve("vocab"),
            vocab_size=raw.get("vocab_size", 4096),
            scheme=raw.get("scheme", "dynamic"),
            rerank=rerank,
            first_stage=raw.get("first_stage", "dense"),
            top_n=raw.get("top_n", 10),
            event_store=base / raw.get("event_store", "stores/events.jsonl"),
            preference_store=base / raw.get("preference_store", "stores/preferences.jsonl"),
        )


def load_queries_tsv(path: str | Path) -> list[Query]:
    queries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"{path}: bad query line {line!r}")
        queries.append(Query(
            id=parts[0], skill=parts[1], occupation=parts[2],
            skill_description=parts[3] if len(parts) > 3 and parts[3] else None,
        ))
    return queries


def build_engine(config: ServiceConfig) -> RecommendEngine:
    docs = ingest_courses(config.courses)
    lexical_index = index_corpus(docs, variant=FieldVariant())
    doc_store = load_embeddings(config.doc_embeddings) if config.doc_embeddings else None
    query_store = load_embeddings(config.query_embeddings) if config.query_embeddings else None
    known_queries = load_queries_tsv(config.queries) if config.queries else []

    reranker = None
    if config.weights is not None:
        model = load_quantized_model(config.weights)
        if model.scheme == "none" and config.scheme != "none":
            model = apply_quantization(model, QuantConfig(scheme=config.scheme))
        if config.vocab is not None:
            tokenizer = WordTokenizer.from_vocab_file(config.vocab, model.config.vocab_size)
        else:
            tokenizer = WordTokenizer(model.config.vocab_size)
        reranker = Reranker(model, tokenizer)
    return RecommendEngine(
        docs=docs,
        lexical_index=lexical_index,
        doc_embeddings=doc_store,
        query_embeddings=query_store,
        known_queries=known_queries,
        reranker=reranker,
    )


# ---------------------------------------------------------------------------
# HTTP app
# ---------------------------------------------------------------------------

def arm_pipelines(config: ServiceConfig) -> dict[str, PipelineConfig]:
    control = PipelineConfig(first_stage="bm25", rerank=None, scheme="none", top_n=config.top_n)
    treatment = PipelineConfig(
        first_stage=config.first_stage,
        rerank=config.rerank,
        scheme=config.scheme,
        top_n=config.top_n,
    )
    return {"control_bm25": control, "treatment_rankt5": treatment}


class EventBody(BaseModel):
    event_id: str
    user_id: int
    arm: str
    kind: str
    query_id: str = ""
    doc_id: Optional[str] = None
    timestamp: float = 0.0


class ResponseBody(BaseModel):
    respondent: str
    query_id: str
    token: str
    picked: str  # "first" | "second" | "none"
    reason: str


def create_app(config_path: str | Path):
    from fastapi import FastAPI, HTTPException
    from fastapi.staticfiles import StaticFiles

    config = ServiceConfig.load(config_path)
    engine = build_engine(config)
    events = EventStore(config.event_store)
    preferences = PreferenceStore(config.preference_store)
    pipelines = arm_pipelines(config)
    system_pipeline = {"system_a": pipelines["control_bm25"], "system_b": pipelines["treatment_rankt5"]}

    app = FastAPI(title="skillrank")

    @app.get("/recommend")
    def recommend(skill: str, occupation: str, user_id: int):
        if user_id < 0:
            raise HTTPException(status_code=422, detail="user_id must be non-negative")
        assignment = assign_arm(user_id)
        q = Query(id=f"live-{user_id}", skill=skill, occupation=occupation)
        cards = engine.recommend(q, pipelines[assignment.arm])
        return {"arm": assignment.arm, "results": cards}

    @app.post("/events")
    def post_event(body: EventBody):
        try:
            event = FunnelEvent(**body.model_dump())
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if not event.timestamp:
            event = FunnelEvent(**{**event.__dict__, "timestamp": time.time()})
        stored = events.record(event)
        return {"stored": stored, "event_id": event.event_id}

    @app.get("/funnel")
    def get_funnel(arm: str):
        if arm not in ARMS:
            raise HTTPException(status_code=422, detail=f"unknown arm {arm!r}")
        return funnel_rates(events.events(), arm)

    # The systems' rankings are deterministic; compute them once and only
    # randomize display order per respondent.
    question_results = [
        (q, {tag: engine.retrieve(q, pipeline) for tag, pipeline in system_pipeline.items()})
        for q in engine.known_queries
    ]

    @app.get("/questionnaire/pairs")
    def get_pairs(respondent: str):
        rng = random.Random(f"pairs:{respondent}")
        pairs = []
        for q, results in question_results:
            pair = questionnaire_pair(q, results["system_a"], results["system_b"], engine.docs, rng)
            if pair is not None:
                pairs.append(pair)
        return {"respondent": respondent, "pairs": pairs}

    @app.post("/questionnaire/responses")
    def post_response(body: ResponseBody):
        if not body.reason.strip():
            raise HTTPException(status_code=422, detail="reason must be non-empty")
        try:
            query_id, shown_first, choice = resolve_choice(body.token, body.picked)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        if query_id != body.query_id:
            raise HTTPException(status_code=422, detail="token does not match query_id")
        response = PreferenceResponse(
            respondent=body.respondent,
            query_id=query_id,
            choice=choice,
            shown_first=shown_first,
            reason=body.reason,
        )
        preferences.record(response)
        return {"stored": True}

    @app.get("/questionnaire/results")
    def get_results():
        return {
            q.id: preferences.aggregate(q.id)
            for q in engine.known_queries
        }

    frontend_dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if frontend_dist.is_dir():
        app.mount("/", StaticFiles(directory=frontend_dist, html=True), name="frontend")

    app.state.engine = engine
    app.state.events = events
    app.state.preferences = preferences
    return app
