import json
import random

import pytest
from fastapi.testclient import TestClient

from skillrank.corpus import Query
from skillrank.ranker import RerankConfig
from skillrank.service import (
    EventStore,
    FunnelEvent,
    PipelineConfig,
    PreferenceResponse,
    PreferenceStore,
    ServiceConfig,
    assign_arm,
    build_engine,
    create_app,
    decode_order_token,
    funnel_rates,
    questionnaire_pair,
    resolve_choice,
)
from skillrank.types import ScoredList

from .conftest import DATA_DIR


def write_config(tmp_path, **overrides):
    raw = json.loads((DATA_DIR / "pipeline.conf").read_text())
    for key in ("courses", "doc_embeddings", "query_embeddings", "queries", "qrels", "weights", "vocab"):
        raw[key] = str(DATA_DIR / raw[key])
    raw["event_store"] = str(tmp_path / "events.jsonl")
    raw["preference_store"] = str(tmp_path / "preferences.jsonl")
    raw.update(overrides)
    path = tmp_path / "pipeline.conf"
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def app(tmp_path_factory):
    config_path = write_config(tmp_path_factory.mktemp("service"))
    return create_app(config_path)


@pytest.fixture(scope="module")
def client(app):
    return TestClient(app)


def event(event_id, arm="control_bm25", kind="open_skill_card", user_id=2):
    return FunnelEvent(event_id=event_id, user_id=user_id, arm=arm, kind=kind, query_id="q0")


class TestAssignArm:
    def test_even_is_control(self):
        assert assign_arm(2).arm == "control_bm25"
        assert assign_arm(0).arm == "control_bm25"

    def test_odd_is_treatment(self):
        assert assign_arm(3).arm == "treatment_rankt5"

    def test_balanced_over_first_thousand(self):
        arms = [assign_arm(i).arm for i in range(1000)]
        assert arms.count("control_bm25") == 500
        assert arms.count("treatment_rankt5") == 500

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            assign_arm(-1)


class TestEventStore:
    def test_record_and_idempotency(self, tmp_path):
        store = EventStore(tmp_path / "events.jsonl")
        assert store.record(event("e1")) is True
        assert len(store.events()) == 1
        assert store.record(event("e1")) is False
        assert len(store.events()) == 1

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            FunnelEvent(event_id="e", user_id=1, arm="control_bm25", kind="hover")

    def test_reload_from_disk(self, tmp_path):
        path = tmp_path / "events.jsonl"
        store = EventStore(path)
        store.record(event("e1"))
        store.record(event("e2", kind="open_course_card"))
        reloaded = EventStore(path)
        assert len(reloaded.events()) == 2
        assert reloaded.record(event("e1")) is False


class TestFunnelRates:
    def synth_events(self):
        events = []
        for i in range(1000):
            events.append(event(f"s{i}", kind="open_skill_card"))
        for i in range(500):
            events.append(event(f"c{i}", kind="open_course_card"))
        for i in range(145):
            events.append(event(f"g{i}", kind="go_to_course"))
        # other-arm noise must not leak in
        events.append(event("x1", arm="treatment_rankt5", kind="open_skill_card", user_id=3))
        return events

    def test_reported_contrast_rates(self):
        rates = funnel_rates(self.synth_events(), "control_bm25")
        assert rates["course_per_skill"] == pytest.approx(0.50)
        assert rates["go_per_course"] == pytest.approx(0.29)
        assert rates["counts"]["open_skill_card"] == 1000

    def test_zero_over_zero_flagged(self):
        rates = funnel_rates([], "control_bm25")
        assert rates["course_per_skill"] == 0.0
        assert "course_per_skill" in rates["undefined"]

    def test_single_user_full_funnel(self):
        events = [
            event("a", kind="open_skill_card"),
            event("b", kind="open_course_card"),
            event("c", kind="go_to_course"),
        ]
        rates = funnel_rates(events, "control_bm25")
        assert rates["course_per_skill"] == 1.0
        assert rates["go_per_course"] == 1.0


class TestPipelineConfig:
    def test_rerank_depth_must_cover_top_n(self):
        with pytest.raises(ValueError, match="depth"):
            PipelineConfig(first_stage="dense", rerank=RerankConfig(depth=5), top_n=10)

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            PipelineConfig(first_stage="hybrid")


class TestQuestionnairePair:
    def scored(self, ids, qid="q0"):
        return ScoredList(query_id=qid, entries=[(d, float(-i)) for i, d in enumerate(ids)], stage="lexical")

    def test_top_five_of_each(self, mini_docs_by_id, mini_queries):
        ids = list(mini_docs_by_id)
        pair = questionnaire_pair(
            mini_queries[0], self.scored(ids[:10]), self.scored(ids[10:20]),
            mini_docs_by_id, random.Random(0),
        )
        assert len(pair["list_one"]) == 5 and len(pair["list_two"]) == 5
        assert set(pair["list_one"][0]) == {"doc_id", "title", "thumbnail", "rating", "provider", "level"}

    def test_short_system_excluded_with_warning(self, mini_docs_by_id, mini_queries, caplog):
        ids = list(mini_docs_by_id)
        with caplog.at_level("WARNING"):
            pair = questionnaire_pair(
                mini_queries[0], self.scored(ids[:4]), self.scored(ids[10:20]),
                mini_docs_by_id, random.Random(0),
            )
        assert pair is None
        assert "excluded" in caplog.text

    def test_blinding_no_system_tags_in_cards(self, mini_docs_by_id, mini_queries):
        ids = list(mini_docs_by_id)
        pair = questionnaire_pair(
            mini_queries[0], self.scored(ids[:5]), self.scored(ids[5:10]),
            mini_docs_by_id, random.Random(1),
        )
        rendered = json.dumps(pair["list_one"] + pair["list_two"])
        assert "system_a" not in rendered and "system_b" not in rendered

    def test_first_position_roughly_balanced(self, mini_docs_by_id, mini_queries):
        ids = list(mini_docs_by_id)
        rng = random.Random(42)
        firsts = []
        for _ in range(400):
            pair = questionnaire_pair(
                mini_queries[0], self.scored(ids[:5]), self.scored(ids[5:10]),
                mini_docs_by_id, rng,
            )
            firsts.append(decode_order_token(pair["token"])[1])
        count_a = firsts.count("system_a")
        assert 140 <= count_a <= 260

    def test_resolve_choice_mapping(self):
        from skillrank.service import encode_order_token

        token = encode_order_token("q3", "system_b")
        assert resolve_choice(token, "first") == ("q3", "system_b", "system_b")
        assert resolve_choice(token, "second") == ("q3", "system_b", "system_a")
        assert resolve_choice(token, "none") == ("q3", "system_b", "no_preference")
        with pytest.raises(ValueError):
            resolve_choice(token, "both")


class TestPreferenceStore:
    def response(self, respondent="r1", qid="q0", choice="system_a", reason="clearer titles"):
        return PreferenceResponse(
            respondent=respondent, query_id=qid, choice=choice,
            shown_first="system_a", reason=reason,
        )

    def test_empty_reason_rejected(self):
        with pytest.raises(ValueError, match="reason"):
            self.response(reason="   ")

    def test_counts_sum_to_respondents(self, tmp_path):
        store = PreferenceStore(tmp_path / "prefs.jsonl")
        for i in range(29):
            choice = ["system_a", "system_b", "no_preference"][i % 3]
            store.record(self.response(respondent=f"r{i}", choice=choice))
        counts = store.aggregate("q0")
        assert sum(counts.values()) == 29

    def test_duplicate_respondent_query_latest_wins(self, tmp_path):
        store = PreferenceStore(tmp_path / "prefs.jsonl")
        store.record(self.response(choice="system_a"))
        store.record(self.response(choice="system_b"))
        counts = store.aggregate("q0")
        assert counts == {"system_a": 0, "system_b": 1, "no_preference": 0}

    def test_reload_keeps_latest(self, tmp_path):
        path = tmp_path / "prefs.jsonl"
        store = PreferenceStore(path)
        store.record(self.response(choice="system_a"))
        store.record(self.response(choice="no_preference"))
        reloaded = PreferenceStore(path)
        assert reloaded.aggregate("q0")["no_preference"] == 1


class TestEngine:
    @pytest.fixture(scope="class")
    def engine(self, tmp_path_factory):
        config = ServiceConfig.load(write_config(tmp_path_factory.mktemp("engine")))
        return build_engine(config)

    def test_bm25_only_pipeline(self, engine):
        cards = engine.recommend(
            Query(id="live", skill="Python", occupation="Data Analyst"),
            PipelineConfig(first_stage="bm25", top_n=10),
        )
        assert len(cards) == 10
        assert any("Python" in c["title"] for c in cards)

    def test_treatment_pipeline_uses_dense_and_rerank(self, engine):
        cfg = PipelineConfig(
            first_stage="dense",
            rerank=RerankConfig(depth=20, max_input_len=256),
            scheme="dynamic",
            top_n=10,
        )
        result = engine.retrieve(Query(id="live", skill="Python", occupation="Data Analyst"), cfg)
        assert result.stage == "reranked"
        assert len(result) == 10
        # dense candidates for the Python topic live in c000..c049
        assert all(doc_id.startswith("c0") for doc_id in result.doc_ids())

    def test_unknown_query_falls_back_to_bm25(self, engine):
        cfg = PipelineConfig(first_stage="dense", top_n=5)
        result = engine.retrieve(Query(id="live", skill="Knitting", occupation="Artist"), cfg)
        assert result.stage == "lexical"

    def test_unknown_terms_still_served(self, engine):
        # the query template's "for" may still match; must not error
        cards = engine.recommend(
            Query(id="live", skill="zzzqqq", occupation="xxyyzz"),
            PipelineConfig(first_stage="bm25", top_n=5),
        )
        assert len(cards) <= 5

    def test_empty_results_allowed(self, tmp_path):
        from skillrank.corpus import CourseDoc, write_courses

        docs = [
            CourseDoc(id="a", provider="udemy", title="gardening basics", description="plants"),
            CourseDoc(id="b", provider="edx", title="cooking pasta", description="sauce"),
        ]
        write_courses(docs, tmp_path / "courses.jsonl")
        (tmp_path / "pipeline.conf").write_text(json.dumps({"courses": "courses.jsonl"}))
        engine = build_engine(ServiceConfig.load(tmp_path / "pipeline.conf"))
        cards = engine.recommend(
            Query(id="live", skill="quantum", occupation="astronaut"),
            PipelineConfig(first_stage="bm25", top_n=5),
        )
        assert cards == []

    def test_top_n_larger_than_matches(self, engine):
        cards = engine.recommend(
            Query(id="live", skill="goodhabitz", occupation="nothing-matches-this"),
            PipelineConfig(first_stage="bm25", top_n=10),
        )
        assert len(cards) <= 10


class TestHttpApi:
    def test_recommend_is_arm_dependent(self, client):
        even = client.get("/recommend", params={"skill": "Python", "occupation": "Data Analyst", "user_id": 2})
        odd = client.get("/recommend", params={"skill": "Python", "occupation": "Data Analyst", "user_id": 3})
        assert even.status_code == odd.status_code == 200
        assert even.json()["arm"] == "control_bm25"
        assert odd.json()["arm"] == "treatment_rankt5"
        assert len(even.json()["results"]) == 10

    def test_recommend_deterministic(self, client):
        params = {"skill": "SQL", "occupation": "Database Administrator", "user_id": 7}
        first = client.get("/recommend", params=params).json()
        second = client.get("/recommend", params=params).json()
        assert first == second

    def test_event_flow_and_funnel(self, client):
        for i, kind in enumerate(["open_skill_card", "open_skill_card", "open_course_card"]):
            response = client.post("/events", json={
                "event_id": f"evt{i}", "user_id": 4, "arm": "control_bm25",
                "kind": kind, "query_id": "q0",
            })
            assert response.status_code == 200 and response.json()["stored"]
        duplicate = client.post("/events", json={
            "event_id": "evt0", "user_id": 4, "arm": "control_bm25",
            "kind": "open_skill_card", "query_id": "q0",
        })
        assert duplicate.json()["stored"] is False
        rates = client.get("/funnel", params={"arm": "control_bm25"}).json()
        assert rates["counts"]["open_skill_card"] == 2
        assert rates["course_per_skill"] == pytest.approx(0.5)

    def test_bad_event_kind_rejected(self, client):
        response = client.post("/events", json={
            "event_id": "bad", "user_id": 4, "arm": "control_bm25",
            "kind": "hover", "query_id": "q0",
        })
        assert response.status_code == 422

    def test_pairs_ten_queries_five_cards(self, client):
        data = client.get("/questionnaire/pairs", params={"respondent": "tester"}).json()
        assert len(data["pairs"]) == 10
        for pair in data["pairs"]:
            assert len(pair["list_one"]) == 5
            assert len(pair["list_two"]) == 5
            assert "token" in pair

    def test_response_flow_resolves_tags(self, client):
        pairs = client.get("/questionnaire/pairs", params={"respondent": "flow"}).json()["pairs"]
        pair = pairs[0]
        _, first = decode_order_token(pair["token"])
        post = client.post("/questionnaire/responses", json={
            "respondent": "flow", "query_id": pair["query_id"], "token": pair["token"],
            "picked": "first", "reason": "better variety",
        })
        assert post.status_code == 200
        results = client.get("/questionnaire/results").json()
        assert results[pair["query_id"]][first] >= 1

    def test_empty_reason_rejected_http(self, client):
        pairs = client.get("/questionnaire/pairs", params={"respondent": "noreason"}).json()["pairs"]
        post = client.post("/questionnaire/responses", json={
            "respondent": "noreason", "query_id": pairs[0]["query_id"],
            "token": pairs[0]["token"], "picked": "none", "reason": "  ",
        })
        assert post.status_code == 422

    def test_funnel_unknown_arm(self, client):
        assert client.get("/funnel", params={"arm": "nope"}).status_code == 422
