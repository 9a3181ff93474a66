"""Synthetic world generation: structure, bias, determinism, holdout wiring."""

import pytest

from crossmine.corpus import EventKind, SessionEvent
from crossmine.discriminator import RelevanceScorer
from crossmine.engine import MiningConfig, detect_reformulations
from crossmine.logsim import (
    IntentInfo,
    WorldSpec,
    generate_world,
    generate_world_knowledge,
    make_annotated_split,
    read_intent_map,
    refined_query,
    simulate_sessions,
    split_holdout,
    topic_query,
    write_intent_map,
)
from crossmine.text import split_tokens


def tiny_spec(**overrides):
    base = dict(
        seed=0,
        n_topics=2,
        intents_per_topic=2,
        docs_per_intent=12,
        n_users=6,
        sessions_per_user=4,
        holdout_sessions=2,
        rec_consume_rate=3,
        reformulation_prob=0.5,
    )
    base.update(overrides)
    return WorldSpec(**base)


@pytest.fixture(scope="module")
def world():
    spec = tiny_spec()
    docs, intent_map = generate_world(spec)
    return spec, docs, intent_map


@pytest.fixture(scope="module")
def log(world):
    spec, docs, intent_map = world
    return simulate_sessions((docs, intent_map), spec)


class TestWorldSpecValidation:
    def test_tiny_spec_is_coherent(self):
        tiny_spec().validate()

    @pytest.mark.parametrize(
        "overrides, needle",
        [
            ({"n_topics": 0}, "n_topics"),
            ({"docs_per_intent": -1}, "docs_per_intent"),
            ({"n_users": 0}, "n_users"),
            ({"reformulation_prob": 1.5}, "reformulation_prob"),
            ({"topic_affinity": -0.1}, "topic_affinity"),
            ({"holdout_sessions": 4}, "holdout_sessions"),
            ({"exposed_per_query": 13}, "exposed_per_query"),
            ({"reform_consumed": 7}, "reform_consumed"),
            ({"reform_exposed": 9}, "reform_exposed"),
            ({"popular_per_intent": 13}, "popular_per_intent"),
            ({"clicks_per_session": 12}, "clicks_per_session"),
        ],
    )
    def test_incoherent_specs_rejected(self, overrides, needle):
        with pytest.raises(ValueError, match=needle):
            tiny_spec(**overrides).validate()


class TestGenerateWorld:
    def test_minimal_world_is_one_doc(self):
        spec = tiny_spec(
            n_topics=1, intents_per_topic=1, docs_per_intent=1, popular_per_intent=1
        )
        docs, intent_map = generate_world(spec)
        assert len(docs) == 1
        assert intent_map[0] == IntentInfo(topic=0, intent=0, dominant=True, popular=True)
        text = docs[0].ocr_cover
        for token in ("topic0", "theme0", "item0"):
            assert token in text

    def test_corpus_size_is_the_product_of_counts(self, world):
        spec, docs, intent_map = world
        expected = spec.n_topics * spec.intents_per_topic * spec.docs_per_intent
        assert len(docs) == expected
        assert len(intent_map) == expected
        assert [d.doc_id for d in docs] == list(range(expected))

    def test_generation_is_a_pure_function_of_the_spec(self):
        a_docs, a_map = generate_world(tiny_spec())
        b_docs, b_map = generate_world(tiny_spec())
        assert a_docs == b_docs
        assert a_map == b_map

    def test_same_topic_intents_share_topic_tokens_but_differ(self, world):
        spec, docs, intent_map = world
        intent0 = next(d for d in docs if intent_map[d.doc_id] == IntentInfo(0, 0, True, True))
        intent1 = next(
            d for d in docs if intent_map[d.doc_id] == IntentInfo(0, 1, False, True)
        )
        tokens0 = set(split_tokens(intent0.keyword))
        tokens1 = set(split_tokens(intent1.keyword))
        assert {"topic0", "theme0"} <= tokens0 & tokens1
        assert tokens0 != tokens1

    def test_engagement_decays_with_popularity_rank(self, world):
        spec, docs, intent_map = world
        first, last = docs[0], docs[spec.docs_per_intent - 1]
        assert intent_map[first.doc_id].popular
        assert not intent_map[last.doc_id].popular
        assert first.play_cnt > last.play_cnt

    def test_every_doc_has_a_unique_marker_token(self, world):
        _, docs, _ = world
        markers = {f"item{d.doc_id}" in d.ocr_cover for d in docs}
        assert markers == {True}


class TestSimulateSessions:
    def test_log_is_sorted_per_user(self, log):
        keys = [(e.user_id, e.timestamp) for e in log]
        assert keys == sorted(keys)

    def test_every_user_searches(self, world, log):
        spec = world[0]
        searchers = {e.user_id for e in log if e.kind is EventKind.QUERY_ISSUED}
        assert searchers == set(range(spec.n_users))

    def test_rec_consumption_volume_is_fixed(self, world, log):
        spec = world[0]
        n_rec = sum(1 for e in log if e.kind is EventKind.REC_CONSUMED)
        assert n_rec == spec.n_users * spec.sessions_per_user * spec.rec_consume_rate

    def test_same_seed_reproduces_the_log(self, world, log):
        spec, docs, intent_map = world
        again = simulate_sessions((docs, intent_map), tiny_spec())
        assert again == log

    def test_different_seed_changes_the_log(self, world, log):
        spec, docs, intent_map = world
        other = simulate_sessions((docs, intent_map), tiny_spec(seed=1))
        assert other != log

    def test_biased_ranker_exposes_only_dominant_intent(self, world, log):
        spec, docs, intent_map = world
        bare = {topic_query(t): t for t in range(spec.n_topics)}
        seen = [
            e for e in log if e.kind is EventKind.EXPOSED and e.query_text in bare
        ]
        assert seen
        assert all(intent_map[e.doc_id].intent == 0 for e in seen)

    def test_unbiased_ranker_surfaces_minority_intents_too(self, world):
        spec, docs, intent_map = world
        log = simulate_sessions((docs, intent_map), tiny_spec(exposure_bias=False))
        bare = {topic_query(t): t for t in range(spec.n_topics)}
        intents = {
            intent_map[e.doc_id].intent
            for e in log
            if e.kind is EventKind.EXPOSED and e.query_text in bare
        }
        assert 0 in intents and 1 in intents

    def test_prerank_candidates_come_from_other_topics(self, world, log):
        spec, docs, intent_map = world
        bare = {topic_query(t): t for t in range(spec.n_topics)}
        for e in log:
            if e.kind is EventKind.PRERANK_FILTERED and e.query_text in bare:
                assert intent_map[e.doc_id].topic != bare[e.query_text]

    def test_refined_queries_follow_their_topic_query(self, world, log):
        spec, _, _ = world
        refined = {
            refined_query(t, i): t
            for t in range(spec.n_topics)
            for i in range(1, spec.intents_per_topic)
        }
        issued = [e for e in log if e.kind is EventKind.QUERY_ISSUED]
        topic_times = {
            (e.user_id, e.query_text, e.timestamp) for e in issued if e.query_text not in refined
        }
        followups = [e for e in issued if e.query_text in refined]
        assert followups, "reformulation_prob 0.5 should produce follow-ups"
        for e in followups:
            topic = refined[e.query_text]
            assert (e.user_id, topic_query(topic), e.timestamp - 30) in topic_times

    def test_no_reformulations_when_probability_is_zero(self, world):
        spec, docs, intent_map = world
        quiet = simulate_sessions((docs, intent_map), tiny_spec(reformulation_prob=0.0))
        scorer = RelevanceScorer().fit(docs)
        assert detect_reformulations(quiet, scorer, MiningConfig()) == []


class TestSplitHoldout:
    def test_partition_is_exact_and_ordered_by_time(self, world, log):
        spec = world[0]
        train, held = split_holdout(log, spec)
        assert len(train) + len(held) == len(log)
        cut = (spec.sessions_per_user - spec.holdout_sessions) * spec.session_gap_seconds
        assert all(e.timestamp < cut for e in train)
        assert all(e.timestamp >= cut for e in held)

    def test_holdout_keeps_the_trailing_sessions(self, world, log):
        spec = world[0]
        _, held = split_holdout(log, spec)
        sessions = {
            (e.user_id, e.timestamp // spec.session_gap_seconds)
            for e in held
            if e.kind is EventKind.QUERY_ISSUED and e.query_text.count(" ") == 1
        }
        per_user = {}
        for user, slot in sessions:
            per_user.setdefault(user, set()).add(slot)
        assert per_user == {
            u: {spec.sessions_per_user - 2, spec.sessions_per_user - 1}
            for u in range(spec.n_users)
        }


class TestGenerateWorldKnowledge:
    def test_every_topic_query_gets_records(self, world):
        spec = world[0]
        wk = generate_world_knowledge(spec)
        assert set(wk) == {topic_query(t) for t in range(spec.n_topics)}
        per_topic = (spec.intents_per_topic - 1) * spec.wk_records_per_intent
        assert all(len(records) == per_topic for records in wk.values())

    def test_records_follow_the_ingest_schema(self, world):
        spec = world[0]
        wk = generate_world_knowledge(spec)
        for records in wk.values():
            for record in records:
                assert set(record) == {
                    "ocr_cover",
                    "photo_caption",
                    "click_query",
                    "keywords",
                }
                assert all(isinstance(v, str) for v in record.values())
                assert "∥" in record["click_query"]

    def test_records_cover_only_minority_intents(self):
        spec = tiny_spec(intents_per_topic=3)
        wk = generate_world_knowledge(spec)
        for topic in range(spec.n_topics):
            first_tokens = {
                r["keywords"].split("∥")[0] for r in wk[topic_query(topic)]
            }
            assert first_tokens == {f"intent{topic}_1", f"intent{topic}_2"}

    def test_output_is_deterministic(self, world):
        spec = world[0]
        assert generate_world_knowledge(spec) == generate_world_knowledge(spec)


class TestMakeAnnotatedSplit:
    def click(self, user, ts, q, doc, kind=EventKind.CLICKED):
        return SessionEvent(user_id=user, timestamp=ts, kind=kind, query_text=q, doc_id=doc)

    def test_grades_by_provenance_with_max_merge(self):
        spec = tiny_spec()
        q = topic_query(0)
        rq = refined_query(0, 1)
        events = [
            self.click(1, 10, rq, 7),                              # follow-up consumption
            self.click(1, 20, q, 8),                               # direct click
            self.click(1, 30, q, 9, kind=EventKind.EXPOSED),       # merely exposed
            self.click(1, 40, q, 7),                               # weaker signal for doc 7
            self.click(1, 50, rq, 10, kind=EventKind.EXPOSED),     # refined exposure: no grade
        ]
        split = make_annotated_split(events, spec)
        assert split.entries == [(q, [(7, 5), (8, 4), (9, 3)])]

    def test_watch_after_followup_also_grades_highest(self):
        spec = tiny_spec()
        events = [self.click(1, 10, refined_query(1, 1), 30, kind=EventKind.WATCHED)]
        split = make_annotated_split(events, spec)
        assert split.entries == [(topic_query(1), [(30, 5)])]

    def test_simulated_holdout_yields_graded_topic_entries(self, world, log):
        spec = world[0]
        _, held = split_holdout(log, spec)
        split = make_annotated_split(held, spec)
        assert split.entries
        for q, labeled in split.entries:
            assert q in {topic_query(t) for t in range(spec.n_topics)}
            assert labeled == sorted(labeled)
            assert {label for _, label in labeled} <= {3, 4, 5}


class TestIntentMapIO:
    def test_round_trip(self, tmp_path, world):
        _, _, intent_map = world
        path = tmp_path / "intent_map.jsonl"
        write_intent_map(path, intent_map)
        assert read_intent_map(path) == intent_map

    def test_bad_entry_reports_the_line(self, tmp_path):
        path = tmp_path / "intent_map.jsonl"
        path.write_text('{"doc_id": 1, "topic": 0}\n')
        with pytest.raises(Exception, match="line 1"):
            read_intent_map(path)
