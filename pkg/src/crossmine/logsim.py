"""Synthetic search/recommendation world with an exposure-biased ranker.

Every topic has one dominant intent the ranker always surfaces for the bare
topic query and several minority intents it never does. Users whose true
intent is a minority one sometimes reformulate to an intent-specific query
and consume matching docs; the rec feed leaks their interest intent near
query time. That construction makes the exposure bias measurable: clicked
docs are dominant-intent only, while reformulation and rec signals carry
the minority intents.

Doc text is drawn from fixed token pools (topic tokens shared across the
topic, intent tokens per intent), so lexical similarity tracks the true
relevance structure exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    EventKind,
    LogFormatError,
    SessionEvent,
    VideoDoc,
    _dump_line,
    _iter_json_lines,
)
from .evaluation import AnnotatedSplit


@dataclass
class WorldSpec:
    seed: int = 0
    n_topics: int = 20
    intents_per_topic: int = 3  # intent 0 is the dominant one
    docs_per_intent: int = 40
    n_users: int = 500
    sessions_per_user: int = 10
    reformulation_prob: float = 0.3
    rec_consume_rate: int = 5
    exposure_bias: bool = True
    # Shape knobs beyond the headline counts.
    holdout_sessions: int = 2          # trailing sessions per user form the eval partition
    popular_per_intent: int = 8        # consumption concentrates on these docs
    exposed_per_query: int = 12
    unexposed_per_query: int = 8
    prerank_per_query: int = 8
    clicks_per_session: int = 2
    reform_exposed: int = 6
    reform_consumed: int = 2
    topic_affinity: float = 0.6        # P(session topic = user's interest topic)
    away_dominant_prob: float = 0.7    # P(dominant intent | session off the interest topic)
    rec_interest_prob: float = 0.8     # P(rec doc from the user's interest pair)
    wk_records_per_intent: int = 2
    session_gap_seconds: int = 86400

    def validate_world(self) -> None:
        counts = (
            "n_topics",
            "intents_per_topic",
            "docs_per_intent",
            "popular_per_intent",
            "wk_records_per_intent",
        )
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def validate_sessions(self) -> None:
        counts = (
            "n_users",
            "sessions_per_user",
            "rec_consume_rate",
            "holdout_sessions",
            "exposed_per_query",
            "unexposed_per_query",
            "prerank_per_query",
            "clicks_per_session",
            "reform_exposed",
            "reform_consumed",
            "session_gap_seconds",
        )
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        probs = (
            "reformulation_prob",
            "topic_affinity",
            "away_dominant_prob",
            "rec_interest_prob",
        )
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.holdout_sessions >= self.sessions_per_user:
            raise ValueError("holdout_sessions must leave at least one training session")
        if self.exposed_per_query > self.docs_per_intent:
            raise ValueError("exposed_per_query cannot exceed docs_per_intent")
        if self.reform_consumed > self.reform_exposed:
            raise ValueError("reform_consumed cannot exceed reform_exposed")
        if self.reform_exposed > self.popular_per_intent:
            raise ValueError("reform_exposed cannot exceed popular_per_intent")
        if self.popular_per_intent > self.docs_per_intent:
            raise ValueError("popular_per_intent cannot exceed docs_per_intent")
        if self.clicks_per_session + 1 > self.exposed_per_query:
            raise ValueError("clicks_per_session + 1 cannot exceed exposed_per_query")

    def validate(self) -> None:
        self.validate_world()
        self.validate_sessions()


@dataclass(frozen=True)
class IntentInfo:
    topic: int
    intent: int
    dominant: bool
    popular: bool


def topic_query(topic: int) -> str:
    return f"topic{topic} theme{topic}"


def refined_query(topic: int, intent: int) -> str:
    return f"topic{topic} theme{topic} intent{topic}_{intent}"


def _intent_token(topic: int, intent: int) -> str:
    return f"intent{topic}_{intent}"


def _mode_token(topic: int, intent: int) -> str:
    return f"mode{topic}_{intent}"


def generate_world(spec: WorldSpec) -> tuple[list[VideoDoc], dict[int, IntentInfo]]:
    """Corpus plus ground-truth doc -> (topic, intent) map.

    Text is a pure function of (topic, intent, position): topic tokens give
    the bare topic query a similarity well above the mining threshold,
    intent tokens separate intents from each other, and one unique token
    keeps every doc distinct. Engagement counters decay with the doc's
    popularity rank inside its intent.
    """
    spec.validate_world()
    docs: list[VideoDoc] = []
    intent_map: dict[int, IntentInfo] = {}
    doc_id = 0
    for topic in range(spec.n_topics):
        top, theme = f"topic{topic}", f"theme{topic}"
        for intent in range(spec.intents_per_topic):
            it, mode = _intent_token(topic, intent), _mode_token(topic, intent)
            for rank in range(spec.docs_per_intent):
                plays = 5000 // (1 + rank)
                docs.append(
                    VideoDoc(
                        doc_id=doc_id,
                        ocr_cover=f"{top} {theme} {it} item{doc_id}",
                        photo_caption=f"{top} {theme} {it}",
                        keyword=f"{top} {theme} {it} {mode}",
                        click_query=f"{top} {theme}",
                        play_cnt=plays,
                        like_cnt=plays // 10,
                        long_view_cnt=plays // 5,
                        download_cnt=plays // 50,
                    )
                )
                intent_map[doc_id] = IntentInfo(
                    topic=topic,
                    intent=intent,
                    dominant=intent == 0,
                    popular=rank < spec.popular_per_intent,
                )
                doc_id += 1
    return docs, intent_map


class _WorldView:
    """Doc-id lookup tables derived from the intent map."""

    def __init__(self, spec: WorldSpec, intent_map: Mapping[int, IntentInfo]):
        self.by_pair: dict[tuple[int, int], list[int]] = {}
        self.by_topic: dict[int, list[int]] = {}
        for doc_id in sorted(intent_map):
            info = intent_map[doc_id]
            self.by_pair.setdefault((info.topic, info.intent), []).append(doc_id)
            self.by_topic.setdefault(info.topic, []).append(doc_id)
        self.all_docs = sorted(intent_map)
        self.spec = spec

    def popular(self, topic: int, intent: int) -> list[int]:
        return self.by_pair[(topic, intent)][: self.spec.popular_per_intent]

    def popular_in_topic(self, topic: int) -> list[int]:
        return [
            d
            for intent in range(self.spec.intents_per_topic)
            for d in self.popular(topic, intent)
        ]

    def off_topic(self, topic: int) -> list[int]:
        own = set(self.by_topic[topic])
        return [d for d in self.all_docs if d not in own]


def simulate_sessions(
    world: tuple[Sequence[VideoDoc], Mapping[int, IntentInfo]], spec: WorldSpec
) -> list[SessionEvent]:
    """Seeded session log over the full user base.

    Per session: topic query, biased exposure, clicks on exposed docs,
    an occasional intent-refining follow-up query with consumption, and a
    handful of rec-feed consumptions near the query time. Sessions are a
    day apart so follow-up pairs never span sessions.
    """
    spec.validate()
    _, intent_map = world
    view = _WorldView(spec, intent_map)
    rng = np.random.default_rng(spec.seed)
    events: list[SessionEvent] = []
    dominant = 0
    for user in range(spec.n_users):
        interest_topic = user % spec.n_topics
        interest_intent = int(rng.integers(spec.intents_per_topic))
        for session in range(spec.sessions_per_user):
            if rng.random() < spec.topic_affinity:
                topic = interest_topic
                intent = interest_intent
            else:
                topic = int(rng.integers(spec.n_topics))
                if rng.random() < spec.away_dominant_prob:
                    intent = dominant
                else:
                    intent = 1 + int(rng.integers(spec.intents_per_topic - 1))
            t0 = session * spec.session_gap_seconds + user * 100
            q = topic_query(topic)
            events.append(
                SessionEvent(user_id=user, timestamp=t0, kind=EventKind.QUERY_ISSUED, query_text=q)
            )

            if spec.exposure_bias:
                exposed = view.by_pair[(topic, dominant)][: spec.exposed_per_query]
            else:
                topic_docs = view.by_topic[topic]
                picks = rng.choice(len(topic_docs), size=spec.exposed_per_query, replace=False)
                exposed = sorted(topic_docs[i] for i in picks)
            for d in exposed:
                events.append(
                    SessionEvent(
                        user_id=user, timestamp=t0, kind=EventKind.EXPOSED, query_text=q, doc_id=d
                    )
                )

            hidden = [d for d in view.by_topic[topic] if d not in set(exposed)]
            picks = rng.choice(len(hidden), size=min(spec.unexposed_per_query, len(hidden)), replace=False)
            for i in sorted(picks):
                events.append(
                    SessionEvent(
                        user_id=user,
                        timestamp=t0,
                        kind=EventKind.RANK_UNEXPOSED,
                        query_text=q,
                        doc_id=hidden[i],
                    )
                )

            away = view.off_topic(topic)
            if away:
                picks = rng.choice(len(away), size=min(spec.prerank_per_query, len(away)), replace=False)
                for i in sorted(picks):
                    events.append(
                        SessionEvent(
                            user_id=user,
                            timestamp=t0,
                            kind=EventKind.PRERANK_FILTERED,
                            query_text=q,
                            doc_id=away[i],
                        )
                    )

            n_clicks = spec.clicks_per_session + (1 if rng.random() < 0.5 else 0)
            picks = rng.choice(len(exposed), size=n_clicks, replace=False)
            clicked = [exposed[i] for i in sorted(picks)]
            for j, d in enumerate(clicked):
                events.append(
                    SessionEvent(
                        user_id=user,
                        timestamp=t0 + 5 + 3 * j,
                        kind=EventKind.CLICKED,
                        query_text=q,
                        doc_id=d,
                    )
                )
            events.append(
                SessionEvent(
                    user_id=user,
                    timestamp=t0 + 8,
                    kind=EventKind.WATCHED,
                    query_text=q,
                    doc_id=clicked[0],
                )
            )

            if intent != dominant and rng.random() < spec.reformulation_prob:
                rq = refined_query(topic, intent)
                t_reform = t0 + 30
                events.append(
                    SessionEvent(
                        user_id=user, timestamp=t_reform, kind=EventKind.QUERY_ISSUED, query_text=rq
                    )
                )
                shown = view.popular(topic, intent)[: spec.reform_exposed]
                for d in shown:
                    events.append(
                        SessionEvent(
                            user_id=user,
                            timestamp=t_reform + 1,
                            kind=EventKind.EXPOSED,
                            query_text=rq,
                            doc_id=d,
                        )
                    )
                picks = rng.choice(len(shown), size=spec.reform_consumed, replace=False)
                consumed = [shown[i] for i in sorted(picks)]
                kinds = (EventKind.CLICKED, EventKind.WATCHED)
                for j, d in enumerate(consumed):
                    events.append(
                        SessionEvent(
                            user_id=user,
                            timestamp=t_reform + 5 + 5 * j,
                            kind=kinds[j % 2],
                            query_text=rq,
                            doc_id=d,
                        )
                    )

            # The feed has its own popularity bias: it only surfaces the
            # head of each intent, never tail docs.
            interest_pool = view.popular(interest_topic, interest_intent)
            topic_pool = view.popular_in_topic(topic)
            for _ in range(spec.rec_consume_rate):
                if rng.random() < spec.rec_interest_prob:
                    d = interest_pool[int(rng.integers(len(interest_pool)))]
                else:
                    d = topic_pool[int(rng.integers(len(topic_pool)))]
                t_rec = t0 + 60 + int(rng.integers(840))
                events.append(
                    SessionEvent(
                        user_id=user, timestamp=t_rec, kind=EventKind.REC_CONSUMED, doc_id=d
                    )
                )
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return events


def split_holdout(
    events: Iterable[SessionEvent], spec: WorldSpec
) -> tuple[list[SessionEvent], list[SessionEvent]]:
    """Split a simulated log into (training, held-out) partitions.

    Sessions are identified by their day slot, so the trailing
    holdout_sessions per user land in the held-out part.
    """
    cut = (spec.sessions_per_user - spec.holdout_sessions) * spec.session_gap_seconds
    train = [e for e in events if e.timestamp < cut]
    held = [e for e in events if e.timestamp >= cut]
    return train, held


def generate_world_knowledge(spec: WorldSpec) -> dict[str, list[dict]]:
    """Schema-valid knowledge records per topic query, minority intents only.

    Stands in for a generation model: records lean on intent tokens so a
    group trained on them pulls the topic query toward the minority-intent
    region. Delimited fields exercise the ingest split rule.
    """
    spec.validate_world()
    out: dict[str, list[dict]] = {}
    for topic in range(spec.n_topics):
        q = topic_query(topic)
        records: list[dict] = []
        for intent in range(1, spec.intents_per_topic):
            it, mode = _intent_token(topic, intent), _mode_token(topic, intent)
            top, theme = f"topic{topic}", f"theme{topic}"
            for k in range(spec.wk_records_per_intent):
                records.append(
                    {
                        "ocr_cover": f"{top} {theme} {it}",
                        "photo_caption": f"{it} {mode} clip{topic}_{intent}_{k}",
                        "click_query": f"{top} {theme}∥{it} {mode}",
                        "keywords": f"{it}∥{mode}",
                    }
                )
        out[q] = records
    return out


def make_annotated_split(
    events: Sequence[SessionEvent], spec: WorldSpec
) -> AnnotatedSplit:
    """Graded relevance per topic query from held-out behavior.

    Docs consumed after the intent-refining follow-up grade highest, then
    clicked, then merely exposed; docs outside those sets stay unlabeled.
    """
    refined_of: dict[str, str] = {}
    for topic in range(spec.n_topics):
        for intent in range(1, spec.intents_per_topic):
            refined_of[refined_query(topic, intent)] = topic_query(topic)
    grade: dict[str, dict[int, int]] = {}

    def bump(q: str, doc: int, label: int) -> None:
        per = grade.setdefault(q, {})
        if per.get(doc, -1) < label:
            per[doc] = label

    for e in events:
        if e.doc_id is None or e.query_text is None:
            continue
        if e.query_text in refined_of and e.kind in (EventKind.CLICKED, EventKind.WATCHED):
            bump(refined_of[e.query_text], e.doc_id, 5)
        elif e.kind is EventKind.CLICKED:
            bump(e.query_text, e.doc_id, 4)
        elif e.kind is EventKind.EXPOSED and e.query_text not in refined_of:
            bump(e.query_text, e.doc_id, 3)
    entries = []
    for topic in range(spec.n_topics):
        q = topic_query(topic)
        if q in grade:
            entries.append((q, sorted(grade[q].items())))
    return AnnotatedSplit(entries=entries)


# ---------------------------------------------------------------------------
# intent map serialization
# ---------------------------------------------------------------------------


def write_intent_map(path: str | Path, intent_map: Mapping[int, IntentInfo]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id in sorted(intent_map):
            info = intent_map[doc_id]
            fh.write(
                _dump_line(
                    {
                        "doc_id": doc_id,
                        "topic": info.topic,
                        "intent": info.intent,
                        "dominant": info.dominant,
                        "popular": info.popular,
                    }
                )
                + "\n"
            )


def read_intent_map(path: str | Path) -> dict[int, IntentInfo]:
    out: dict[int, IntentInfo] = {}
    for line_no, obj in _iter_json_lines(path):
        try:
            out[int(obj["doc_id"])] = IntentInfo(
                topic=int(obj["topic"]),
                intent=int(obj["intent"]),
                dominant=bool(obj["dominant"]),
                popular=bool(obj["popular"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"bad intent-map entry: {exc}", line_no) from exc
    return out
