"""Positive-sample mining from session logs, plus group assembly.

Four channels feed a query's training group: reformulation follow-ups
(strongest tier), recommendation-feed consumption near the query, external
knowledge records, and the query's own rank-pipeline outcomes. Candidates
from the first two channels must clear a lexical relevance threshold before
admission; negatives are subsampled from the weak rank tiers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    LABEL_OF_SOURCE,
    EventKind,
    LabeledSample,
    SampleSource,
    SessionEvent,
    TrainingGroup,
    VideoDoc,
    doc_text,
)

logger = logging.getLogger(__name__)

# Synthetic knowledge docs live above this base so they can never collide
# with platform doc_ids.
KNOWLEDGE_DOC_BASE = 1 << 48

# Both vertical-bar delimiter codepoints seen in the wild.
_DELIMITER_RE = re.compile("[∥‖]")

# Dedup priority when one doc is mined through several channels: highest
# tier wins, ties broken by this fixed order.
SOURCE_PRIORITY: tuple[SampleSource, ...] = (
    SampleSource.QUERY_LEVEL_AUG,
    SampleSource.SYSTEM_LEVEL_AUG,
    SampleSource.WORLD_KNOWLEDGE_AUG,
    SampleSource.CLICKED_IN_RANK,
    SampleSource.EXPOSED_IN_RANK,
    SampleSource.UNEXPOSED_IN_RANK,
    SampleSource.PRERANK_FILTERED,
    SampleSource.IN_BATCH,
)

_CONSUME_KINDS = (EventKind.CLICKED, EventKind.WATCHED)

# Engagement dominance within the rank pipeline.
_RANK_STRENGTH = {
    EventKind.CLICKED: (3, SampleSource.CLICKED_IN_RANK),
    EventKind.EXPOSED: (2, SampleSource.EXPOSED_IN_RANK),
    EventKind.RANK_UNEXPOSED: (1, SampleSource.UNEXPOSED_IN_RANK),
    EventKind.PRERANK_FILTERED: (0, SampleSource.PRERANK_FILTERED),
}


@dataclass(frozen=True)
class ReformulationPair:
    """An ordered same-user query pair inside the reformulation window."""

    user_id: int
    q_orig: str
    q_reform: str
    t_orig: int
    t_reform: int


@dataclass
class MiningConfig:
    alpha: float = 0.6
    query_sim_threshold: float = 0.6
    reform_window_seconds: int = 90
    rec_window_seconds: int = 3600  # full width, centered on the query
    rec_cap_per_user: int = 100
    neg_per_group: int = 8
    neg_source_ratio: tuple[float, float] = (0.5, 0.5)  # (unexposed, pre-rank)

    def validate(self) -> None:
        for name in ("alpha", "query_sim_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("reform_window_seconds", "rec_window_seconds", "rec_cap_per_user"):
            v = getattr(self, name)
            if v <= 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.neg_per_group < 0:
            raise ValueError(f"neg_per_group must be >= 0, got {self.neg_per_group}")
        r0, r1 = self.neg_source_ratio
        if not (0.0 <= r0 <= 1.0 and 0.0 <= r1 <= 1.0):
            raise ValueError(f"neg_source_ratio entries must lie in [0, 1], got {r0, r1}")
        if abs(r0 + r1 - 1.0) > 1e-9:
            raise ValueError(f"neg_source_ratio must sum to 1, got {r0 + r1}")


def detect_reformulations(
    events: Iterable[SessionEvent], scorer, cfg: MiningConfig
) -> list[ReformulationPair]:
    """Every ordered same-user query pair with 0 < dt <= window and high similarity.

    All qualifying ordered pairs are emitted, not just adjacent ones, so one
    query can appear in many pairs.
    """
    by_user: dict[int, list[SessionEvent]] = defaultdict(list)
    for e in events:
        if e.kind is EventKind.QUERY_ISSUED:
            by_user[e.user_id].append(e)
    pairs: list[ReformulationPair] = []
    for user_id in sorted(by_user):
        issued = sorted(by_user[user_id], key=lambda e: e.timestamp)
        for i, first in enumerate(issued):
            for later in issued[i + 1 :]:
                dt = later.timestamp - first.timestamp
                if dt > cfg.reform_window_seconds:
                    break  # time-ordered: everything after is further away
                if dt <= 0:
                    continue
                if scorer.score(first.query_text, later.query_text) > cfg.query_sim_threshold:
                    pairs.append(
                        ReformulationPair(
                            user_id=user_id,
                            q_orig=first.query_text,
                            q_reform=later.query_text,
                            t_orig=first.timestamp,
                            t_reform=later.timestamp,
                        )
                    )
    pairs.sort(key=lambda p: (p.user_id, p.t_orig, p.t_reform, p.q_orig, p.q_reform))
    return pairs


def mine_query_level(
    q: str,
    pairs: Sequence[ReformulationPair],
    events: Iterable[SessionEvent],
    docs: Mapping[int, VideoDoc],
    scorer,
    cfg: MiningConfig,
) -> set[int]:
    """Docs the reformulating user consumed under the follow-up query.

    Only pairs whose original query is q count, re-issues of q itself are
    ignored, and every candidate must clear the alpha threshold against q.
    """
    own_pairs = [p for p in pairs if p.q_orig == q and p.q_reform != q]
    if not own_pairs:
        return set()
    consumed: dict[tuple[int, str], list[tuple[int, int]]] = defaultdict(list)
    for e in events:
        if e.kind in _CONSUME_KINDS and e.query_text is not None:
            consumed[(e.user_id, e.query_text)].append((e.timestamp, e.doc_id))
    out: set[int] = set()
    for p in own_pairs:
        for ts, doc_id in consumed.get((p.user_id, p.q_reform), ()):
            if ts < p.t_reform or doc_id in out or doc_id not in docs:
                continue
            if scorer.is_relevant(q, docs[doc_id], cfg.alpha):
                out.add(doc_id)
    return out


def mine_system_level(
    q: str,
    events: Iterable[SessionEvent],
    docs: Mapping[int, VideoDoc],
    scorer,
    cfg: MiningConfig,
) -> set[int]:
    """Recommendation-feed docs consumed near an issuance of q.

    Per user: candidates within half the window of any issuance, nearest
    first, capped, then threshold-filtered; the per-user results are unioned.
    """
    issues: dict[int, list[int]] = defaultdict(list)
    feed: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for e in events:
        if e.kind is EventKind.QUERY_ISSUED and e.query_text == q:
            issues[e.user_id].append(e.timestamp)
        elif e.kind is EventKind.REC_CONSUMED:
            feed[e.user_id].append((e.timestamp, e.doc_id))
    out: set[int] = set()
    for user_id, query_times in issues.items():
        nearest: dict[int, tuple[int, int]] = {}
        for ts, doc_id in feed.get(user_id, ()):
            dist = min(abs(ts - tq) for tq in query_times)
            if 2 * dist > cfg.rec_window_seconds:
                continue
            prev = nearest.get(doc_id)
            if prev is None or (dist, ts) < prev:
                nearest[doc_id] = (dist, ts)
        ranked = sorted(nearest.items(), key=lambda kv: (kv[1][0], kv[1][1], kv[0]))
        for doc_id, _ in ranked[: cfg.rec_cap_per_user]:
            if doc_id in docs and scorer.is_relevant(q, docs[doc_id], cfg.alpha):
                out.add(doc_id)
    return out


def mine_search_system(q: str, events: Iterable[SessionEvent]) -> dict[int, SampleSource]:
    """Rank-pipeline outcome per doc under query q, strongest engagement winning."""
    best: dict[int, tuple[int, SampleSource]] = {}
    for e in events:
        if e.query_text != q:
            continue
        ranked = _RANK_STRENGTH.get(e.kind)
        if ranked is None:
            continue
        prev = best.get(e.doc_id)
        if prev is None or ranked[0] > prev[0]:
            best[e.doc_id] = ranked
    return {doc_id: source for doc_id, (_, source) in best.items()}


def _knowledge_doc_id(q: str, fields: Sequence[str]) -> int:
    payload = "\x1f".join([q, *fields]).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=6).digest()
    return KNOWLEDGE_DOC_BASE + int.from_bytes(digest, "little")


def _join_delimited(raw: str) -> str:
    parts = [p.strip() for p in _DELIMITER_RE.split(raw)]
    return " ".join(p for p in parts if p)


def ingest_world_knowledge(path: str | Path, q: str) -> tuple[list[VideoDoc], int]:
    """Parse structured knowledge records for query q into synthetic docs.

    Returns (docs, skipped). Records missing any of the four text fields are
    skipped and counted, never fatal; doc_ids are content-derived from the
    reserved high range.
    """
    docs: list[VideoDoc] = []
    seen: set[int] = set()
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("%s line %d: not valid JSON, skipping", path, line_no)
                skipped += 1
                continue
            if not isinstance(obj, dict):
                logger.warning("%s line %d: not an object, skipping", path, line_no)
                skipped += 1
                continue
            fields = []
            ok = True
            for name in ("ocr_cover", "photo_caption", "click_query", "keywords"):
                value = obj.get(name)
                if not isinstance(value, str):
                    logger.warning("%s line %d: missing field %s, skipping", path, line_no, name)
                    skipped += 1
                    ok = False
                    break
                fields.append(value)
            if not ok:
                continue
            ocr_cover, photo_caption, click_query_raw, keywords_raw = fields
            doc_id = _knowledge_doc_id(q, fields)
            if doc_id in seen:
                continue
            seen.add(doc_id)
            docs.append(
                VideoDoc(
                    doc_id=doc_id,
                    ocr_cover=ocr_cover,
                    photo_caption=photo_caption,
                    keyword=_join_delimited(keywords_raw),
                    click_query=_join_delimited(click_query_raw),
                )
            )
    docs.sort(key=lambda d: d.doc_id)
    return docs, skipped


_PROMPT_TEMPLATE = """You generate short-video metadata records for a search query.

Query: {query}

Here is one example record in the exact schema to follow:
{exemplar}

Produce {n} new records describing distinct videos that are each highly
relevant to the query above. Requirements:
- Output a single JSON object with one key "records" holding a list of
  {n} objects. No prose before or after the JSON.
- Each object has exactly these fields: "ocr_cover", "photo_caption",
  "click_query", "keywords".
- In "click_query" and "keywords", separate multiple entries with the
  ∥ delimiter.
"""


def emit_prompt(q: str, exemplar: VideoDoc, n: int) -> str:
    """Deterministic generation prompt: query, one schema exemplar, n records."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rendered = json.dumps(
        {
            "ocr_cover": exemplar.ocr_cover,
            "photo_caption": exemplar.photo_caption,
            "click_query": exemplar.click_query,
            "keywords": exemplar.keyword,
        },
        ensure_ascii=False,
        sort_keys=True,
        indent=2,
    )
    return _PROMPT_TEMPLATE.format(query=q, exemplar=rendered, n=n)


def assemble_group(
    query_id: int,
    q: str,
    mined: Mapping[SampleSource, Iterable[int]],
    cfg: MiningConfig,
    rng_seed: int,
) -> TrainingGroup:
    """Dedup mined docs to their best tier and subsample the negative pools.

    A doc mined through several channels keeps its maximum label. Negatives
    come from the two weak rank tiers at the configured ratio, seeded and
    without replacement; a short pool spills its quota onto the other. The
    group may come out non-trainable (no tier >= 4 doc); callers decide
    whether to keep it.
    """
    cfg.validate()
    winning: dict[int, SampleSource] = {}
    for source in SOURCE_PRIORITY:
        for doc_id in mined.get(source, ()):
            if doc_id not in winning:
                winning[doc_id] = source
    kept: list[LabeledSample] = []
    unexposed_pool: list[int] = []
    prerank_pool: list[int] = []
    for doc_id, source in winning.items():
        if source is SampleSource.UNEXPOSED_IN_RANK:
            unexposed_pool.append(doc_id)
        elif source is SampleSource.PRERANK_FILTERED:
            prerank_pool.append(doc_id)
        else:
            kept.append(LabeledSample(doc_id=doc_id, label=LABEL_OF_SOURCE[source], source=source))
    unexposed_pool.sort()
    prerank_pool.sort()

    want_unexposed = int(np.floor(cfg.neg_per_group * cfg.neg_source_ratio[0] + 0.5))
    want_prerank = cfg.neg_per_group - want_unexposed
    take_unexposed = min(want_unexposed, len(unexposed_pool))
    want_prerank += want_unexposed - take_unexposed
    take_prerank = min(want_prerank, len(prerank_pool))
    take_unexposed = min(take_unexposed + (want_prerank - take_prerank), len(unexposed_pool))

    rng = np.random.default_rng(rng_seed)
    for pool, take, source in (
        (unexposed_pool, take_unexposed, SampleSource.UNEXPOSED_IN_RANK),
        (prerank_pool, take_prerank, SampleSource.PRERANK_FILTERED),
    ):
        if take > 0:
            picked = rng.choice(len(pool), size=take, replace=False)
            for i in sorted(picked):
                kept.append(
                    LabeledSample(doc_id=pool[i], label=LABEL_OF_SOURCE[source], source=source)
                )
    kept.sort(key=lambda s: (-s.label, s.doc_id))
    return TrainingGroup(query_id=query_id, query_text=q, samples=kept)
