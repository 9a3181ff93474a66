"""Data model and line-delimited JSON serialization for docs, session logs, and training groups.

Records are one JSON object per line. Training-group files follow the
production schema (user_id, query, photo_list / photo_id, photo_content,
hierarchical_label) and embed full document content so a group file is a
self-contained training input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping


class LogFormatError(ValueError):
    """A malformed record in a line-delimited file. Carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EventKind(Enum):
    QUERY_ISSUED = "query_issued"
    CLICKED = "clicked"
    WATCHED = "watched"
    EXPOSED = "exposed"
    RANK_UNEXPOSED = "rank_unexposed"
    PRERANK_FILTERED = "prerank_filtered"
    REC_CONSUMED = "rec_consumed"


# Kinds that carry a search-query context alongside the doc.
SEARCH_DOC_KINDS = frozenset(
    {
        EventKind.CLICKED,
        EventKind.WATCHED,
        EventKind.EXPOSED,
        EventKind.RANK_UNEXPOSED,
        EventKind.PRERANK_FILTERED,
    }
)


class SampleSource(Enum):
    QUERY_LEVEL_AUG = "query_level_aug"
    SYSTEM_LEVEL_AUG = "system_level_aug"
    WORLD_KNOWLEDGE_AUG = "world_knowledge_aug"
    CLICKED_IN_RANK = "clicked_in_rank"
    EXPOSED_IN_RANK = "exposed_in_rank"
    UNEXPOSED_IN_RANK = "unexposed_in_rank"
    PRERANK_FILTERED = "prerank_filtered"
    IN_BATCH = "in_batch"


# Relevance tier by sample provenance. Query-level reformulation evidence
# outranks everything else; the three strong direct signals share tier 4.
LABEL_OF_SOURCE: dict[SampleSource, int] = {
    SampleSource.QUERY_LEVEL_AUG: 5,
    SampleSource.SYSTEM_LEVEL_AUG: 4,
    SampleSource.WORLD_KNOWLEDGE_AUG: 4,
    SampleSource.CLICKED_IN_RANK: 4,
    SampleSource.EXPOSED_IN_RANK: 3,
    SampleSource.UNEXPOSED_IN_RANK: 2,
    SampleSource.PRERANK_FILTERED: 1,
    SampleSource.IN_BATCH: 0,
}

# Default provenance when a group file carries only the numeric label.
_SOURCE_OF_LABEL: dict[int, SampleSource] = {
    5: SampleSource.QUERY_LEVEL_AUG,
    4: SampleSource.CLICKED_IN_RANK,
    3: SampleSource.EXPOSED_IN_RANK,
    2: SampleSource.UNEXPOSED_IN_RANK,
    1: SampleSource.PRERANK_FILTERED,
    0: SampleSource.IN_BATCH,
}


@dataclass
class VideoDoc:
    """A document represented by its textual fields plus engagement counters."""

    doc_id: int
    ocr_cover: str = ""
    photo_caption: str = ""
    keyword: str = ""
    click_query: str = ""
    play_cnt: int = 0
    like_cnt: int = 0
    long_view_cnt: int = 0
    download_cnt: int = 0

    def __post_init__(self):
        for name in ("play_cnt", "like_cnt", "long_view_cnt", "download_cnt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class SessionEvent:
    """One timestamped user action in a session log."""

    user_id: int
    timestamp: int
    kind: EventKind
    query_text: str | None = None
    doc_id: int | None = None

    def __post_init__(self):
        if self.kind is EventKind.QUERY_ISSUED:
            if self.query_text is None or self.doc_id is not None:
                raise ValueError("query_issued events carry query_text and no doc_id")
        elif self.kind is EventKind.REC_CONSUMED:
            if self.doc_id is None or self.query_text is not None:
                raise ValueError("rec_consumed events carry doc_id and no query_text")
        else:
            if self.doc_id is None or self.query_text is None:
                raise ValueError(f"{self.kind.value} events require doc_id and query_text")


@dataclass
class LabeledSample:
    """A doc reference with its relevance tier and provenance."""

    doc_id: int
    label: int
    source: SampleSource

    def __post_init__(self):
        expected = LABEL_OF_SOURCE[self.source]
        if self.label != expected:
            raise ValueError(
                f"label {self.label} does not match source {self.source.value} "
                f"(expected {expected})"
            )


@dataclass
class TrainingGroup:
    """One query with its labeled sample list."""

    query_id: int
    query_text: str
    samples: list[LabeledSample] = field(default_factory=list)

    def __post_init__(self):
        seen: set[int] = set()
        for s in self.samples:
            if s.doc_id in seen:
                raise ValueError(f"duplicate doc_id {s.doc_id} in group {self.query_id}")
            seen.add(s.doc_id)

    @property
    def trainable(self) -> bool:
        """A group needs at least one tier >= 4 sample to be a usable training unit."""
        return any(s.label >= 4 for s in self.samples)


def doc_text(doc: VideoDoc) -> str:
    """Canonical text of a doc: its four text fields joined by single spaces.

    Field order is fixed (ocr_cover, photo_caption, keyword, click_query);
    empty fields are skipped.
    """
    parts = [doc.ocr_cover, doc.photo_caption, doc.keyword, doc.click_query]
    return " ".join(p for p in parts if p)


# ---------------------------------------------------------------------------
# line-delimited JSON I/O
# ---------------------------------------------------------------------------


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _iter_json_lines(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"invalid JSON ({exc.msg})", line_no) from exc


def read_session_log(path: str | Path) -> list[SessionEvent]:
    """Read a session log and return events stably sorted by (user_id, timestamp).

    The stable sort preserves ingestion order for equal timestamps, which
    makes per-user streams nondecreasing in time.
    """
    events: list[SessionEvent] = []
    for line_no, obj in _iter_json_lines(path):
        try:
            kind_token = obj["kind"]
        except (KeyError, TypeError):
            raise LogFormatError("missing 'kind' field", line_no) from None
        try:
            kind = EventKind(kind_token)
        except ValueError:
            raise LogFormatError(f"unknown event kind {kind_token!r}", line_no) from None
        try:
            event = SessionEvent(
                user_id=int(obj["user_id"]),
                timestamp=int(obj["timestamp"]),
                kind=kind,
                query_text=obj.get("query_text"),
                doc_id=obj.get("doc_id"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(str(exc), line_no) from exc
        events.append(event)
    events.sort(key=lambda e: (e.user_id, e.timestamp))
    return events


def write_session_log(path: str | Path, events: Iterable[SessionEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            obj = {"user_id": e.user_id, "timestamp": e.timestamp, "kind": e.kind.value}
            if e.query_text is not None:
                obj["query_text"] = e.query_text
            if e.doc_id is not None:
                obj["doc_id"] = e.doc_id
            fh.write(_dump_line(obj) + "\n")


def _doc_to_content(doc: VideoDoc) -> dict:
    return {
        "ocr_cover": doc.ocr_cover,
        "photo_caption": doc.photo_caption,
        "keyword": doc.keyword,
        "click_query": doc.click_query,
        "play_cnt": doc.play_cnt,
        "like_cnt": doc.like_cnt,
        "long_view_cnt": doc.long_view_cnt,
        "download_cnt": doc.download_cnt,
    }


def _doc_from_content(doc_id: int, content: Mapping, line_no: int | None = None) -> VideoDoc:
    try:
        return VideoDoc(
            doc_id=doc_id,
            ocr_cover=str(content["ocr_cover"]),
            photo_caption=str(content["photo_caption"]),
            keyword=str(content["keyword"]),
            click_query=str(content["click_query"]),
            play_cnt=int(content.get("play_cnt", 0)),
            like_cnt=int(content.get("like_cnt", 0)),
            long_view_cnt=int(content.get("long_view_cnt", 0)),
            download_cnt=int(content.get("download_cnt", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LogFormatError(f"bad photo_content for doc {doc_id}: {exc}", line_no) from exc


def read_corpus(path: str | Path) -> list[VideoDoc]:
    """Read a corpus store. doc_ids must be unique within the file."""
    docs: list[VideoDoc] = []
    seen: set[int] = set()
    for line_no, obj in _iter_json_lines(path):
        try:
            doc_id = int(obj["doc_id"])
        except (KeyError, TypeError, ValueError):
            raise LogFormatError("missing or invalid doc_id", line_no) from None
        if doc_id in seen:
            raise LogFormatError(f"duplicate doc_id {doc_id}", line_no)
        seen.add(doc_id)
        docs.append(_doc_from_content(doc_id, obj, line_no))
    return docs


def write_corpus(path: str | Path, docs: Iterable[VideoDoc]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            obj = {"doc_id": doc.doc_id}
            obj.update(_doc_to_content(doc))
            fh.write(_dump_line(obj) + "\n")


def read_training_groups(path: str | Path) -> list[TrainingGroup]:
    """Read training groups, dropping the embedded doc content.

    Use load_group_docs() to recover the embedded documents.
    """
    groups: list[TrainingGroup] = []
    for line_no, obj in _iter_json_lines(path):
        groups.append(_group_from_record(obj, line_no))
    return groups


def _group_from_record(obj: Mapping, line_no: int) -> TrainingGroup:
    try:
        query_id = int(obj["user_id"])
        query_text = str(obj["query"])
        photo_list = obj["photo_list"]
    except (KeyError, TypeError, ValueError):
        raise LogFormatError("record needs user_id, query and photo_list", line_no) from None
    samples: list[LabeledSample] = []
    seen: set[int] = set()
    for item in photo_list:
        try:
            photo_id = int(item["photo_id"])
        except (KeyError, TypeError, ValueError):
            raise LogFormatError("photo_list item missing photo_id", line_no) from None
        if photo_id in seen:
            raise LogFormatError(f"duplicate photo_id {photo_id}", line_no)
        seen.add(photo_id)
        if "photo_content" not in item:
            raise LogFormatError(f"photo {photo_id} missing photo_content", line_no)
        try:
            label = int(item["hierarchical_label"])
        except (KeyError, TypeError, ValueError):
            raise LogFormatError(f"photo {photo_id} missing hierarchical_label", line_no) from None
        if not 0 <= label <= 5:
            raise LogFormatError(f"photo {photo_id} has label {label} outside [0,5]", line_no)
        if "source" in item:
            try:
                source = SampleSource(item["source"])
            except ValueError:
                raise LogFormatError(f"unknown source {item['source']!r}", line_no) from None
            if LABEL_OF_SOURCE[source] != label:
                raise LogFormatError(
                    f"photo {photo_id}: label {label} inconsistent with source {source.value}",
                    line_no,
                )
        else:
            source = _SOURCE_OF_LABEL[label]
        samples.append(LabeledSample(doc_id=photo_id, label=label, source=source))
    try:
        return TrainingGroup(query_id=query_id, query_text=query_text, samples=samples)
    except ValueError as exc:
        raise LogFormatError(str(exc), line_no) from exc


def load_group_docs(path: str | Path) -> dict[int, VideoDoc]:
    """Extract the documents embedded in a training-group file, keyed by doc_id."""
    docs: dict[int, VideoDoc] = {}
    for line_no, obj in _iter_json_lines(path):
        for item in obj.get("photo_list", []):
            doc_id = int(item["photo_id"])
            if doc_id not in docs:
                docs[doc_id] = _doc_from_content(doc_id, item["photo_content"], line_no)
    return docs


def write_training_groups(
    path: str | Path,
    groups: Iterable[TrainingGroup],
    docs: Mapping[int, VideoDoc],
) -> None:
    """Write groups with embedded doc content so the file is self-contained.

    The extra "source" field preserves provenance across round-trips; readers
    that only know the production schema can ignore it.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for group in groups:
            photo_list = []
            for s in group.samples:
                if s.doc_id not in docs:
                    raise KeyError(f"no document content for doc_id {s.doc_id}")
                photo_list.append(
                    {
                        "photo_id": s.doc_id,
                        "photo_content": _doc_to_content(docs[s.doc_id]),
                        "hierarchical_label": s.label,
                        "source": s.source.value,
                    }
                )
            record = {
                "user_id": group.query_id,
                "query": group.query_text,
                "photo_list": photo_list,
            }
            fh.write(_dump_line(record) + "\n")
