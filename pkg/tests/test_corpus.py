"""Data model invariants and line-delimited serialization round-trips."""

import itertools
import json

import pytest

from crossmine.corpus import (
    LABEL_OF_SOURCE,
    EventKind,
    LabeledSample,
    LogFormatError,
    SampleSource,
    SessionEvent,
    TrainingGroup,
    VideoDoc,
    doc_text,
    read_corpus,
    read_session_log,
    read_training_groups,
    write_corpus,
    write_session_log,
    write_training_groups,
)


def make_event(user_id=1, timestamp=100, kind=EventKind.CLICKED, query_text="q", doc_id=7):
    return SessionEvent(
        user_id=user_id, timestamp=timestamp, kind=kind, query_text=query_text, doc_id=doc_id
    )


class TestVideoDoc:
    def test_counters_must_be_nonnegative(self):
        with pytest.raises(ValueError, match="play_cnt"):
            VideoDoc(doc_id=1, play_cnt=-1)

    def test_defaults_allow_empty_text_fields(self):
        doc = VideoDoc(doc_id=1)
        assert doc.ocr_cover == "" and doc.click_query == ""


class TestSessionEventInvariants:
    def test_query_issued_requires_text_and_no_doc(self):
        SessionEvent(user_id=1, timestamp=0, kind=EventKind.QUERY_ISSUED, query_text="q")
        with pytest.raises(ValueError):
            SessionEvent(user_id=1, timestamp=0, kind=EventKind.QUERY_ISSUED)
        with pytest.raises(ValueError):
            SessionEvent(
                user_id=1, timestamp=0, kind=EventKind.QUERY_ISSUED, query_text="q", doc_id=1
            )

    def test_rec_consumed_carries_doc_only(self):
        SessionEvent(user_id=1, timestamp=0, kind=EventKind.REC_CONSUMED, doc_id=3)
        with pytest.raises(ValueError):
            SessionEvent(
                user_id=1, timestamp=0, kind=EventKind.REC_CONSUMED, doc_id=3, query_text="q"
            )

    def test_search_kinds_need_doc_and_query_context(self):
        with pytest.raises(ValueError):
            SessionEvent(user_id=1, timestamp=0, kind=EventKind.CLICKED, doc_id=3)
        with pytest.raises(ValueError):
            SessionEvent(user_id=1, timestamp=0, kind=EventKind.EXPOSED, query_text="q")


class TestLabeledSample:
    def test_label_must_match_source(self):
        LabeledSample(doc_id=1, label=5, source=SampleSource.QUERY_LEVEL_AUG)
        with pytest.raises(ValueError, match="does not match"):
            LabeledSample(doc_id=1, label=3, source=SampleSource.QUERY_LEVEL_AUG)

    def test_tier_table_is_exact(self):
        expected = {
            SampleSource.QUERY_LEVEL_AUG: 5,
            SampleSource.SYSTEM_LEVEL_AUG: 4,
            SampleSource.WORLD_KNOWLEDGE_AUG: 4,
            SampleSource.CLICKED_IN_RANK: 4,
            SampleSource.EXPOSED_IN_RANK: 3,
            SampleSource.UNEXPOSED_IN_RANK: 2,
            SampleSource.PRERANK_FILTERED: 1,
            SampleSource.IN_BATCH: 0,
        }
        assert LABEL_OF_SOURCE == expected


class TestTrainingGroup:
    def test_duplicate_doc_id_rejected(self):
        samples = [
            LabeledSample(doc_id=1, label=4, source=SampleSource.CLICKED_IN_RANK),
            LabeledSample(doc_id=1, label=3, source=SampleSource.EXPOSED_IN_RANK),
        ]
        with pytest.raises(ValueError, match="duplicate doc_id 1"):
            TrainingGroup(query_id=1, query_text="q", samples=samples)

    def test_trainable_needs_a_strong_sample(self):
        weak = TrainingGroup(
            query_id=1,
            query_text="q",
            samples=[LabeledSample(doc_id=1, label=3, source=SampleSource.EXPOSED_IN_RANK)],
        )
        strong = TrainingGroup(
            query_id=2,
            query_text="q",
            samples=[LabeledSample(doc_id=1, label=4, source=SampleSource.CLICKED_IN_RANK)],
        )
        assert not weak.trainable
        assert strong.trainable
        assert not TrainingGroup(query_id=3, query_text="q").trainable


class TestDocText:
    def test_all_empty_fields_give_empty_string(self):
        assert doc_text(VideoDoc(doc_id=1)) == ""

    def test_empty_fields_are_skipped(self):
        assert doc_text(VideoDoc(doc_id=1, ocr_cover="a", keyword="b")) == "a b"

    def test_four_fields_join_in_fixed_order(self):
        doc = VideoDoc(
            doc_id=1, ocr_cover="w", photo_caption="x", keyword="y", click_query="z"
        )
        assert doc_text(doc) == " ".join(["w", "x", "y", "z"])


class TestSessionLogIO:
    def test_empty_file_gives_empty_stream(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text("")
        assert read_session_log(path) == []

    def test_single_query_event_round_trip(self, tmp_path):
        path = tmp_path / "log.jsonl"
        event = SessionEvent(
            user_id=1, timestamp=100, kind=EventKind.QUERY_ISSUED, query_text="transformer"
        )
        write_session_log(path, [event])
        assert read_session_log(path) == [event]

    @pytest.mark.parametrize("order", list(itertools.permutations([300, 100, 200])))
    def test_events_sorted_by_timestamp_per_user(self, tmp_path, order):
        path = tmp_path / "log.jsonl"
        write_session_log(path, [make_event(timestamp=t, doc_id=t) for t in order])
        stamps = [e.timestamp for e in read_session_log(path)]
        assert stamps == sorted(order)

    def test_equal_timestamps_keep_file_order(self, tmp_path):
        path = tmp_path / "log.jsonl"
        events = [make_event(timestamp=5, doc_id=d) for d in (9, 3, 6)]
        write_session_log(path, events)
        assert [e.doc_id for e in read_session_log(path)] == [9, 3, 6]

    def test_users_interleaved_sort_by_user_then_time(self, tmp_path):
        path = tmp_path / "log.jsonl"
        events = [
            make_event(user_id=2, timestamp=1, doc_id=1),
            make_event(user_id=1, timestamp=9, doc_id=2),
            make_event(user_id=1, timestamp=3, doc_id=3),
        ]
        write_session_log(path, events)
        got = read_session_log(path)
        assert [(e.user_id, e.timestamp) for e in got] == [(1, 3), (1, 9), (2, 1)]

    def test_malformed_line_error_carries_line_number(self, tmp_path):
        path = tmp_path / "log.jsonl"
        good = json.dumps(
            {"user_id": 1, "timestamp": 0, "kind": "query_issued", "query_text": "q"}
        )
        path.write_text(good + "\n{broken\n")
        with pytest.raises(LogFormatError, match="line 2") as err:
            read_session_log(path)
        assert err.value.line_no == 2

    def test_unknown_kind_error_names_the_token(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(json.dumps({"user_id": 1, "timestamp": 0, "kind": "zapped"}) + "\n")
        with pytest.raises(LogFormatError, match="zapped"):
            read_session_log(path)

    def test_missing_kind_field_is_an_error(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(json.dumps({"user_id": 1, "timestamp": 0}) + "\n")
        with pytest.raises(LogFormatError, match="kind"):
            read_session_log(path)

    def test_round_trip_preserves_all_kinds(self, tmp_path):
        path = tmp_path / "log.jsonl"
        events = [
            SessionEvent(user_id=1, timestamp=0, kind=EventKind.QUERY_ISSUED, query_text="q"),
            make_event(timestamp=1, kind=EventKind.CLICKED),
            make_event(timestamp=2, kind=EventKind.WATCHED),
            make_event(timestamp=3, kind=EventKind.EXPOSED),
            make_event(timestamp=4, kind=EventKind.RANK_UNEXPOSED),
            make_event(timestamp=5, kind=EventKind.PRERANK_FILTERED),
            SessionEvent(user_id=1, timestamp=6, kind=EventKind.REC_CONSUMED, doc_id=4),
        ]
        write_session_log(path, events)
        assert read_session_log(path) == events


class TestCorpusIO:
    def test_round_trip_exact(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        docs = [
            VideoDoc(
                doc_id=10,
                ocr_cover="growing ficus",
                photo_caption="ficus care",
                keyword="ficus",
                click_query="ficus plant",
                play_cnt=12,
                like_cnt=3,
                long_view_cnt=5,
                download_cnt=1,
            ),
            VideoDoc(doc_id=11, photo_caption="盆栽 bonsai"),
        ]
        write_corpus(path, docs)
        assert read_corpus(path) == docs

    def test_duplicate_doc_id_rejected(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        doc = VideoDoc(doc_id=5)
        write_corpus(path, [doc])
        raw = path.read_text()
        path.write_text(raw + raw)
        with pytest.raises(LogFormatError, match="duplicate doc_id 5"):
            read_corpus(path)


def group_record(photo_list, user_id=10001, query="breast pump"):
    return json.dumps({"user_id": user_id, "query": query, "photo_list": photo_list})


def photo_item(photo_id, label, **content):
    base = {"ocr_cover": "", "photo_caption": "", "keyword": "", "click_query": ""}
    base.update(content)
    return {"photo_id": photo_id, "photo_content": base, "hierarchical_label": label}


class TestTrainingGroupIO:
    def test_two_photo_record_keeps_ids_and_labels(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        record = group_record(
            [
                photo_item(1938937936, 4, ocr_cover="electric breast pump"),
                photo_item(1037689405, 2, photo_caption="manual pump"),
            ]
        )
        path.write_text(record + "\n")
        groups = read_training_groups(path)
        assert len(groups) == 1
        assert [(s.doc_id, s.label) for s in groups[0].samples] == [
            (1938937936, 4),
            (1037689405, 2),
        ]

    def test_empty_photo_list_gives_untrainable_group(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        path.write_text(group_record([]) + "\n")
        groups = read_training_groups(path)
        assert groups[0].samples == []
        assert not groups[0].trainable

    def test_out_of_range_label_names_the_photo(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        path.write_text(group_record([photo_item(42, 7)]) + "\n")
        with pytest.raises(LogFormatError, match="42"):
            read_training_groups(path)

    def test_missing_photo_content_rejected(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        item = photo_item(42, 3)
        del item["photo_content"]
        path.write_text(group_record([item]) + "\n")
        with pytest.raises(LogFormatError, match="photo_content"):
            read_training_groups(path)

    def test_duplicate_photo_id_rejected(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        path.write_text(group_record([photo_item(1, 4), photo_item(1, 3)]) + "\n")
        with pytest.raises(LogFormatError, match="duplicate photo_id 1"):
            read_training_groups(path)

    def test_source_label_mismatch_rejected(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        item = photo_item(1, 3)
        item["source"] = "query_level_aug"
        path.write_text(group_record([item]) + "\n")
        with pytest.raises(LogFormatError, match="inconsistent"):
            read_training_groups(path)

    def test_round_trip_preserves_groups_and_sources(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        docs = {
            1: VideoDoc(doc_id=1, ocr_cover="a"),
            2: VideoDoc(doc_id=2, ocr_cover="b", play_cnt=9),
        }
        group = TrainingGroup(
            query_id=3,
            query_text="q",
            samples=[
                LabeledSample(doc_id=1, label=4, source=SampleSource.WORLD_KNOWLEDGE_AUG),
                LabeledSample(doc_id=2, label=2, source=SampleSource.UNEXPOSED_IN_RANK),
            ],
        )
        write_training_groups(path, [group], docs)
        got = read_training_groups(path)
        assert got == [group]
        assert got[0].samples[0].source is SampleSource.WORLD_KNOWLEDGE_AUG

    def test_writing_without_doc_content_fails(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        group = TrainingGroup(
            query_id=3,
            query_text="q",
            samples=[LabeledSample(doc_id=1, label=4, source=SampleSource.CLICKED_IN_RANK)],
        )
        with pytest.raises(KeyError, match="doc_id 1"):
            write_training_groups(path, [group], {})
