"""Exact-retrieval evaluation: recall over two behavioral splits, graded NDCG.

The click split holds docs clicked under each query; the reformulation
split holds docs consumed after a query was reformulated, threshold-checked
and attributed back to the earliest original query of the chain. Retrieval
is exact brute force over precomputed embeddings, so metric differences
reflect the model alone.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import EventKind, LogFormatError, SessionEvent, VideoDoc, doc_text, _dump_line, _iter_json_lines
from .encoder import EncoderParams, HashingTokenizer, encode_doc, encode_query

_CONSUME_KINDS = (EventKind.CLICKED, EventKind.WATCHED)

CLICK_SPLIT = "CT"
REFORM_SPLIT = "QR"


@dataclass
class EvalSplit:
    """Ground-truth sets per query. Entries keep insertion order."""

    kind: str
    entries: list[tuple[str, set[int]]] = field(default_factory=list)

    def __post_init__(self):
        for query, gt in self.entries:
            if not gt:
                raise ValueError(f"empty ground truth for query {query!r}")


@dataclass
class AnnotatedSplit:
    """Graded relevance per query: (query, [(doc_id, label 0..5), ...])."""

    entries: list[tuple[str, list[tuple[int, int]]]] = field(default_factory=list)


@dataclass
class EvalReport:
    checkpoint_id: str
    corpus_size: int
    recall_ks: tuple[int, ...]
    ndcg_k: int
    recall: dict[str, dict[int, float]]  # split kind -> K -> value
    ndcg: float
    ndcg_skipped: int = 0

    def __post_init__(self):
        for split, per_k in self.recall.items():
            for k, v in per_k.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"recall@{k} on {split} out of [0, 1]: {v}")
        if not 0.0 <= self.ndcg <= 1.0:
            raise ValueError(f"ndcg out of [0, 1]: {self.ndcg}")

    def to_dict(self) -> dict:
        return {
            "checkpoint_id": self.checkpoint_id,
            "corpus_size": self.corpus_size,
            "recall_ks": list(self.recall_ks),
            "ndcg_k": self.ndcg_k,
            "recall": {
                split: {str(k): v for k, v in sorted(per_k.items())}
                for split, per_k in sorted(self.recall.items())
            },
            "ndcg": self.ndcg,
            "ndcg_skipped": self.ndcg_skipped,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalReport":
        return cls(
            checkpoint_id=str(obj["checkpoint_id"]),
            corpus_size=int(obj["corpus_size"]),
            recall_ks=tuple(int(k) for k in obj["recall_ks"]),
            ndcg_k=int(obj["ndcg_k"]),
            recall={
                split: {int(k): float(v) for k, v in per_k.items()}
                for split, per_k in obj["recall"].items()
            },
            ndcg=float(obj["ndcg"]),
            ndcg_skipped=int(obj.get("ndcg_skipped", 0)),
        )


# ---------------------------------------------------------------------------
# split construction
# ---------------------------------------------------------------------------


def build_splits(
    events: Sequence[SessionEvent],
    docs: Mapping[int, VideoDoc],
    scorer,
    alpha: float,
    reform_window_seconds: int = 90,
    query_sim_threshold: float = 0.6,
) -> tuple[EvalSplit, EvalSplit]:
    """Ground truth from a held-out log partition.

    Click split: docs clicked under each query. Reformulation split: docs
    consumed under a follow-up query, kept when their text clears alpha
    against the original query, attributed to the earliest original query
    of the reformulation chain. Queries with empty ground truth are absent.
    Docs missing from the corpus mapping are ignored.
    """
    from .engine import MiningConfig, detect_reformulations

    clicked: dict[str, set[int]] = defaultdict(set)
    order_ct: list[str] = []
    for e in events:
        if e.kind is EventKind.CLICKED and e.doc_id in docs:
            if e.query_text not in clicked:
                order_ct.append(e.query_text)
            clicked[e.query_text].add(e.doc_id)

    cfg = MiningConfig(
        alpha=alpha,
        query_sim_threshold=query_sim_threshold,
        reform_window_seconds=reform_window_seconds,
    )
    pairs = detect_reformulations(events, scorer, cfg)
    # Earliest original query of each chain, per user: a follow-up that is
    # itself reformulated later passes its root along.
    root: dict[tuple[int, str], str] = {}
    for p in pairs:
        key = (p.user_id, p.q_reform)
        if key not in root and p.q_reform != p.q_orig:
            root[key] = root.get((p.user_id, p.q_orig), p.q_orig)

    consumed: dict[tuple[int, str], list[tuple[int, int]]] = defaultdict(list)
    for e in events:
        if e.kind in _CONSUME_KINDS and e.doc_id in docs:
            consumed[(e.user_id, e.query_text)].append((e.timestamp, e.doc_id))

    reform_gt: dict[str, set[int]] = defaultdict(set)
    order_qr: list[str] = []
    for p in pairs:
        if p.q_reform == p.q_orig:
            continue
        origin = root[(p.user_id, p.q_reform)]
        for ts, doc_id in consumed.get((p.user_id, p.q_reform), ()):
            if ts < p.t_reform:
                continue
            if scorer.is_relevant(origin, docs[doc_id], alpha):
                if origin not in reform_gt:
                    order_qr.append(origin)
                reform_gt[origin].add(doc_id)

    ct = EvalSplit(kind=CLICK_SPLIT, entries=[(q, clicked[q]) for q in order_ct if clicked[q]])
    qr = EvalSplit(kind=REFORM_SPLIT, entries=[(q, reform_gt[q]) for q in order_qr if reform_gt[q]])
    return ct, qr


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


class DocIndex:
    """Read-only matrix of unit doc embeddings, rows sorted by doc_id."""

    def __init__(self, params: EncoderParams, corpus: Iterable[VideoDoc], tokenizer=None):
        if tokenizer is None:
            tokenizer = HashingTokenizer(vocab_size=params.embed.shape[0])
        docs = sorted(corpus, key=lambda d: d.doc_id)
        if not docs:
            raise ValueError("cannot index an empty corpus")
        self.tokenizer = tokenizer
        self.params = params
        self.doc_ids = np.asarray([d.doc_id for d in docs], dtype=np.int64)
        self.matrix = np.vstack(
            [encode_doc(params, tokenizer.encode(doc_text(d))) for d in docs]
        )

    def query(self, q: str, k: int) -> list[int]:
        if k < 1:
            raise ValueError(f"K must be >= 1, got {k}")
        qv = encode_query(self.params, self.tokenizer.encode(q))
        scores = self.matrix @ qv
        # Sort by score descending, doc_id ascending on ties.
        order = np.lexsort((self.doc_ids, -scores))
        return self.doc_ids[order[:k]].tolist()


def retrieve_topk(
    params: EncoderParams, corpus: Sequence[VideoDoc], q: str, k: int, index: DocIndex | None = None
) -> list[int]:
    """Exact top-K doc_ids for q, ties broken by ascending doc_id.

    Pass a prebuilt DocIndex to amortize doc encoding across queries.
    """
    if index is None:
        index = DocIndex(params, corpus)
    return index.query(q, k)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def recall_at_k(split: EvalSplit, retrieved: Mapping[str, Sequence[int]], k: int) -> float:
    """Mean over queries of |ground truth hit in top-K| / |ground truth|."""
    if not split.entries:
        raise ValueError(f"split {split.kind} has no entries")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    total = 0.0
    for query, gt in split.entries:
        if query not in retrieved:
            raise KeyError(f"no retrieval result for query {query!r}")
        top = set(retrieved[query][:k])
        total += len(gt & top) / len(gt)
    return total / len(split.entries)


def _dcg(labels: Sequence[int], k: int) -> float:
    return sum(
        (2.0**label - 1.0) / math.log2(i + 1) for i, label in enumerate(labels[:k], start=1)
    )


def ndcg_at_k(
    annotated: AnnotatedSplit, retrieved: Mapping[str, Sequence[int]], k: int = 4
) -> tuple[float, int]:
    """Mean NDCG@K over annotated queries; returns (mean, skipped_count).

    Retrieved docs without an annotation score 0. Queries whose ideal DCG is
    0 cannot be normalized; they are skipped and counted.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    values: list[float] = []
    skipped = 0
    for query, labeled in annotated.entries:
        if query not in retrieved:
            raise KeyError(f"no retrieval result for query {query!r}")
        label_of = dict(labeled)
        ideal = sorted(label_of.values(), reverse=True)
        idcg = _dcg(ideal, k)
        if idcg == 0.0:
            skipped += 1
            continue
        ranked_labels = [label_of.get(doc_id, 0) for doc_id in retrieved[query][:k]]
        values.append(_dcg(ranked_labels, k) / idcg)
    if not values:
        raise ValueError("every annotated query has ideal DCG 0")
    return sum(values) / len(values), skipped


def evaluate(
    params: EncoderParams,
    corpus: Sequence[VideoDoc],
    ct: EvalSplit,
    qr: EvalSplit,
    annotated: AnnotatedSplit,
    recall_ks: Sequence[int] = (50, 100),
    ndcg_k: int = 4,
    checkpoint_id: str = "",
) -> EvalReport:
    """Embed the corpus once, rank every split query, compute all metrics."""
    index = DocIndex(params, corpus)
    max_k = max(list(recall_ks) + [ndcg_k])
    queries = {q for q, _ in ct.entries} | {q for q, _ in qr.entries}
    queries |= {q for q, _ in annotated.entries}
    retrieved = {q: index.query(q, max_k) for q in sorted(queries)}
    recall = {
        split.kind: {int(k): recall_at_k(split, retrieved, int(k)) for k in recall_ks}
        for split in (ct, qr)
    }
    ndcg, skipped = ndcg_at_k(annotated, retrieved, ndcg_k)
    return EvalReport(
        checkpoint_id=checkpoint_id,
        corpus_size=len(index.doc_ids),
        recall_ks=tuple(int(k) for k in recall_ks),
        ndcg_k=ndcg_k,
        recall=recall,
        ndcg=ndcg,
        ndcg_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_split(path: str | Path, split: EvalSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query, gt in split.entries:
            fh.write(_dump_line({"kind": split.kind, "query": query, "doc_ids": sorted(gt)}) + "\n")


def read_split(path: str | Path, kind: str) -> EvalSplit:
    entries: list[tuple[str, set[int]]] = []
    for line_no, obj in _iter_json_lines(path):
        try:
            if obj["kind"] != kind:
                raise LogFormatError(f"expected split kind {kind}, got {obj['kind']}", line_no)
            entries.append((str(obj["query"]), {int(d) for d in obj["doc_ids"]}))
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"bad split entry: {exc}", line_no) from exc
    return EvalSplit(kind=kind, entries=entries)


def write_annotated(path: str | Path, split: AnnotatedSplit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query, labeled in split.entries:
            fh.write(
                _dump_line(
                    {"query": query, "labels": [[doc, label] for doc, label in sorted(labeled)]}
                )
                + "\n"
            )


def read_annotated(path: str | Path) -> AnnotatedSplit:
    entries: list[tuple[str, list[tuple[int, int]]]] = []
    for line_no, obj in _iter_json_lines(path):
        try:
            labeled = [(int(doc), int(label)) for doc, label in obj["labels"]]
            entries.append((str(obj["query"]), labeled))
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"bad annotated entry: {exc}", line_no) from exc
    return AnnotatedSplit(entries=entries)


def write_report(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line(report.to_dict()) + "\n")


def read_report(path: str | Path) -> EvalReport:
    rows = list(_iter_json_lines(path))
    if len(rows) != 1:
        raise LogFormatError(f"report file must hold exactly one record, found {len(rows)}")
    return EvalReport.from_dict(rows[0][1])
