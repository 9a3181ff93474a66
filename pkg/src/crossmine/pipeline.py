"""File-level pipeline stages shared by the CLI and the experiment harness.

Each stage reads and writes only the artifact files named in the config, so
stages compose across processes. All writes are atomic (tmp file + rename)
and artifacts carry no timestamps: rerunning a stage with the same inputs
and seeds produces byte-identical files.
"""

from __future__ import annotations

import os
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .config import PipelineConfig
from .corpus import (
    EventKind,
    SampleSource,
    SessionEvent,
    TrainingGroup,
    VideoDoc,
    LabeledSample,
    _dump_line,
    _iter_json_lines,
    doc_text,
    load_group_docs,
    read_corpus,
    read_session_log,
    read_training_groups,
    write_corpus,
    write_session_log,
    write_training_groups,
)
from .discriminator import RelevanceScorer
from .encoder import HashingTokenizer, init_params, load_params
from .engine import (
    MiningConfig,
    assemble_group,
    detect_reformulations,
    emit_prompt,
    ingest_world_knowledge,
    mine_query_level,
    mine_search_system,
    mine_system_level,
)
from .evaluation import (
    EvalReport,
    evaluate,
    read_annotated,
    read_report,
    write_annotated,
    write_report,
)
from .logsim import (
    generate_world,
    generate_world_knowledge,
    make_annotated_split,
    simulate_sessions,
    split_holdout,
    write_intent_map,
)
from .trainer import save_checkpoint, train, write_curve

_RANK_KINDS = (
    EventKind.CLICKED,
    EventKind.EXPOSED,
    EventKind.RANK_UNEXPOSED,
    EventKind.PRERANK_FILTERED,
)
_CONSUME_KINDS = (EventKind.CLICKED, EventKind.WATCHED)


@contextmanager
def atomic_path(path: str | Path):
    """Yield a temp path that replaces `path` on success, vanishes on failure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _knowledge_file_name(index: int) -> str:
    return f"responses_{index:04d}.jsonl"


def stage_simulate(cfg: PipelineConfig) -> dict[str, int]:
    """World + session logs + ground-truth files + synthetic knowledge responses."""
    spec = cfg.world
    docs, intent_map = generate_world(spec)
    events = simulate_sessions((docs, intent_map), spec)
    train_events, eval_events = split_holdout(events, spec)
    annotated = make_annotated_split(eval_events, spec)
    knowledge = generate_world_knowledge(spec)

    with atomic_path(cfg.path("corpus")) as tmp:
        write_corpus(tmp, docs)
    with atomic_path(cfg.path("intent_map")) as tmp:
        write_intent_map(tmp, intent_map)
    with atomic_path(cfg.path("train_log")) as tmp:
        write_session_log(tmp, train_events)
    with atomic_path(cfg.path("eval_log")) as tmp:
        write_session_log(tmp, eval_events)
    with atomic_path(cfg.path("annotated")) as tmp:
        write_annotated(tmp, annotated)

    knowledge_dir = cfg.path("knowledge_dir")
    knowledge_dir.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for i, query in enumerate(sorted(knowledge)):
        name = _knowledge_file_name(i)
        with atomic_path(knowledge_dir / name) as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                for record in knowledge[query]:
                    fh.write(_dump_line(record) + "\n")
        index_rows.append({"query": query, "file": name})
    with atomic_path(knowledge_dir / "index.jsonl") as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            for row in index_rows:
                fh.write(_dump_line(row) + "\n")

    return {
        "docs": len(docs),
        "train_events": len(train_events),
        "eval_events": len(eval_events),
        "annotated_queries": len(annotated.entries),
        "knowledge_queries": len(index_rows),
    }


def _distinct_queries(events: Iterable[SessionEvent]) -> list[str]:
    return sorted({e.query_text for e in events if e.kind is EventKind.QUERY_ISSUED})


def mine_groups(
    events: Sequence[SessionEvent],
    docs_by_id: Mapping[int, VideoDoc],
    scorer,
    mining: MiningConfig,
    seed: int,
    sources: Sequence[str] = ("search", "reformulation", "recommendation"),
) -> tuple[list[TrainingGroup], Counter]:
    """Mine one group per distinct query; returns (groups, per-source sample counts).

    `sources` selects the enabled channels: "search" for rank-pipeline
    outcomes, "reformulation" for follow-up consumption, "recommendation"
    for feed consumption near the query.
    """
    queries = _distinct_queries(events)
    rank_events: dict[str, list[SessionEvent]] = {}
    consume_events: list[SessionEvent] = []
    issue_and_rec: list[SessionEvent] = []
    for e in events:
        if e.kind in _RANK_KINDS:
            rank_events.setdefault(e.query_text, []).append(e)
        if e.kind in _CONSUME_KINDS:
            consume_events.append(e)
        if e.kind in (EventKind.QUERY_ISSUED, EventKind.REC_CONSUMED):
            issue_and_rec.append(e)

    pairs = (
        detect_reformulations(events, scorer, mining) if "reformulation" in sources else []
    )

    groups: list[TrainingGroup] = []
    # Zero-seed the counter so enabled channels report 0 instead of vanishing.
    counts: Counter = Counter()
    if "search" in sources:
        for source in (
            SampleSource.CLICKED_IN_RANK,
            SampleSource.EXPOSED_IN_RANK,
            SampleSource.UNEXPOSED_IN_RANK,
            SampleSource.PRERANK_FILTERED,
        ):
            counts[source.value] = 0
    if "reformulation" in sources:
        counts[SampleSource.QUERY_LEVEL_AUG.value] = 0
    if "recommendation" in sources:
        counts[SampleSource.SYSTEM_LEVEL_AUG.value] = 0
    for query_id, q in enumerate(queries):
        mined: dict[SampleSource, set[int]] = {}
        if "search" in sources:
            for doc_id, source in mine_search_system(q, rank_events.get(q, ())).items():
                mined.setdefault(source, set()).add(doc_id)
        if "reformulation" in sources:
            mined[SampleSource.QUERY_LEVEL_AUG] = mine_query_level(
                q, pairs, consume_events, docs_by_id, scorer, mining
            )
        if "recommendation" in sources:
            mined[SampleSource.SYSTEM_LEVEL_AUG] = mine_system_level(
                q, issue_and_rec, docs_by_id, scorer, mining
            )
        group = assemble_group(query_id, q, mined, mining, seed * 1_000_003 + query_id)
        groups.append(group)
        for sample in group.samples:
            counts[sample.source.value] += 1
    return groups, counts


def stage_mine(cfg: PipelineConfig) -> Counter:
    docs = read_corpus(cfg.path("corpus"))
    docs_by_id = {d.doc_id: d for d in docs}
    events = read_session_log(cfg.path("train_log"))
    scorer = RelevanceScorer().fit(docs)
    groups, counts = mine_groups(
        events, docs_by_id, scorer, cfg.mining, cfg.mining_seed, cfg.mining_sources
    )
    with atomic_path(cfg.path("groups")) as tmp:
        write_training_groups(tmp, groups, docs_by_id)
    return counts


def stage_prompts(cfg: PipelineConfig) -> int:
    """One generation prompt per mined query, exemplar = its best-scoring doc."""
    docs = read_corpus(cfg.path("corpus"))
    events = read_session_log(cfg.path("train_log"))
    scorer = RelevanceScorer().fit(docs)
    queries = _distinct_queries(events)
    prompts_dir = cfg.path("prompts_dir")
    prompts_dir.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for i, q in enumerate(queries):
        best = max(docs, key=lambda d: (scorer.score(q, doc_text(d)), -d.doc_id))
        prompt = emit_prompt(q, best, cfg.prompt_records)
        name = f"prompt_{i:04d}.txt"
        with atomic_path(prompts_dir / name) as tmp:
            tmp.write_text(prompt, encoding="utf-8")
        index_rows.append({"query": q, "file": name})
    with atomic_path(prompts_dir / "index.jsonl") as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            for row in index_rows:
                fh.write(_dump_line(row) + "\n")
    return len(index_rows)


def merge_knowledge(
    groups: Sequence[TrainingGroup],
    responses: Mapping[str, Sequence[VideoDoc]],
) -> tuple[list[TrainingGroup], dict[int, VideoDoc]]:
    """Add knowledge docs to their query's group at the knowledge tier.

    Docs already present in a group are left alone, so re-merging is a
    no-op. Returns the merged groups plus the new docs keyed by id.
    """
    new_docs: dict[int, VideoDoc] = {}
    merged: list[TrainingGroup] = []
    for group in groups:
        extra = responses.get(group.query_text, ())
        if not extra:
            merged.append(group)
            continue
        present = {s.doc_id for s in group.samples}
        samples = list(group.samples)
        for doc in extra:
            if doc.doc_id in present:
                continue
            samples.append(
                LabeledSample(
                    doc_id=doc.doc_id, label=4, source=SampleSource.WORLD_KNOWLEDGE_AUG
                )
            )
            present.add(doc.doc_id)
            new_docs[doc.doc_id] = doc
        samples.sort(key=lambda s: (-s.label, s.doc_id))
        merged.append(
            TrainingGroup(query_id=group.query_id, query_text=group.query_text, samples=samples)
        )
    return merged, new_docs


def stage_ingest(cfg: PipelineConfig) -> tuple[int, int]:
    """Merge knowledge responses into the groups file. Returns (added, skipped)."""
    groups_path = cfg.path("groups")
    groups = read_training_groups(groups_path)
    group_docs = load_group_docs(groups_path)
    knowledge_dir = cfg.path("knowledge_dir")
    skipped_total = 0
    by_query: dict[str, list[VideoDoc]] = {}
    for _, row in _iter_json_lines(knowledge_dir / "index.jsonl"):
        q = str(row["query"])
        docs, skipped = ingest_world_knowledge(knowledge_dir / str(row["file"]), q)
        skipped_total += skipped
        by_query[q] = docs
    merged, new_docs = merge_knowledge(groups, by_query)
    group_docs.update(new_docs)
    with atomic_path(groups_path) as tmp:
        write_training_groups(tmp, merged, group_docs)
    return len(new_docs), skipped_total


def stage_train(cfg: PipelineConfig) -> tuple[int, float]:
    """Train on the groups file; write checkpoint + curve. Returns (steps, last loss)."""
    groups_path = cfg.path("groups")
    groups = read_training_groups(groups_path)
    docs_by_id = load_group_docs(groups_path)
    tokenizer = HashingTokenizer(vocab_size=cfg.vocab_size, max_len=cfg.max_len)
    params = init_params(
        cfg.trainer.seed,
        vocab_size=cfg.vocab_size,
        embed_dim=cfg.embed_dim,
        out_dim=cfg.out_dim,
        init_tau=cfg.init_tau,
    )
    result = train(groups, docs_by_id, cfg.trainer, params=params, tokenizer=tokenizer)
    with atomic_path(cfg.path("checkpoint")) as tmp:
        save_checkpoint(tmp, result.params, result.opt_state)
    with atomic_path(cfg.path("curve")) as tmp:
        write_curve(tmp, result.curve)
    last_loss = result.curve[-1][1] if result.curve else float("nan")
    return result.opt_state.step, last_loss


def stage_eval(cfg: PipelineConfig) -> EvalReport:
    """Score the checkpoint on splits built from the held-out log."""
    from .evaluation import build_splits

    docs = read_corpus(cfg.path("corpus"))
    docs_by_id = {d.doc_id: d for d in docs}
    events = read_session_log(cfg.path("eval_log"))
    scorer = RelevanceScorer().fit(docs)
    ct, qr = build_splits(
        events,
        docs_by_id,
        scorer,
        alpha=cfg.mining.alpha,
        reform_window_seconds=cfg.mining.reform_window_seconds,
        query_sim_threshold=cfg.mining.query_sim_threshold,
    )
    annotated = read_annotated(cfg.path("annotated"))
    checkpoint_path = cfg.path("checkpoint")
    params = load_params(checkpoint_path)
    report = evaluate(
        params,
        docs,
        ct,
        qr,
        annotated,
        recall_ks=cfg.recall_ks,
        ndcg_k=cfg.ndcg_k,
        checkpoint_id=checkpoint_path.stem,
    )
    with atomic_path(cfg.path("report")) as tmp:
        write_report(tmp, report)
    return report


def render_report_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width comparison table over persisted eval reports."""
    if not reports:
        raise ValueError("no reports to render")
    ks = sorted({k for r in reports for k in r.recall_ks})
    splits = sorted({s for r in reports for s in r.recall})
    headers = ["checkpoint", "corpus"]
    headers += [f"{split} R@{k}" for split in splits for k in ks]
    headers += [f"NDCG@{reports[0].ndcg_k}"]
    rows = []
    for r in reports:
        row = [r.checkpoint_id, str(r.corpus_size)]
        for split in splits:
            for k in ks:
                value = r.recall.get(split, {}).get(k)
                row.append("-" if value is None else f"{value:.4f}")
        row.append(f"{r.ndcg:.4f}")
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(row))).rstrip())
    return "\n".join(lines) + "\n"


def stage_report(report_paths: Sequence[str | Path]) -> str:
    reports = [read_report(p) for p in report_paths]
    return render_report_table(reports)
