"""Shared fixtures: document factories, random batch builders, tiny pipeline configs."""

from __future__ import annotations

import numpy as np
import pytest

from crossmine.corpus import LabeledSample, SampleSource, TrainingGroup, VideoDoc
from crossmine.encoder import init_params
from crossmine.trainer import Batch

# Default provenance for a bare numeric label, used when a test only cares
# about the tier.
SOURCE_FOR_LABEL = {
    5: SampleSource.QUERY_LEVEL_AUG,
    4: SampleSource.CLICKED_IN_RANK,
    3: SampleSource.EXPOSED_IN_RANK,
    2: SampleSource.UNEXPOSED_IN_RANK,
    1: SampleSource.PRERANK_FILTERED,
    0: SampleSource.IN_BATCH,
}


def doc_from_text(doc_id: int, text: str) -> VideoDoc:
    return VideoDoc(doc_id=doc_id, ocr_cover=text)


def group_from_labels(query_id: int, query: str, labeled) -> TrainingGroup:
    """Group from (doc_id, label) pairs; each label gets its default source."""
    samples = [
        LabeledSample(doc_id=d, label=lab, source=SOURCE_FOR_LABEL[lab]) for d, lab in labeled
    ]
    return TrainingGroup(query_id=query_id, query_text=query, samples=samples)


def random_loss_batch(rng, max_groups=4, max_docs=6, ensure_positive=False, vocab=64):
    """Random tokenized batch plus a matching random similarity matrix."""
    n_groups = int(rng.integers(1, max_groups + 1))
    queries, docs, group_of, label_of = [], [], [], []
    for g in range(n_groups):
        queries.append(rng.integers(0, vocab, size=int(rng.integers(1, 5))))
        n_docs = int(rng.integers(1, max_docs + 1))
        labels = rng.integers(0, 6, size=n_docs)
        if ensure_positive and labels.max() < 4:
            labels[int(rng.integers(n_docs))] = int(rng.integers(4, 6))
        for lab in labels:
            docs.append(rng.integers(0, vocab, size=int(rng.integers(1, 5))))
            group_of.append(g)
            label_of.append(int(lab))
    batch = Batch(
        queries=queries,
        docs=docs,
        group_of=np.asarray(group_of, dtype=np.int64),
        label_of=np.asarray(label_of, dtype=np.int64),
    )
    scores = rng.normal(scale=0.7, size=(batch.n_groups, batch.n_docs))
    return batch, scores


def single_group_batch(labels, n_query_tokens=2):
    """One-group batch with fixed token ids; only labels matter to the loss."""
    labels = list(labels)
    return Batch(
        queries=[np.arange(n_query_tokens, dtype=np.int64)],
        docs=[np.asarray([i + 1], dtype=np.int64) for i in range(len(labels))],
        group_of=np.zeros(len(labels), dtype=np.int64),
        label_of=np.asarray(labels, dtype=np.int64),
    )


# A world small enough for end-to-end pipeline tests in a couple of seconds.
TINY_WORLD = {
    "world.seed": "0",
    "world.n_topics": "2",
    "world.intents_per_topic": "2",
    "world.docs_per_intent": "12",
    "world.n_users": "6",
    "world.sessions_per_user": "4",
    "world.holdout_sessions": "2",
    "world.rec_consume_rate": "3",
    "world.reformulation_prob": "0.5",
    "mining.seed": "0",
    "trainer.seed": "0",
    "trainer.epochs": "1",
    "trainer.batch_groups": "4",
}


def tiny_mapping(out_dir, **extra) -> dict[str, str]:
    mapping = dict(TINY_WORLD)
    mapping["paths.out_dir"] = str(out_dir)
    for key, value in extra.items():
        mapping[key] = str(value)
    return mapping


def tiny_config_text(out_dir, **extra) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(tiny_mapping(out_dir, **extra).items())]
    return "\n".join(lines) + "\n"


@pytest.fixture
def rng():
    return np.random.default_rng(814)


@pytest.fixture
def small_params():
    return init_params(0, vocab_size=64, embed_dim=8, out_dim=8)
