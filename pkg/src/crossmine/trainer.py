"""Contrastive training of the two-tower encoder on labeled groups.

The tiered loss treats every doc in a group as an anchor whose denominator
contains itself, all cross-group docs, and only the strictly lower-tier docs
of its own group. Equal or higher tiers in the same group are excluded so
they are never pushed away from the query. The whole batch is computed in
one masked pass over an expanded logit matrix; a per-anchor reference
implementation and a pure-Python oracle exist for verification and
benchmarking.

All losses are sums over anchors, not means, and return analytic gradients
with respect to the raw similarity matrix and the temperature.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import TrainingGroup, VideoDoc, doc_text
from .encoder import (
    EMBED_DIM,
    INIT_TAU,
    MAX_LEN,
    OUT_DIM,
    VOCAB_SIZE,
    EncoderParams,
    HashingTokenizer,
    _read_params,
    _write_params,
    init_params,
)

# Mask states for the expanded (anchor x doc) logit matrix.
MASKED = np.int8(0)
NEGATIVE = np.int8(1)
POSITIVE = np.int8(2)

# Additive pad for disallowed logits. After the row-max shift the pad sits
# thousands of nats below zero, so exp() underflows to exactly 0.0 and
# masked entries contribute nothing to the denominator or the gradient.
_PAD = -1.0e4

LOSS_KINDS = ("h_infonce", "infonce_binary", "hla_demoted")


class _TokenLayout:
    """Flattened view of a list of token-id arrays for vectorized pooling."""

    __slots__ = ("lens", "flat", "rows")

    def __init__(self, token_lists: Sequence[np.ndarray]):
        n = len(token_lists)
        self.lens = np.fromiter((ids.size for ids in token_lists), dtype=np.int64, count=n)
        if int(self.lens.sum()):
            self.flat = np.concatenate(token_lists)
        else:
            self.flat = np.zeros(0, dtype=np.int64)
        self.rows = np.repeat(np.arange(n, dtype=np.int64), self.lens)


@dataclass
class Batch:
    """Tokenized training batch: one query per group, docs flattened across groups."""

    queries: list[np.ndarray]        # per-group query token ids
    docs: list[np.ndarray]           # per-doc token ids, all groups concatenated
    group_of: np.ndarray             # (n_docs,) group index of each doc
    label_of: np.ndarray             # (n_docs,) relevance tier of each doc
    group_ids: np.ndarray | None = None  # original query ids, for error messages

    def __post_init__(self):
        self.group_of = np.asarray(self.group_of, dtype=np.int64)
        self.label_of = np.asarray(self.label_of, dtype=np.int64)
        if self.group_of.shape != self.label_of.shape:
            raise ValueError("group_of and label_of must have equal length")
        if len(self.docs) != self.group_of.shape[0]:
            raise ValueError("docs and group_of must have equal length")
        if len(self.queries) == 0:
            if self.group_of.size:
                raise ValueError("docs present but no queries")
            return  # the empty batch
        if self.group_of.size:
            if self.group_of.min() < 0 or self.group_of.max() >= len(self.queries):
                raise ValueError("group_of entries must index into queries")
        sizes = np.bincount(self.group_of, minlength=len(self.queries))
        if (sizes == 0).any():
            missing = int(np.flatnonzero(sizes == 0)[0])
            raise ValueError(f"query at batch position {missing} has no docs")

    @property
    def n_groups(self) -> int:
        return len(self.queries)

    @property
    def n_docs(self) -> int:
        return len(self.docs)

    def with_labels(self, labels: np.ndarray) -> "Batch":
        return Batch(
            queries=self.queries,
            docs=self.docs,
            group_of=self.group_of,
            label_of=labels,
            group_ids=self.group_ids,
        )

    def _group_name(self, g: int) -> str:
        if self.group_ids is not None:
            return f"group {int(self.group_ids[g])}"
        return f"group at batch position {g}"

    def _query_layout(self) -> _TokenLayout:
        cached = self.__dict__.get("_q_layout")
        if cached is None:
            cached = self.__dict__["_q_layout"] = _TokenLayout(self.queries)
        return cached

    def _doc_layout(self) -> _TokenLayout:
        cached = self.__dict__.get("_d_layout")
        if cached is None:
            cached = self.__dict__["_d_layout"] = _TokenLayout(self.docs)
        return cached

    def _pool_matrices(self, vocab: int) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """Mean pooling as a sparse matrix: row r, column t holds count(t in r)/len(r).

        Rows are the queries followed by the docs. The transpose (also CSR)
        scatters pooled-vector gradients back onto the embedding table.
        """
        cached = self.__dict__.get("_pool_cache")
        if cached is not None and cached[0] == vocab:
            return cached[1], cached[2]
        ql, dl = self._query_layout(), self._doc_layout()
        rows = np.concatenate([ql.rows, dl.rows + self.n_groups])
        cols = np.concatenate([ql.flat, dl.flat])
        weights = np.concatenate(
            [
                np.repeat(1.0 / np.maximum(ql.lens, 1), ql.lens),
                np.repeat(1.0 / np.maximum(dl.lens, 1), dl.lens),
            ]
        )
        pool = sparse.csr_matrix(
            (weights, (rows, cols)), shape=(self.n_groups + self.n_docs, vocab)
        )
        scatter = pool.T.tocsr()
        self.__dict__["_pool_cache"] = (vocab, pool, scatter)
        return pool, scatter


def make_batch(
    groups: Sequence[TrainingGroup],
    docs_by_id: Mapping[int, VideoDoc],
    tokenizer: HashingTokenizer,
    rng: np.random.Generator | None = None,
    max_group_docs: int = 32,
) -> Batch:
    """Tokenize groups into a Batch, subsampling oversized groups.

    Subsampling keeps at least one tier >= 4 doc so the group stays a valid
    training unit; when the draw has none, the lowest-tier pick is swapped
    for the first unpicked tier >= 4 doc.
    """
    queries: list[np.ndarray] = []
    docs: list[np.ndarray] = []
    group_of: list[int] = []
    label_of: list[int] = []
    group_ids: list[int] = []
    for g, group in enumerate(groups):
        samples = group.samples
        if len(samples) > max_group_docs:
            if rng is None:
                raise ValueError(
                    f"group {group.query_id} has {len(samples)} docs > {max_group_docs}; "
                    "an rng is required to subsample"
                )
            picked = sorted(rng.choice(len(samples), size=max_group_docs, replace=False))
            has_strong = any(s.label >= 4 for s in samples)
            if has_strong and not any(samples[i].label >= 4 for i in picked):
                replacement = next(
                    i for i, s in enumerate(samples) if s.label >= 4 and i not in set(picked)
                )
                weakest = min(picked, key=lambda i: (samples[i].label, -i))
                picked.remove(weakest)
                picked.append(replacement)
                picked.sort()
            samples = [samples[i] for i in picked]
        queries.append(tokenizer.encode(group.query_text))
        group_ids.append(group.query_id)
        for s in samples:
            if s.doc_id not in docs_by_id:
                raise KeyError(f"group {group.query_id}: no content for doc {s.doc_id}")
            docs.append(tokenizer.encode(doc_text(docs_by_id[s.doc_id])))
            group_of.append(g)
            label_of.append(s.label)
    return Batch(
        queries=queries,
        docs=docs,
        group_of=np.asarray(group_of, dtype=np.int64),
        label_of=np.asarray(label_of, dtype=np.int64),
        group_ids=np.asarray(group_ids, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# forward pass over a batch
# ---------------------------------------------------------------------------


@dataclass
class _ForwardCache:
    norm_q: np.ndarray     # (n_groups,) pre-normalization magnitudes
    norm_d: np.ndarray     # (n_docs,)
    vec_q: np.ndarray      # (n_groups, out_dim) unit query embeddings
    vec_d: np.ndarray      # (n_docs, out_dim)
    pooled_q: np.ndarray   # (n_groups, embed_dim)
    pooled_d: np.ndarray   # (n_docs, embed_dim)
    scores: np.ndarray     # (n_groups, n_docs)


def _project_normalize(pooled: np.ndarray, proj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = pooled @ proj
    norm = np.linalg.norm(h, axis=1)
    vec = np.zeros_like(h)
    live = norm > 0.0
    vec[live] = h[live] / norm[live, None]
    vec[~live, 0] = 1.0  # degenerate rows become a fixed unit vector
    return vec, norm


def _forward(params: EncoderParams, batch: Batch) -> _ForwardCache:
    pool, _ = batch._pool_matrices(params.embed.shape[0])
    stacked = np.asarray(pool @ params.embed)
    pooled_q = stacked[: batch.n_groups]
    pooled_d = stacked[batch.n_groups :]
    vec_q, norm_q = _project_normalize(pooled_q, params.proj_query)
    vec_d, norm_d = _project_normalize(pooled_d, params.proj_doc)
    return _ForwardCache(
        norm_q=norm_q,
        norm_d=norm_d,
        vec_q=vec_q,
        vec_d=vec_d,
        pooled_q=pooled_q,
        pooled_d=pooled_d,
        scores=vec_q @ vec_d.T,
    )


def similarity_matrix(params: EncoderParams, batch: Batch) -> np.ndarray:
    """Raw (n_groups, n_docs) similarity matrix, unclipped."""
    return _forward(params, batch).scores


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def build_mask(batch: Batch) -> np.ndarray:
    """Ternary (n_docs, n_docs) mask over the expanded logit matrix.

    Row i is doc i acting as the anchor paired with its group's query. The
    diagonal is the positive; cross-group entries are negatives; same-group
    entries are negatives only when strictly lower-tier, else masked out.
    """
    same_group = batch.group_of[:, None] == batch.group_of[None, :]
    lower_tier = batch.label_of[None, :] < batch.label_of[:, None]
    mask = np.full((batch.n_docs, batch.n_docs), NEGATIVE, dtype=np.int8)
    mask[same_group & ~lower_tier] = MASKED
    np.fill_diagonal(mask, POSITIVE)
    return mask


def _check_inputs(scores: np.ndarray, tau: float) -> None:
    if not np.isfinite(scores).all():
        raise ValueError("similarity matrix contains non-finite values")
    if not math.isfinite(tau) or tau <= 0.0:
        raise ValueError(f"temperature must be finite and > 0, got {tau}")


def _masked_softmax_loss(
    expanded: np.ndarray,
    allowed: np.ndarray,
    anchor_weight: np.ndarray | None,
    tau: float,
) -> tuple[float, np.ndarray, float]:
    """Shared core: (weighted) sum of -log softmax(diagonal) over allowed entries.

    Returns (loss, dL/d_expanded, dL/d_tau). Disallowed entries get the
    additive pad, vanish from the denominator after the row-max shift, and
    receive exactly zero gradient. anchor_weight None means every anchor
    counts with weight 1.
    """
    n = expanded.shape[0]
    idx = np.arange(n)
    diag = expanded[idx, idx] / tau
    work = expanded / tau
    np.copyto(work, _PAD, where=~allowed)
    row_max = work.max(axis=1)
    work -= row_max[:, None]
    np.exp(work, out=work)
    denom = work.sum(axis=1)
    per_anchor = row_max + np.log(denom) - diag
    if anchor_weight is None:
        loss = float(per_anchor.sum())
    else:
        loss = float(per_anchor @ anchor_weight)
    work /= denom[:, None]       # now the softmax probabilities
    work[idx, idx] -= 1.0
    if anchor_weight is None:
        work /= tau
    else:
        work *= anchor_weight[:, None] / tau
    d_tau = float(-np.vdot(work, expanded) / tau)
    return loss, work, d_tau


def _fold_rows(grad: np.ndarray, group_of: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum expanded-row gradients back into their group's similarity row."""
    if grad.shape[0] and (np.diff(group_of) >= 0).all():
        starts = np.searchsorted(group_of, np.arange(n_groups))
        return np.add.reduceat(grad, starts, axis=0)
    out = np.zeros((n_groups, grad.shape[1]), dtype=np.float64)
    np.add.at(out, group_of, grad)
    return out


def h_infonce_masked(
    scores: np.ndarray, mask: np.ndarray, batch: Batch, tau: float
) -> tuple[float, np.ndarray, float]:
    """Single-pass tiered loss over a whole batch.

    scores is the (n_groups, n_docs) similarity matrix. Returns the summed
    loss, dL/d_scores of the same shape, and dL/d_tau.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_inputs(scores, tau)
    if batch.n_docs == 0:
        return 0.0, np.zeros_like(scores), 0.0
    if mask.shape != (batch.n_docs, batch.n_docs):
        raise ValueError(f"mask shape {mask.shape} does not match {batch.n_docs} docs")
    expanded = scores[batch.group_of]
    loss, grad, d_tau = _masked_softmax_loss(expanded, mask != MASKED, None, tau)
    return loss, _fold_rows(grad, batch.group_of, batch.n_groups), d_tau


def h_infonce_naive(scores: np.ndarray, batch: Batch, tau: float) -> float:
    """Independent oracle: per-anchor loss built directly from the tier rule.

    Pure Python, no shared mask machinery. Used to pin down the vectorized
    implementation.
    """
    _check_inputs(np.asarray(scores, dtype=np.float64), tau)
    if batch.n_docs == 0:
        return 0.0
    group_of = batch.group_of.tolist()
    label_of = batch.label_of.tolist()
    total = 0.0
    for i in range(batch.n_docs):
        g = group_of[i]
        terms = []
        for j in range(batch.n_docs):
            if j == i or group_of[j] != g or label_of[j] < label_of[i]:
                terms.append(float(scores[g][j]) / tau)
        shift = max(terms)
        log_denom = shift + math.log(sum(math.exp(t - shift) for t in terms))
        total += log_denom - float(scores[g][i]) / tau
    return total


def _h_infonce_per_anchor(
    scores: np.ndarray, batch: Batch, tau: float
) -> tuple[float, np.ndarray, float]:
    """Per-anchor reference with gradients: one masked softmax per doc.

    Computes exactly what h_infonce_masked computes, one row at a time.
    Kept as the baseline for the single-pass speedup benchmark.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_inputs(scores, tau)
    group_of = batch.group_of
    label_of = batch.label_of
    n = batch.n_docs
    loss = 0.0
    d_scores = np.zeros_like(scores)
    d_tau = 0.0
    for i in range(n):
        g = group_of[i]
        same = group_of == g
        allowed = ~same | (label_of < label_of[i])
        allowed[i] = True
        row = scores[g]
        z = row[allowed] / tau
        shift = z.max()
        unnorm = np.exp(z - shift)
        denom = unnorm.sum()
        loss += shift + math.log(denom) - row[i] / tau
        probs = unnorm / denom
        row_grad = np.zeros(n, dtype=np.float64)
        row_grad[allowed] = probs
        row_grad[i] -= 1.0
        row_grad /= tau
        d_scores[g] += row_grad
        d_tau -= float(row_grad @ row) / tau
    return loss, d_scores, d_tau


def infonce_baseline(
    scores: np.ndarray, batch: Batch, tau: float, positive_threshold: int = 4
) -> tuple[float, np.ndarray, float]:
    """Flat binary contrastive loss: one anchor per tier >= threshold doc.

    The denominator holds the anchor, its group's below-threshold docs, and
    all cross-group docs. Sibling positives are excluded from the
    denominator rather than treated as negatives, so on batches whose docs
    all sit at or above the threshold this coincides with the tiered loss
    under flattened labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_inputs(scores, tau)
    if batch.n_docs == 0:
        return 0.0, np.zeros_like(scores), 0.0
    is_positive = batch.label_of >= positive_threshold
    for g in range(batch.n_groups):
        if not is_positive[batch.group_of == g].any():
            raise ValueError(
                f"{batch._group_name(g)} has no doc with tier >= {positive_threshold}"
            )
    same_group = batch.group_of[:, None] == batch.group_of[None, :]
    allowed = ~same_group | ~is_positive[None, :]
    np.fill_diagonal(allowed, True)
    expanded = scores[batch.group_of]
    weight = is_positive.astype(np.float64)
    loss, grad, d_tau = _masked_softmax_loss(expanded, allowed, weight, tau)
    return loss, _fold_rows(grad, batch.group_of, batch.n_groups), d_tau


def batch_loss(
    scores: np.ndarray, batch: Batch, tau: float, loss_kind: str
) -> tuple[float, np.ndarray, float]:
    """Dispatch on the configured training objective."""
    if loss_kind == "h_infonce":
        return h_infonce_masked(scores, build_mask(batch), batch, tau)
    if loss_kind == "hla_demoted":
        demoted = batch.with_labels(np.minimum(batch.label_of, 4))
        return h_infonce_masked(scores, build_mask(demoted), demoted, tau)
    if loss_kind == "infonce_binary":
        return infonce_baseline(scores, batch, tau)
    raise ValueError(f"unknown loss {loss_kind!r}; expected one of {LOSS_KINDS}")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


@dataclass
class Grads:
    embed: np.ndarray
    proj_query: np.ndarray
    proj_doc: np.ndarray
    log_tau: float


def _norm_backward(d_vec: np.ndarray, vec: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # Through v = h / |h|: dh = (dv - (dv . v) v) / |h|. Degenerate rows
    # (norm 0) produced a constant vector, so they get no gradient.
    out = np.zeros_like(d_vec)
    live = norm > 0.0
    inner = (d_vec[live] * vec[live]).sum(axis=1, keepdims=True)
    out[live] = (d_vec[live] - inner * vec[live]) / norm[live, None]
    return out


def backward(
    params: EncoderParams, batch: Batch, d_scores: np.ndarray, d_tau: float
) -> Grads:
    """Parameter gradients given dL/d_scores and dL/d_tau.

    Recomputes the forward pass internally; callers only need to hand over
    the loss gradients.
    """
    cache = _forward(params, batch)
    d_vec_q = d_scores @ cache.vec_d
    d_vec_d = d_scores.T @ cache.vec_q
    d_h_q = _norm_backward(d_vec_q, cache.vec_q, cache.norm_q)
    d_h_d = _norm_backward(d_vec_d, cache.vec_d, cache.norm_d)
    d_proj_q = cache.pooled_q.T @ d_h_q
    d_proj_d = cache.pooled_d.T @ d_h_d
    d_pooled_q = d_h_q @ params.proj_query.T
    d_pooled_d = d_h_d @ params.proj_doc.T
    _, scatter = batch._pool_matrices(params.embed.shape[0])
    d_embed = np.asarray(scatter @ np.concatenate([d_pooled_q, d_pooled_d], axis=0))
    # tau = exp(log_tau), so the chain rule multiplies by tau itself.
    return Grads(
        embed=d_embed,
        proj_query=d_proj_q,
        proj_doc=d_proj_d,
        log_tau=d_tau * params.tau,
    )


def loss_and_grads(
    params: EncoderParams, batch: Batch, loss_kind: str = "h_infonce"
) -> tuple[float, Grads]:
    """Full forward and backward for one batch."""
    scores = similarity_matrix(params, batch)
    loss, d_scores, d_tau = batch_loss(scores, batch, params.tau, loss_kind)
    return loss, backward(params, batch, d_scores, d_tau)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "h_infonce"
    epochs: int = 1
    batch_groups: int = 8
    lr: float = 2e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_group_docs: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_groups < 1:
            raise ValueError(f"batch_groups must be >= 1, got {self.batch_groups}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.max_group_docs < 2:
            raise ValueError(f"max_group_docs must be >= 2, got {self.max_group_docs}")


@dataclass
class AdamState:
    """First and second moment accumulators plus the shared step counter."""

    step: int
    m_embed: np.ndarray
    v_embed: np.ndarray
    m_proj_query: np.ndarray
    v_proj_query: np.ndarray
    m_proj_doc: np.ndarray
    v_proj_doc: np.ndarray
    m_log_tau: float
    v_log_tau: float


def init_adam_state(params: EncoderParams) -> AdamState:
    return AdamState(
        step=0,
        m_embed=np.zeros_like(params.embed),
        v_embed=np.zeros_like(params.embed),
        m_proj_query=np.zeros_like(params.proj_query),
        v_proj_query=np.zeros_like(params.proj_query),
        m_proj_doc=np.zeros_like(params.proj_doc),
        v_proj_doc=np.zeros_like(params.proj_doc),
        m_log_tau=0.0,
        v_log_tau=0.0,
    )


def adam_step(
    params: EncoderParams, grads: Grads, state: AdamState, cfg: TrainConfig
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay applies to the matrices only; the temperature is a scale
    parameter and shrinking it toward zero would be meaningless.
    """
    for name in ("embed", "proj_query", "proj_doc"):
        if getattr(params, name).shape != getattr(grads, name).shape:
            raise ValueError(
                f"{name} gradient shape {getattr(grads, name).shape} does not match "
                f"parameter shape {getattr(params, name).shape}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t

    def update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(grad)
        step_dir = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        step_dir += cfg.weight_decay * param
        param -= cfg.lr * step_dir

    update(params.embed, grads.embed, state.m_embed, state.v_embed)
    update(params.proj_query, grads.proj_query, state.m_proj_query, state.v_proj_query)
    update(params.proj_doc, grads.proj_doc, state.m_proj_doc, state.v_proj_doc)

    state.m_log_tau = cfg.beta1 * state.m_log_tau + (1.0 - cfg.beta1) * grads.log_tau
    state.v_log_tau = cfg.beta2 * state.v_log_tau + (1.0 - cfg.beta2) * grads.log_tau**2
    step_dir = (state.m_log_tau / bc1) / (math.sqrt(state.v_log_tau / bc2) + cfg.eps)
    params.log_tau -= cfg.lr * step_dir


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    opt_state: AdamState
    # (step, summed loss, tau, loss per anchor)
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)


def train(
    groups: Sequence[TrainingGroup],
    docs_by_id: Mapping[int, VideoDoc],
    cfg: TrainConfig,
    params: EncoderParams | None = None,
    tokenizer: HashingTokenizer | None = None,
) -> TrainResult:
    """Seeded full training run. Groups without a tier >= 4 doc are dropped."""
    cfg.validate()
    usable = [g for g in groups if g.trainable]
    if not usable:
        raise ValueError("no trainable groups: every group lacks a tier >= 4 doc")
    if tokenizer is None:
        tokenizer = HashingTokenizer()
    if params is None:
        params = init_params(cfg.seed)
    state = init_adam_state(params)
    rng = np.random.default_rng(cfg.seed)
    curve: list[tuple[int, float, float, float]] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(order), cfg.batch_groups):
            chunk = [usable[i] for i in order[start : start + cfg.batch_groups]]
            batch = make_batch(chunk, docs_by_id, tokenizer, rng, cfg.max_group_docs)
            scores = similarity_matrix(params, batch)
            loss, d_scores, d_tau = batch_loss(scores, batch, params.tau, cfg.loss)
            grads = backward(params, batch, d_scores, d_tau)
            adam_step(params, grads, state, cfg)
            curve.append((state.step, loss, params.tau, loss / batch.n_docs))
    return TrainResult(params=params, opt_state=state, curve=curve)


def write_curve(path: str | Path, curve: Sequence[tuple[int, float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,tau,loss_per_anchor\n")
        for step, loss, tau, per_anchor in curve:
            fh.write(f"{step},{loss!r},{tau!r},{per_anchor!r}\n")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_STEP_STRUCT = struct.Struct("<q")
_SCALAR_STRUCT = struct.Struct("<d")


def save_checkpoint(path: str | Path, params: EncoderParams, state: AdamState) -> None:
    """Weights layout first, then step and moment tensors.

    Because the parameter block is a prefix, a checkpoint also loads as a
    plain weights file.
    """
    with open(path, "wb") as fh:
        _write_params(fh, params)
        fh.write(_STEP_STRUCT.pack(state.step))
        for tensor in (state.m_embed, state.m_proj_query, state.m_proj_doc):
            fh.write(np.ascontiguousarray(tensor, dtype=np.float64).tobytes(order="C"))
        fh.write(_SCALAR_STRUCT.pack(state.m_log_tau))
        for tensor in (state.v_embed, state.v_proj_query, state.v_proj_doc):
            fh.write(np.ascontiguousarray(tensor, dtype=np.float64).tobytes(order="C"))
        fh.write(_SCALAR_STRUCT.pack(state.v_log_tau))


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, AdamState]:
    with open(path, "rb") as fh:
        params = _read_params(fh)
        raw = fh.read(_STEP_STRUCT.size)
        if len(raw) != _STEP_STRUCT.size:
            raise ValueError("truncated checkpoint (missing step)")
        (step,) = _STEP_STRUCT.unpack(raw)

        def read_like(ref: np.ndarray) -> np.ndarray:
            buf = fh.read(ref.size * 8)
            if len(buf) != ref.size * 8:
                raise ValueError("truncated checkpoint (short moment tensor)")
            return np.frombuffer(buf, dtype="<f8").reshape(ref.shape).copy()

        def read_scalar() -> float:
            buf = fh.read(_SCALAR_STRUCT.size)
            if len(buf) != _SCALAR_STRUCT.size:
                raise ValueError("truncated checkpoint (short scalar)")
            return _SCALAR_STRUCT.unpack(buf)[0]

        m_embed = read_like(params.embed)
        m_pq = read_like(params.proj_query)
        m_pd = read_like(params.proj_doc)
        m_lt = read_scalar()
        v_embed = read_like(params.embed)
        v_pq = read_like(params.proj_query)
        v_pd = read_like(params.proj_doc)
        v_lt = read_scalar()
    state = AdamState(
        step=step,
        m_embed=m_embed,
        v_embed=v_embed,
        m_proj_query=m_pq,
        v_proj_query=v_pq,
        m_proj_doc=m_pd,
        v_proj_doc=v_pd,
        m_log_tau=m_lt,
        v_log_tau=v_lt,
    )
    return params, state


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------


class DualEncoder(BaseEstimator):
    """Scikit-learn style wrapper around the functional training loop."""

    def __init__(
        self,
        loss: str = "h_infonce",
        epochs: int = 1,
        batch_groups: int = 8,
        lr: float = 2e-5,
        weight_decay: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        max_group_docs: int = 32,
        seed: int = 0,
        vocab_size: int = VOCAB_SIZE,
        max_len: int = MAX_LEN,
        embed_dim: int = EMBED_DIM,
        out_dim: int = OUT_DIM,
        init_tau: float = INIT_TAU,
    ):
        self.loss = loss
        self.epochs = epochs
        self.batch_groups = batch_groups
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_group_docs = max_group_docs
        self.seed = seed
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.init_tau = init_tau

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            loss=self.loss,
            epochs=self.epochs,
            batch_groups=self.batch_groups,
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            max_group_docs=self.max_group_docs,
            seed=self.seed,
        )

    def fit(
        self,
        groups: Sequence[TrainingGroup],
        docs: Mapping[int, VideoDoc],
        init: EncoderParams | None = None,
    ) -> "DualEncoder":
        cfg = self._train_config()
        tokenizer = HashingTokenizer(vocab_size=self.vocab_size, max_len=self.max_len)
        if init is None:
            init = init_params(
                self.seed,
                vocab_size=self.vocab_size,
                embed_dim=self.embed_dim,
                out_dim=self.out_dim,
                init_tau=self.init_tau,
            )
        result = train(groups, docs, cfg, params=init.copy(), tokenizer=tokenizer)
        self.params_ = result.params
        self.opt_state_ = result.opt_state
        self.curve_ = result.curve
        self.tokenizer_ = tokenizer
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "This DualEncoder instance is not fitted yet. Call 'fit' first."
            )

    def transform(self, texts: Iterable[str]) -> np.ndarray:
        """Unit query embeddings, one row per input text."""
        from .encoder import encode_query

        self._check_fitted()
        rows = [encode_query(self.params_, self.tokenizer_.encode(t)) for t in texts]
        return np.vstack(rows) if rows else np.zeros((0, self.params_.proj_query.shape[1]))

    def encode_docs(self, docs: Iterable[VideoDoc]) -> np.ndarray:
        from .encoder import encode_doc

        self._check_fitted()
        rows = [encode_doc(self.params_, self.tokenizer_.encode(doc_text(d))) for d in docs]
        return np.vstack(rows) if rows else np.zeros((0, self.params_.proj_doc.shape[1]))
