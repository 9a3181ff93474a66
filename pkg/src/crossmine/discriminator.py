"""Text-pair relevance scoring used to admit or reject mined candidates.

The default scorer is an IDF-weighted bag-of-words cosine fitted on the doc
corpus. An encoder-backed variant scores with a trained dual encoder instead,
mapped to the same [0, 1] range, so mining thresholds keep their meaning.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Mapping

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .corpus import VideoDoc, doc_text
from .text import split_tokens


class RelevanceScorer(BaseEstimator):
    """IDF-weighted cosine similarity between two texts, in [0, 1].

    idf(t) = ln((smoothing + n_docs) / (smoothing + df(t))) + 1, so unseen
    tokens get the largest weight rather than vanishing.
    """

    def __init__(self, smoothing: float = 1.0):
        self.smoothing = smoothing

    def fit(self, docs: Iterable[VideoDoc], y=None) -> "RelevanceScorer":
        if self.smoothing <= 0:
            raise ValueError(f"smoothing must be > 0, got {self.smoothing}")
        df: Counter[str] = Counter()
        n_docs = 0
        for doc in docs:
            n_docs += 1
            df.update(set(split_tokens(doc_text(doc))))
        if n_docs == 0:
            raise ValueError("cannot fit on an empty corpus")
        self.n_docs_ = n_docs
        self.idf_ = {
            token: math.log((self.smoothing + n_docs) / (self.smoothing + count)) + 1.0
            for token, count in df.items()
        }
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "idf_"):
            raise NotFittedError(
                "This RelevanceScorer instance is not fitted yet. "
                "Call 'fit' with the document corpus first."
            )

    def _idf(self, token: str) -> float:
        # df = 0 for tokens never seen at fit time.
        idf = self.idf_.get(token)
        if idf is None:
            idf = math.log((self.smoothing + self.n_docs_) / self.smoothing) + 1.0
        return idf

    def _vector(self, text: str) -> dict[str, float]:
        counts = Counter(split_tokens(text))
        return {token: tf * self._idf(token) for token, tf in counts.items()}

    def score(self, text_a: str, text_b: str) -> float:
        """Cosine of the IDF-weighted term-frequency vectors. Empty side scores 0."""
        self._check_fitted()
        va = self._vector(text_a)
        vb = self._vector(text_b)
        if not va or not vb:
            return 0.0
        dot = sum(weight * vb[token] for token, weight in va.items() if token in vb)
        if dot == 0.0:
            return 0.0
        norm_a = math.sqrt(sum(w * w for w in va.values()))
        norm_b = math.sqrt(sum(w * w for w in vb.values()))
        return dot / (norm_a * norm_b)

    def is_relevant(self, query: str, doc: VideoDoc, alpha: float) -> bool:
        """Strict threshold: a candidate is admitted only when score > alpha."""
        return self.score(query, doc_text(doc)) > alpha


class EncoderRelevanceScorer:
    """Scores pairs with a trained dual encoder, rescaled to [0, 1].

    Embeddings are unit-norm, so (dot + 1) / 2 maps cosine to the threshold
    range the mining config expects. Built lazily to avoid a hard import
    cycle with the encoder module.
    """

    def __init__(self, params, tokenizer=None):
        from .encoder import HashingTokenizer

        self._params = params
        self._tokenizer = tokenizer if tokenizer is not None else HashingTokenizer(
            vocab_size=params.embed.shape[0]
        )

    def score(self, text_a: str, text_b: str) -> float:
        from .encoder import encode_doc, encode_query, similarity

        q = encode_query(self._params, self._tokenizer.encode(text_a))
        d = encode_doc(self._params, self._tokenizer.encode(text_b))
        return (similarity(q, d) + 1.0) / 2.0

    def is_relevant(self, query: str, doc: VideoDoc, alpha: float) -> bool:
        return self.score(query, doc_text(doc)) > alpha


def score_matrix(scorer, queries: list[str], texts: list[str]):
    """Convenience: pairwise score table as nested lists (rows follow queries)."""
    return [[scorer.score(q, t) for t in texts] for q in queries]


def text_of(docs: Mapping[int, VideoDoc], doc_id: int) -> str:
    """Canonical text for a doc id, erroring on unknown ids."""
    if doc_id not in docs:
        raise KeyError(f"unknown doc_id {doc_id}")
    return doc_text(docs[doc_id])
