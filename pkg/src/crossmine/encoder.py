"""Two-tower text encoder: hashing tokenizer, forward pass, binary persistence.

Both towers share a token embedding table; each has its own projection.
Outputs are L2-normalized so similarity is a dot product in [-1, 1].
All math is float64 end to end.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text import split_tokens, stable_token_hash

VOCAB_SIZE = 32768
MAX_LEN = 128
EMBED_DIM = 64
OUT_DIM = 64
INIT_TAU = 0.05

_HEADER = struct.Struct("<qqqd")
_MAGIC = b"XMEN\x01\x00\x00\x00"


class HashingTokenizer:
    """Maps text to token ids by hashing, with no stored vocabulary.

    The hash is process-stable, so the same text always produces the same
    ids across runs and machines.
    """

    def __init__(self, vocab_size: int = VOCAB_SIZE, max_len: int = MAX_LEN):
        if vocab_size <= 0:
            raise ValueError(f"vocab_size must be > 0, got {vocab_size}")
        if max_len <= 0:
            raise ValueError(f"max_len must be > 0, got {max_len}")
        self.vocab_size = vocab_size
        self.max_len = max_len

    def encode(self, text: str) -> np.ndarray:
        tokens = split_tokens(text)[: self.max_len]
        ids = [stable_token_hash(t) % self.vocab_size for t in tokens]
        return np.asarray(ids, dtype=np.int64)


@dataclass
class EncoderParams:
    """Learnable state: shared embedding, per-tower projections, temperature.

    log_tau is the log of the softmax temperature; storing the log keeps the
    temperature positive under unconstrained updates.
    """

    embed: np.ndarray      # (vocab_size, embed_dim)
    proj_query: np.ndarray # (embed_dim, out_dim)
    proj_doc: np.ndarray   # (embed_dim, out_dim)
    log_tau: float

    def __post_init__(self):
        self.embed = np.ascontiguousarray(self.embed, dtype=np.float64)
        self.proj_query = np.ascontiguousarray(self.proj_query, dtype=np.float64)
        self.proj_doc = np.ascontiguousarray(self.proj_doc, dtype=np.float64)
        self.log_tau = float(self.log_tau)
        if self.embed.ndim != 2:
            raise ValueError("embed must be 2-D")
        d_e = self.embed.shape[1]
        for name, mat in (("proj_query", self.proj_query), ("proj_doc", self.proj_doc)):
            if mat.shape[0] != d_e:
                raise ValueError(f"{name} rows ({mat.shape[0]}) must match embed_dim ({d_e})")
        if self.proj_query.shape != self.proj_doc.shape:
            raise ValueError("projection shapes must match")

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            embed=self.embed.copy(),
            proj_query=self.proj_query.copy(),
            proj_doc=self.proj_doc.copy(),
            log_tau=self.log_tau,
        )


def init_params(
    seed: int,
    vocab_size: int = VOCAB_SIZE,
    embed_dim: int = EMBED_DIM,
    out_dim: int = OUT_DIM,
    init_tau: float = INIT_TAU,
) -> EncoderParams:
    """Uniform(-1, 1)/sqrt(embed_dim) init for all matrices, seeded."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(embed_dim)
    return EncoderParams(
        embed=rng.uniform(-1.0, 1.0, size=(vocab_size, embed_dim)) * scale,
        proj_query=rng.uniform(-1.0, 1.0, size=(embed_dim, out_dim)) * scale,
        proj_doc=rng.uniform(-1.0, 1.0, size=(embed_dim, out_dim)) * scale,
        log_tau=float(np.log(init_tau)),
    )


def _encode(params: EncoderParams, token_ids: np.ndarray, proj: np.ndarray) -> np.ndarray:
    out_dim = proj.shape[1]
    if token_ids.size == 0:
        return _degenerate(out_dim)
    pooled = params.embed[token_ids].mean(axis=0)
    h = pooled @ proj
    norm = np.linalg.norm(h)
    if norm == 0.0:
        return _degenerate(out_dim)
    return h / norm


def _degenerate(out_dim: int) -> np.ndarray:
    # Fixed unit vector for empty or zero-norm inputs; carries no gradient.
    v = np.zeros(out_dim, dtype=np.float64)
    v[0] = 1.0
    return v


def encode_query(params: EncoderParams, token_ids: np.ndarray) -> np.ndarray:
    return _encode(params, token_ids, params.proj_query)


def encode_doc(params: EncoderParams, token_ids: np.ndarray) -> np.ndarray:
    return _encode(params, token_ids, params.proj_doc)


def similarity(query_vec: np.ndarray, doc_vec: np.ndarray) -> float:
    """Dot product of unit vectors, clipped to [-1, 1] against rounding spill."""
    return float(np.clip(np.dot(query_vec, doc_vec), -1.0, 1.0))


def save_params(path: str | Path, params: EncoderParams) -> None:
    """Fixed binary layout: magic, dims + log_tau header, then row-major matrices."""
    with open(path, "wb") as fh:
        _write_params(fh, params)


def _write_params(fh, params: EncoderParams) -> None:
    vocab_size, embed_dim = params.embed.shape
    out_dim = params.proj_query.shape[1]
    fh.write(_MAGIC)
    fh.write(_HEADER.pack(vocab_size, embed_dim, out_dim, params.log_tau))
    fh.write(params.embed.tobytes(order="C"))
    fh.write(params.proj_query.tobytes(order="C"))
    fh.write(params.proj_doc.tobytes(order="C"))


def load_params(path: str | Path) -> EncoderParams:
    """Read the parameter prefix of a weights or checkpoint file."""
    with open(path, "rb") as fh:
        return _read_params(fh)


def _read_params(fh) -> EncoderParams:
    magic = fh.read(len(_MAGIC))
    if magic != _MAGIC:
        raise ValueError("not an encoder weights file (bad magic)")
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ValueError("truncated weights file (short header)")
    vocab_size, embed_dim, out_dim, log_tau = _HEADER.unpack(header)
    if vocab_size <= 0 or embed_dim <= 0 or out_dim <= 0:
        raise ValueError(f"invalid dims in header: {(vocab_size, embed_dim, out_dim)}")
    embed = _read_matrix(fh, vocab_size, embed_dim)
    proj_query = _read_matrix(fh, embed_dim, out_dim)
    proj_doc = _read_matrix(fh, embed_dim, out_dim)
    return EncoderParams(embed=embed, proj_query=proj_query, proj_doc=proj_doc, log_tau=log_tau)


def _read_matrix(fh, rows: int, cols: int) -> np.ndarray:
    n_bytes = rows * cols * 8
    buf = fh.read(n_bytes)
    if len(buf) != n_bytes:
        raise ValueError(f"truncated weights file (expected {n_bytes} matrix bytes)")
    return np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy()
