"""Tokenizer, forward pass, and binary weight persistence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmine.encoder import (
    EMBED_DIM,
    INIT_TAU,
    MAX_LEN,
    OUT_DIM,
    VOCAB_SIZE,
    EncoderParams,
    HashingTokenizer,
    encode_doc,
    encode_query,
    init_params,
    load_params,
    save_params,
    similarity,
)
from crossmine.text import split_tokens


class TestSplitTokens:
    def test_empty_and_whitespace_only(self):
        assert split_tokens("") == []
        assert split_tokens("  \t\n ") == []

    def test_lowercases_and_strips_punctuation(self):
        assert split_tokens("Red SHOES, size-9!") == ["red", "shoes", "size", "9"]

    def test_underscore_is_a_separator(self):
        assert split_tokens("intent0_0") == ["intent0", "0"]

    def test_unicode_words_survive(self):
        assert split_tokens("盆栽 bonsai") == ["盆栽", "bonsai"]


class TestHashingTokenizer:
    def test_empty_text_gives_empty_ids(self):
        ids = HashingTokenizer().encode("")
        assert ids.dtype == np.int64 and ids.size == 0

    def test_case_folding_merges_ids(self):
        tok = HashingTokenizer()
        assert np.array_equal(tok.encode("Ficus"), tok.encode("ficus"))

    def test_output_truncated_to_max_len(self):
        text = " ".join(f"w{i}" for i in range(200))
        assert HashingTokenizer().encode(text).shape == (MAX_LEN,)
        assert HashingTokenizer(max_len=5).encode(text).shape == (5,)

    def test_ids_stay_below_vocab(self):
        tok = HashingTokenizer(vocab_size=17)
        ids = tok.encode("one two three four five six seven")
        assert ids.min() >= 0 and ids.max() < 17

    def test_instances_agree(self):
        a = HashingTokenizer().encode("growing a ficus bonsai")
        b = HashingTokenizer().encode("growing a ficus bonsai")
        assert np.array_equal(a, b)

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError, match="vocab_size"):
            HashingTokenizer(vocab_size=0)
        with pytest.raises(ValueError, match="max_len"):
            HashingTokenizer(max_len=0)


class TestInitParams:
    def test_default_shapes_and_tau(self):
        params = init_params(0)
        assert params.embed.shape == (VOCAB_SIZE, EMBED_DIM)
        assert params.proj_query.shape == (EMBED_DIM, OUT_DIM)
        assert params.proj_doc.shape == (EMBED_DIM, OUT_DIM)
        assert params.tau == pytest.approx(INIT_TAU, abs=1e-12)
        assert params.log_tau == pytest.approx(math.log(0.05), abs=1e-12)

    def test_same_seed_reproduces_same_weights(self):
        a = init_params(7, vocab_size=32, embed_dim=4, out_dim=4)
        b = init_params(7, vocab_size=32, embed_dim=4, out_dim=4)
        assert np.array_equal(a.embed, b.embed)
        assert np.array_equal(a.proj_query, b.proj_query)

    def test_different_seeds_diverge(self):
        a = init_params(7, vocab_size=32, embed_dim=4, out_dim=4)
        b = init_params(8, vocab_size=32, embed_dim=4, out_dim=4)
        assert not np.array_equal(a.embed, b.embed)

    def test_scale_bound(self):
        params = init_params(0, vocab_size=64, embed_dim=16, out_dim=8)
        assert np.abs(params.embed).max() <= 1.0 / 4.0


class TestEncoderParamsValidation:
    def test_projection_rows_must_match_embed_dim(self):
        with pytest.raises(ValueError, match="proj_query"):
            EncoderParams(
                embed=np.zeros((4, 3)),
                proj_query=np.zeros((2, 5)),
                proj_doc=np.zeros((2, 5)),
                log_tau=0.0,
            )

    def test_towers_must_share_output_shape(self):
        with pytest.raises(ValueError, match="projection shapes"):
            EncoderParams(
                embed=np.zeros((4, 3)),
                proj_query=np.zeros((3, 5)),
                proj_doc=np.zeros((3, 6)),
                log_tau=0.0,
            )

    def test_copy_is_deep_for_matrices(self):
        params = init_params(0, vocab_size=8, embed_dim=2, out_dim=2)
        dup = params.copy()
        dup.embed[0, 0] += 1.0
        assert params.embed[0, 0] != dup.embed[0, 0]


class TestEncode:
    def test_empty_ids_give_fixed_basis_vector(self, small_params):
        vec = encode_query(small_params, np.asarray([], dtype=np.int64))
        expected = np.zeros(8)
        expected[0] = 1.0
        assert np.array_equal(vec, expected)
        assert np.array_equal(encode_doc(small_params, np.asarray([], dtype=np.int64)), expected)

    def test_outputs_are_unit_norm(self, small_params, rng):
        for _ in range(20):
            ids = rng.integers(0, 64, size=int(rng.integers(1, 12)))
            for vec in (encode_query(small_params, ids), encode_doc(small_params, ids)):
                assert abs(np.linalg.norm(vec) - 1.0) <= 1e-9

    def test_repeated_token_mean_pool_matches_single(self, small_params):
        one = encode_query(small_params, np.asarray([3], dtype=np.int64))
        two = encode_query(small_params, np.asarray([3, 3], dtype=np.int64))
        assert np.array_equal(one, two)

    def test_towers_differ_on_same_input(self, small_params):
        ids = np.asarray([1, 2], dtype=np.int64)
        assert not np.array_equal(encode_query(small_params, ids), encode_doc(small_params, ids))

    def test_zero_embedding_rows_fall_back_to_basis_vector(self):
        params = EncoderParams(
            embed=np.zeros((4, 3)),
            proj_query=np.ones((3, 5)),
            proj_doc=np.ones((3, 5)),
            log_tau=0.0,
        )
        vec = encode_query(params, np.asarray([1, 2], dtype=np.int64))
        assert vec[0] == 1.0 and np.all(vec[1:] == 0.0)


class TestSimilarity:
    def test_identical_vectors_score_one(self):
        v = np.zeros(4)
        v[2] = 1.0
        assert similarity(v, v) == 1.0

    def test_opposite_vectors_score_minus_one(self):
        v = np.zeros(4)
        v[2] = 1.0
        assert similarity(v, -v) == -1.0

    def test_orthogonal_vectors_score_zero(self):
        a = np.zeros(4)
        b = np.zeros(4)
        a[0] = 1.0
        b[1] = 1.0
        assert similarity(a, b) == 0.0

    def test_rounding_spill_is_clipped(self):
        v = np.full(3, 1.0 + 1e-9)
        assert similarity(v, v) <= 1.0


class TestPersistence:
    def test_round_trip_is_exact(self, tmp_path, small_params):
        path = tmp_path / "weights.bin"
        save_params(path, small_params)
        loaded = load_params(path)
        assert np.array_equal(loaded.embed, small_params.embed)
        assert np.array_equal(loaded.proj_query, small_params.proj_query)
        assert np.array_equal(loaded.proj_doc, small_params.proj_doc)
        assert loaded.log_tau == small_params.log_tau

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "weights.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            load_params(path)

    def test_truncated_file_rejected(self, tmp_path, small_params):
        path = tmp_path / "weights.bin"
        save_params(path, small_params)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 16])
        with pytest.raises(ValueError, match="truncated"):
            load_params(path)

    def test_save_is_deterministic(self, tmp_path, small_params):
        a = tmp_path / "a.bin"
        b = tmp_path / "b.bin"
        save_params(a, small_params)
        save_params(b, small_params)
        assert a.read_bytes() == b.read_bytes()


@given(text=st.text(max_size=40))
@settings(max_examples=80, deadline=None)
def test_tokenizer_is_pure(text):
    tok = HashingTokenizer(vocab_size=100)
    first = tok.encode(text)
    second = tok.encode(text)
    assert np.array_equal(first, second)
    assert first.size <= tok.max_len
    if first.size:
        assert first.max() < 100
