import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from literec import tensor as T
from literec.bench import count_redundant_encodings
from literec.errors import ChecksumError, ContractError, FormatError, VersionError
from literec.item_encoder import (
    CACHE_MAGIC, EmbeddingCache, ItemEncoder, ItemEncoderConfig, ItemTokens, encoder_fingerprint,
    load_cache_if_fresh, precompute_all_embeddings,
)
from literec.tensor import Tape
from literec.text import PAD, TokenizedText, build_vocab

from gradient_suite import _randomize, tiny_lite

SMALL = ItemEncoderConfig(layers=2, heads=2, model_dim=8, ff_dim=16, max_item_text_len=10, dropout=0.0)


def make_encoder(seed=0, vocab=30, spread=True):
    rng = np.random.default_rng(seed)
    enc = ItemEncoder(SMALL, vocab, rng)
    if spread:
        _randomize(enc, rng)
    return enc.eval()


def hidden_states(enc, ids, mask):
    x = enc.tok(ids) + T.take_rows(enc.pos.weight, np.arange(ids.shape[1]))
    return enc.stack(x, key_mask=mask).data


def random_tokens(rng, n, width=10, vocab=30):
    lengths = rng.integers(1, width + 1, n)
    mask = np.arange(width)[None, :] < lengths[:, None]
    ids = np.where(mask, rng.integers(4, vocab, (n, width)), PAD)
    return ItemTokens(ids, mask)


class TestConfig:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            ItemEncoderConfig(model_dim=10, heads=4)

    @pytest.mark.parametrize("field", ["layers", "heads", "model_dim", "ff_dim", "max_item_text_len"])
    def test_dims_positive(self, field):
        with pytest.raises(ValueError):
            ItemEncoderConfig(**{field: 0})

    def test_paper_scale_available(self):
        cfg = ItemEncoderConfig.paper()
        assert (cfg.layers, cfg.heads, cfg.model_dim) == (6, 8, 512)


class TestEncodeItem:
    def test_single_token_is_final_hidden_state(self):
        enc = make_encoder()
        out = enc.encode_item(TokenizedText((7,)))
        h = hidden_states(enc, np.array([[7]]), np.array([[True]]))
        np.testing.assert_array_equal(out, h[0, 0])

    def test_masked_mean_matches_brute_force(self):
        enc = make_encoder()
        ids = np.array([[5, 9, 11, 0, 0]])
        mask = ids != PAD
        h = hidden_states(enc, ids, mask)
        np.testing.assert_allclose(enc(ids, mask).data[0], h[0, :3].mean(axis=0), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.permutations([4, 9, 13, 21, 27]), st.integers(1, 4))
    def test_pad_tail_contents_ignored(self, junk, n_real):
        enc = make_encoder()
        ids = np.array([[5, 6, 7, 8, 9] + list(junk)])
        mask = np.arange(10)[None, :] < n_real
        clean = np.where(mask, ids, PAD)
        np.testing.assert_array_equal(enc._encode(ids, mask).data, enc._encode(clean, mask).data)

    def test_identical_tokens_identical_embeddings(self):
        enc = make_encoder()
        ids = np.array([[5, 6, 7], [5, 6, 7]])
        out = enc(ids, np.ones_like(ids, dtype=bool)).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_empty_item_rejected(self):
        with pytest.raises(ContractError):
            make_encoder().encode_item(TokenizedText((PAD, PAD)))

    def test_bucketed_batches_match_single_pass(self):
        enc = make_encoder()
        tok = random_tokens(np.random.default_rng(3), 50)
        whole = enc._encode(tok.ids, tok.mask).data
        np.testing.assert_allclose(enc(tok.ids, tok.mask, bucket_rows=8).data, whole, atol=1e-10)

    def test_bucketing_keeps_row_order(self):
        enc = make_encoder()
        tok = random_tokens(np.random.default_rng(4), 20)
        out = enc(tok.ids, tok.mask, bucket_rows=4).data
        for i in range(20):
            n = int(tok.mask[i].sum())
            np.testing.assert_allclose(out[i], enc.encode_item(TokenizedText(tuple(tok.ids[i, :n]))), atol=1e-10)

    def test_attention_rows_are_distributions(self):
        enc = make_encoder()
        ids = np.array([[5, 6, 7, 0], [8, 0, 0, 0]])
        mask = ids != PAD
        enc._encode(ids, mask)
        for layer in enc.stack.layers:
            w = layer.attn.last_weights
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(w[0, :, :, 3] == 0) and np.all(w[1, :, :, 1:] == 0)


class TestGradientFlow:
    def test_item_encoder_receives_gradient(self):
        model = tiny_lite(np.random.default_rng(0))
        model.train()
        inputs = np.array([[0, 1, 2, 3, 4]])
        with Tape() as tape:
            loss = T.cross_entropy_logits(model(inputs, inputs >= 0), np.array([5]))
        tape.backward(loss)
        grads = [p.grad for _, p in model.item_encoder.named_parameters()]
        assert any(g is not None and np.abs(g).sum() > 0 for g in grads)


class TestCache:
    def test_three_items_four_rows(self):
        enc = make_encoder()
        cache = precompute_all_embeddings(enc, random_tokens(np.random.default_rng(0), 3))
        assert cache.matrix.shape == (4, 8) and cache.num_items == 3
        assert np.all(cache.matrix[-1] == 0)

    def test_rows_equal_fresh_encoding_bitwise(self):
        enc = make_encoder()
        tok = random_tokens(np.random.default_rng(1), 40)
        cache = precompute_all_embeddings(enc, tok)
        for i in range(40):
            n = int(tok.mask[i].sum())
            fresh = enc.encode_item(TokenizedText(tuple(int(t) for t in tok.ids[i, :n])))
            assert np.array_equal(cache.lookup(i), fresh)

    def test_precompute_restores_training_mode(self):
        enc = make_encoder().train()
        precompute_all_embeddings(enc, random_tokens(np.random.default_rng(0), 3))
        assert enc.training

    def test_save_load_round_trip(self, tmp_path):
        enc = make_encoder(spread=False)
        cache = precompute_all_embeddings(enc, random_tokens(np.random.default_rng(0), 5))
        cache.save(tmp_path / "c.bin")
        again = EmbeddingCache.load(tmp_path / "c.bin")
        assert again.fingerprint == cache.fingerprint
        np.testing.assert_array_equal(again.matrix, cache.matrix)

    def test_header_layout(self, tmp_path):
        EmbeddingCache(np.ones((3, 2), np.float32), b"f" * 32).save(tmp_path / "c.bin")
        blob = (tmp_path / "c.bin").read_bytes()
        assert struct.unpack_from("<8sIQI32s", blob) == (CACHE_MAGIC, 1, 3, 2, b"f" * 32)
        assert len(blob) == 8 + 4 + 8 + 4 + 32 + 3 * 2 * 4

    @pytest.mark.parametrize("mutate, error", [
        (lambda b: b"XXXXXXXX" + b[8:], FormatError),
        (lambda b: b[:8] + struct.pack("<I", 9) + b[12:], VersionError),
        (lambda b: b[:-4], ChecksumError),
        (lambda b: b[:20], FormatError),
    ])
    def test_corrupt_files(self, tmp_path, mutate, error):
        path = tmp_path / "c.bin"
        EmbeddingCache(np.ones((3, 2), np.float32), b"f" * 32).save(path)
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(error):
            EmbeddingCache.load(path)

    def test_stale_fingerprint_is_a_miss(self, tmp_path):
        enc = make_encoder(spread=False)
        path = tmp_path / "c.bin"
        precompute_all_embeddings(enc, random_tokens(np.random.default_rng(0), 3)).save(path)
        assert load_cache_if_fresh(path, encoder_fingerprint(enc)) is not None
        enc.tok.weight.data[4, 0] += 1.0
        assert load_cache_if_fresh(path, encoder_fingerprint(enc)) is None
        assert load_cache_if_fresh(tmp_path / "missing.bin", encoder_fingerprint(enc)) is None

    def test_fingerprint_covers_vocab(self):
        enc = make_encoder(spread=False)
        a = encoder_fingerprint(enc, build_vocab(["toy story"]))
        b = encoder_fingerprint(enc, build_vocab(["star wars"]))
        assert a != b and len(a) == 32

    def test_bad_fingerprint_length(self):
        with pytest.raises(ValueError):
            EmbeddingCache(np.zeros((2, 2)), b"short")


class TestRedundancy:
    def test_frequent_item_encoded_once_with_cache(self):
        model = tiny_lite(np.random.default_rng(0), num_items=7)
        rng = np.random.default_rng(1)
        histories = [[3] + rng.integers(0, 7, 3).tolist() for _ in range(539)]
        batches = [histories[i:i + 32] for i in range(0, 539, 32)]
        cached = count_redundant_encodings(model, batches, cached=True)
        fresh = count_redundant_encodings(model, batches, cached=False)
        occurrences = sum(h.count(3) for h in histories)
        assert occurrences >= 539
        assert cached.per_item_calls[3] == 1 and fresh.per_item_calls[3] == occurrences
        assert cached.ratio == 1.0 and cached.encoder_calls == cached.distinct_items
        assert fresh.encoder_calls == fresh.occurrences == 4 * 539
