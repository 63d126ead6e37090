import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from literec.data import ItemRecord
from literec.item_encoder import ItemTokens
from literec.text import (
    BOS, EOS, PAD, SEP_TOKEN, UNK, TokenizedText, Vocab, build_vocab, encode_item_context, encode_item_id_tokens,
    token_table, tokenize_text,
)


class TestTokenize:
    @pytest.mark.parametrize("text, tokens", [
        ("Star Wars (1977)", ["star", "wars", "(", "1977", ")"]),
        ("Toy Story", ["toy", "story"]),
        ("", []),
        ("  Rock-n'Roll!  ", ["rock", "-", "n", "'", "roll", "!"]),
        ('Q&A: "x", y. [z]?', ["q", "&", "a", ":", '"', "x", '"', ",", "y", ".", "[", "z", "]", "?"]),
    ])
    def test_examples(self, text, tokens):
        assert tokenize_text(text) == tokens

    @given(st.text())
    def test_pure_and_lowercase(self, text):
        toks = tokenize_text(text)
        assert toks == tokenize_text(text)
        assert all(t == t.lower() and t.strip() == t and t for t in toks)


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab()
        assert [v.id(t) for t in v.tokens] == [PAD, UNK, BOS, EOS] == [0, 1, 2, 3]

    def test_frequency_order(self):
        v = build_vocab(["a b", "a"])
        assert v.tokens[4:] == ["a", "b"] and v.id("a") == 4

    def test_min_freq(self):
        v = build_vocab(["a b", "a"], min_freq=2)
        assert "b" not in v and v.id("b") == UNK

    def test_ties_are_lexicographic(self):
        assert build_vocab(["zeta alpha mid"]).tokens[4:] == ["alpha", "mid", "zeta"]

    def test_shuffled_corpus_gives_same_vocab(self):
        corpus = ["toy story", "star wars", "toy soldiers", "wars of the worlds"] * 3
        shuffled = corpus[:]
        random.Random(1).shuffle(shuffled)
        assert build_vocab(corpus) == build_vocab(shuffled)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_frozen_rejects_insertion(self):
        v = build_vocab(["a"])
        with pytest.raises(ValueError):
            v.add("new")

    def test_file_round_trip(self, tmp_path):
        v = build_vocab(["toy story", "star wars (1977)"])
        v.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt") == v

    @given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), min_size=1, max_size=20))
    def test_round_trip(self, words):
        v = build_vocab([" ".join(words)])
        assert v.decode(v.encode(words)) == words


class TestItemContext:
    vocab = build_vocab(["toy story | animation", "star wars"])

    def test_title_then_genre(self):
        item = ItemRecord("1", 0, "toy story", "animation")
        ids = encode_item_context(item, self.vocab, 10).ids
        assert self.vocab.decode(ids) == ["toy", "story", SEP_TOKEN, "animation"]

    def test_pipe_joined_genres(self):
        item = ItemRecord("1", 0, "Toy Story", "Animation|Story")
        assert self.vocab.decode(encode_item_context(item, self.vocab, 10).ids)[-2:] == ["animation", "story"]

    def test_all_unknown_falls_back_to_unk(self):
        assert encode_item_context(ItemRecord("9", 0, "qqq www", ""), self.vocab, 10).ids == (UNK,)

    def test_truncation(self):
        item = ItemRecord("1", 0, " ".join(["toy"] * 40), "")
        assert len(encode_item_context(item, self.vocab, 16).ids) == 16

    def test_requires_frozen_vocab(self):
        with pytest.raises(ValueError):
            encode_item_context(ItemRecord("1", 0, "toy", ""), Vocab(["toy"]), 4)

    def test_token_table_right_pads(self):
        ids, mask = token_table([TokenizedText((5, 6, 7)), TokenizedText((8,))])
        assert ids.tolist() == [[5, 6, 7], [8, PAD, PAD]]
        assert mask.tolist() == [[True, True, True], [True, False, False]]


class TestItemIdTokens:
    @pytest.mark.parametrize("n, pieces", [
        (1234, ["item", "_", "12", "34"]),
        (7, ["item", "_", "7"]),
        (123, ["item", "_", "1", "23"]),
        (0, ["item", "_", "0"]),
    ])
    def test_grouping(self, n, pieces):
        assert encode_item_id_tokens(n) == pieces

    def test_negative(self):
        with pytest.raises(ValueError):
            encode_item_id_tokens(-1)

    @given(st.integers(0, 10**8), st.integers(0, 10**8))
    def test_injective(self, a, b):
        if a != b:
            assert encode_item_id_tokens(a) != encode_item_id_tokens(b)

    @given(st.integers(0, 10**8))
    def test_digits_reassemble(self, n):
        assert int("".join(encode_item_id_tokens(n)[2:])) == n


def test_item_tokens_from_catalog():
    from literec.data import ItemCatalog

    catalog = ItemCatalog([ItemRecord("1", 0, "toy story", "animation"), ItemRecord("2", 1, "star wars", "")])
    vocab = build_vocab(["toy story | animation", "star wars"])
    tokens = ItemTokens.from_catalog(catalog, vocab, 8)
    assert len(tokens) == 2 and tokens.width == 4
    assert tokens.mask.sum(axis=1).tolist() == [4, 2]
