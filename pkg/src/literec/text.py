"""Word-level tokenizer, vocabulary and item-ID token pieces."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
SEP_TOKEN = "|"

_PUNCT = "()[]:,.!?'\"&-"
_PUNCT_RE = re.compile("([" + re.escape(_PUNCT) + "])")


def tokenize_text(text: str) -> list[str]:
    """Lowercase, split on whitespace, and break out punctuation as tokens.

    >>> tokenize_text("Star Wars (1977)")
    ['star', 'wars', '(', '1977', ')']
    """
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


class Vocab:
    """Token <-> id bijection with four reserved ids (pad, unk, bos, eos)."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        self.frozen = False
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._stoi:
            return self._stoi[token]
        if self.frozen:
            raise ValueError(f"vocabulary is frozen; cannot add {token!r}")
        self._stoi[token] = len(self._itos)
        self._itos.append(token)
        return self._stoi[token]

    def freeze(self) -> "Vocab":
        self.frozen = True
        return self

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines).freeze()


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Frozen vocabulary of tokens seen at least ``min_freq`` times.

    Ordered by descending frequency, ties broken lexicographically.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        counts.update(tokenize_text(text))
        n_docs += 1
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept).freeze()


@dataclass(frozen=True)
class TokenizedText:
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return sum(1 for i in self.ids if i != PAD)


def item_context_tokens(title: str, genre: str) -> list[str]:
    """Title tokens, a separator, then genre tokens (genres may be '|'-joined)."""
    toks = tokenize_text(title)
    genre_toks = tokenize_text(genre.replace("|", " "))
    if genre_toks:
        toks = toks + [SEP_TOKEN] + genre_toks if toks else genre_toks
    return toks


def item_context_text(title: str, genre: str) -> str:
    return " ".join(item_context_tokens(title, genre))


def encode_item_context(item, vocab: Vocab, max_len: int) -> TokenizedText:
    """Token ids for an item's title and genre, truncated to ``max_len``."""
    if not vocab.frozen:
        raise ValueError("encode_item_context requires a frozen vocabulary")
    ids = vocab.encode(item_context_tokens(item.title, item.genre))[:max_len]
    if all(i == UNK for i in ids):
        return TokenizedText((UNK,))
    return TokenizedText(tuple(ids))


def encode_item_id_tokens(item_number: int) -> list[str]:
    """``1234 -> ['item', '_', '12', '34']``; odd lengths lead with one digit."""
    if item_number < 0:
        raise ValueError("item number must be non-negative")
    digits = str(item_number)
    head = len(digits) % 2
    pieces = [digits[:head]] if head else []
    pieces += [digits[i:i + 2] for i in range(head, len(digits), 2)]
    return ["item", "_"] + pieces


def token_table(token_lists: list[TokenizedText], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad tokenized texts into an id matrix and a boolean mask."""
    width = width or max(len(t.ids) for t in token_lists)
    ids = np.full((len(token_lists), width), PAD, dtype=np.int64)
    for r, t in enumerate(token_lists):
        ids[r, :len(t.ids)] = t.ids[:width]
    return ids, ids != PAD
