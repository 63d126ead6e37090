"""Item encoder: item text -> one context-aware vector, plus the offline cache."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ChecksumError, ContractError, FormatError, VersionError
from .nn import Dropout, Embedding, EncoderStack, Module
from .tensor import Tensor
from .text import PAD, TokenizedText, Vocab, encode_item_context, token_table


@dataclass
class ItemEncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    max_item_text_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("layers", "heads", "model_dim", "ff_dim", "max_item_text_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")

    @classmethod
    def paper(cls) -> "ItemEncoderConfig":
        # T5-small encoder shape
        return cls(layers=6, heads=8, model_dim=512, ff_dim=2048, max_item_text_len=64)


@dataclass
class ItemTokens:
    """Fixed-width token matrix for the whole catalog (row = item index)."""

    ids: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_catalog(cls, catalog, vocab: Vocab, max_len: int) -> "ItemTokens":
        texts = [encode_item_context(it, vocab, max_len) for it in catalog.items]
        ids, mask = token_table(texts)
        return cls(ids, mask)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


class ItemEncoder(Module):
    """Token + learned position embeddings, pre-norm encoder, masked mean pool."""

    def __init__(self, config: ItemEncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.config = config
        d = config.model_dim
        self.tok = Embedding(vocab_size, d, rng)
        self.pos = Embedding(config.max_item_text_len, d, rng)
        self.drop = Dropout(config.dropout, rng)
        self.stack = EncoderStack(config.layers, d, config.heads, config.ff_dim, config.dropout, rng)
        self.rows_encoded = 0

    def forward(self, ids: np.ndarray, mask: np.ndarray, bucket_rows: int = 128) -> Tensor:
        """(N, L) right-padded token ids -> (N, d) item vectors.

        Rows are sorted by length and encoded in chunks of ``bucket_rows``,
        each trimmed to its longest row. Padded keys get zero attention
        weight, so this only skips work on padding.
        """
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        if ids.shape[1] > self.config.max_item_text_len:
            raise ContractError(f"item text of {ids.shape[1]} tokens exceeds max_item_text_len")
        self.rows_encoded += ids.shape[0]
        lengths = mask.sum(axis=1)
        if ids.shape[0] <= bucket_rows:
            width = max(int(lengths.max(initial=0)), 1)
            return self._encode(ids[:, :width], mask[:, :width])
        order = np.argsort(lengths, kind="stable")
        parts = []
        for lo in range(0, order.size, bucket_rows):
            rows = order[lo:lo + bucket_rows]
            width = max(int(lengths[rows].max()), 1)
            parts.append(self._encode(ids[rows, :width], mask[rows, :width]))
        return T.take_rows(T.concat(parts, axis=0), np.argsort(order, kind="stable"))

    def _encode(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        x = self.tok(ids) + T.take_rows(self.pos.weight, np.arange(ids.shape[1]))
        h = self.stack(self.drop(x), key_mask=mask)
        return T.mean_pool_masked(h, mask)

    def encode_item(self, tokens: TokenizedText) -> np.ndarray:
        """Embedding of one item, computed at the item's own length."""
        if not any(i != PAD for i in tokens.ids):
            raise ContractError("cannot encode an item with no tokens")
        ids, mask = token_table([tokens])
        return self.forward(ids, mask).data[0]


# ---------------------------------------------------------------------------
# cache

CACHE_MAGIC = b"LLRECEMB"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIQI32s")


def encoder_fingerprint(encoder: ItemEncoder, vocab: Vocab | None = None) -> bytes:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(encoder.config), sort_keys=True).encode())
    if vocab is not None:
        h.update("\n".join(vocab.tokens).encode("utf-8"))
    for name, p in encoder.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return h.digest()


@dataclass
class EmbeddingCache:
    """|I|+1 rows of item vectors; the last row is the all-zero pad row."""

    matrix: np.ndarray
    fingerprint: bytes

    def __post_init__(self):
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        if self.matrix.ndim != 2:
            raise ValueError("cache matrix must be 2-D")

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def lookup(self, index) -> np.ndarray:
        return self.matrix[np.asarray(index)]

    def save(self, path) -> None:
        rows, dim = self.matrix.shape
        with open(path, "wb") as f:
            f.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, rows, dim, self.fingerprint))
            f.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        blob = Path(path).read_bytes()
        if len(blob) < _CACHE_HEADER.size:
            raise FormatError(f"{path}: file too short for an embedding cache header")
        magic, version, rows, dim, fp = _CACHE_HEADER.unpack_from(blob)
        if magic != CACHE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise VersionError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
        body = blob[_CACHE_HEADER.size:]
        if len(body) != rows * dim * 4:
            raise ChecksumError(f"{path}: expected {rows * dim * 4} data bytes, found {len(body)}")
        matrix = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float32)
        return cls(matrix, fp)


def load_cache_if_fresh(path, fingerprint: bytes) -> EmbeddingCache | None:
    """Return the cache at ``path`` or None when missing or stale."""
    if not Path(path).exists():
        return None
    cache = EmbeddingCache.load(path)
    return cache if cache.fingerprint == fingerprint else None


def precompute_all_embeddings(
    encoder: ItemEncoder,
    tokens: ItemTokens,
    fingerprint: bytes | None = None,
) -> EmbeddingCache:
    """Encode every catalog item once (eval mode) and append the pad row.

    Items go through one at a time at their own length, the same shapes
    :meth:`ItemEncoder.encode_item` uses, so a cached row is bit-identical to
    a fresh encoding. Batched BLAS calls would differ in the last bits.
    """
    was_training = encoder.training
    encoder.eval()
    try:
        d = encoder.config.model_dim
        out = np.zeros((len(tokens) + 1, d), dtype=encoder.tok.weight.dtype)
        lengths = tokens.mask.sum(axis=1)
        for i, n in enumerate(lengths):
            n = max(int(n), 1)
            out[i] = encoder(tokens.ids[i:i + 1, :n], tokens.mask[i:i + 1, :n]).data[0]
    finally:
        encoder.train(was_training)
    return EmbeddingCache(out, fingerprint if fingerprint is not None else encoder_fingerprint(encoder))
