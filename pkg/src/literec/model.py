"""The hierarchical recommender: item encoder -> sequence encoder -> projection head."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict

import numpy as np

from . import tensor as T
from .head import ProjectionHead
from .item_encoder import EmbeddingCache, ItemEncoder, ItemEncoderConfig, ItemTokens, precompute_all_embeddings
from .nn import Module
from .rec_encoder import DimAdapter, RecEncoder, RecEncoderConfig
from .tensor import Parameter, Tensor


class LiteRec(Module):
    """Scores the whole catalog for a batch of left-padded item histories.

    Item vectors come from one of three places, checked in order: a trainable
    item table (second-phase fine-tuning), a precomputed cache (inference),
    or a fresh pass of the item encoder over the distinct items in the batch.
    """

    def __init__(
        self,
        item_config: ItemEncoderConfig,
        rec_config: RecEncoderConfig,
        num_items: int,
        vocab_size: int,
        item_tokens: ItemTokens | None,
        seed: int = 0,
        external_items: np.ndarray | None = None,
    ):
        self.rng = np.random.default_rng(seed)
        self.item_config, self.rec_config = item_config, rec_config
        self.num_items = num_items
        self.item_tokens = item_tokens
        self.item_encoder = ItemEncoder(item_config, vocab_size, self.rng) if external_items is None else None
        self.external_items = external_items
        self.adapter = None
        if external_items is not None and external_items.shape[1] != rec_config.model_dim:
            self.adapter = DimAdapter(external_items.shape[1], rec_config.model_dim, self.rng)
        self.rec_encoder = RecEncoder(rec_config, self.rng)
        self.head = ProjectionHead(num_items, rec_config.model_dim, self.rng)
        self.item_table: Parameter | None = None
        self.cache: EmbeddingCache | None = None
        self.per_occurrence = False
        self.encode_counts: Counter = Counter()  # item index -> encoder passes

    @property
    def pad_index(self) -> int:
        return self.num_items

    def config_dict(self) -> dict:
        return {"item": asdict(self.item_config), "rec": asdict(self.rec_config), "num_items": self.num_items}

    def parameter_groups(self) -> dict[str, dict[str, Parameter]]:
        groups: dict[str, dict[str, Parameter]] = {}
        for name, p in self.named_parameters():
            group = name.split(".", 1)[0]
            groups.setdefault(group, {})[name] = p
        return groups

    # item vectors ---------------------------------------------------------

    def use_cache(self, cache: EmbeddingCache | None) -> None:
        self.cache = cache

    def build_cache(self, vocab=None) -> EmbeddingCache:
        from .item_encoder import encoder_fingerprint

        fp = encoder_fingerprint(self.item_encoder, vocab)
        return precompute_all_embeddings(self.item_encoder, self.item_tokens, fp)

    def enable_trainable_item_table(self, cache: EmbeddingCache | None = None) -> None:
        """Switch to fine-tuning cached vectors directly as parameters."""
        cache = cache or self.build_cache()
        self.item_table = Parameter(np.array(cache.matrix[: self.num_items], dtype=np.float32))

    def item_vectors(self, index: np.ndarray) -> Tensor:
        index = np.asarray(index, dtype=np.int64)
        if self.item_table is not None:
            return T.take_rows(self.item_table, index)
        if self.external_items is not None:
            vecs = T.Tensor(self.external_items[index].astype(self.head.weight.dtype))
            return self.adapter(vecs) if self.adapter is not None else vecs
        if self.cache is not None and not self.training:
            return T.Tensor(self.cache.matrix[index])
        tok = self.item_tokens
        self.encode_counts.update(index.tolist())
        return self.item_encoder(tok.ids[index], tok.mask[index])

    def sequence_inputs(self, inputs: np.ndarray, mask: np.ndarray) -> Tensor:
        """(B, T) item indices -> (B, T, d) item vectors, zeros at padding."""
        inputs = np.asarray(inputs, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        real = inputs[mask]
        if self.per_occurrence:
            uniq, inv = real, np.arange(real.size)
        else:
            uniq, inv = np.unique(real, return_inverse=True)
        vecs = self.item_vectors(uniq)
        d = vecs.shape[1]
        table = T.concat([vecs, T.Tensor(np.zeros((1, d), dtype=vecs.dtype))], axis=0)
        gather = np.full(inputs.shape, uniq.size, dtype=np.int64)
        gather[mask] = inv.reshape(-1)
        return T.take_rows(table, gather)

    # forward --------------------------------------------------------------

    def user_vectors(self, inputs: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.rec_encoder(self.sequence_inputs(inputs, mask), mask)

    def forward(self, inputs: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.head(self.user_vectors(inputs, mask))

    def score(self, inputs: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.forward(inputs, mask).data

    @property
    def rows_encoded(self) -> int:
        return self.item_encoder.rows_encoded if self.item_encoder is not None else 0
