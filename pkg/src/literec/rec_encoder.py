"""Sequence encoder over item vectors, mean-pooled into a user vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Dropout, Embedding, EncoderStack, Linear, Module
from .tensor import Parameter, Tensor


@dataclass
class RecEncoderConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    max_seq_len: int = 21
    dropout: float = 0.1

    def __post_init__(self):
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        for name in ("layers", "heads", "model_dim", "ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def paper(cls) -> "RecEncoderConfig":
        return cls(layers=6, heads=8, model_dim=512, ff_dim=2048)


class RecEncoder(Module):
    """Bidirectional encoder; positions are right-aligned so the most recent
    item always sits at the last position slot."""

    def __init__(self, config: RecEncoderConfig, rng: np.random.Generator):
        self.config = config
        self.pos = Embedding(config.max_seq_len, config.model_dim, rng)
        self.drop = Dropout(config.dropout, rng)
        self.stack = EncoderStack(config.layers, config.model_dim, config.heads, config.ff_dim, config.dropout, rng)

    def forward(self, item_vecs: Tensor, mask: np.ndarray) -> Tensor:
        b, t, d = item_vecs.shape
        if t > self.config.max_seq_len:
            raise ContractError(f"sequence length {t} exceeds max_seq_len={self.config.max_seq_len}")
        if d != self.config.model_dim:
            raise DimensionError(f"item vectors have dim {d}, encoder expects {self.config.model_dim}")
        positions = np.arange(self.config.max_seq_len - t, self.config.max_seq_len)
        x = item_vecs + T.take_rows(self.pos.weight, positions)
        h = self.stack(self.drop(x), key_mask=mask)
        return T.mean_pool_masked(h, mask)


def encode_sequence(encoder: RecEncoder, item_vecs: Tensor, mask) -> Tensor:
    return encoder(T.as_tensor(item_vecs), np.asarray(mask, dtype=bool))


class DimAdapter(Module):
    """Single affine map from an external embedding width to the model width."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, identity: bool = False):
        self.d_in, self.d_out = d_in, d_out
        self.proj = Linear(d_in, d_out, rng)
        if identity:
            self.proj.weight = Parameter(np.eye(d_in, d_out, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return adapt_dim(x, self)


def adapt_dim(x, adapter: DimAdapter) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != adapter.d_in:
        raise DimensionError(f"adapter expects width {adapter.d_in}, got {x.shape[-1]}")
    if x.ndim == 1:
        return (x.reshape(1, -1) @ adapter.proj.weight + adapter.proj.bias).reshape(adapter.d_out)
    return x @ adapter.proj.weight + adapter.proj.bias
