"""Bias-free item projection head and deterministic top-k selection."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Module
from .tensor import Parameter, Tensor


class ProjectionHead(Module):
    """``logits = W h_u`` with ``W`` of shape (num_items, d) and no bias."""

    def __init__(self, num_items: int, d: int, rng: np.random.Generator):
        self.weight = Parameter((rng.standard_normal((num_items, d)) * 0.02).astype(np.float32))

    @property
    def num_items(self) -> int:
        return self.weight.shape[0]

    def forward(self, h_u: Tensor) -> Tensor:
        return score_items(h_u, self)


def score_items(h_u, head: ProjectionHead) -> Tensor:
    h_u = T.as_tensor(h_u)
    d = head.weight.shape[1]
    if h_u.shape[-1] != d:
        raise DimensionError(f"user vector dim {h_u.shape[-1]} != head dim {d}")
    if h_u.ndim == 1:
        return (h_u.reshape(1, d) @ T.transpose(head.weight)).reshape(head.num_items)
    return h_u @ T.transpose(head.weight)


def top_k_recommend(logits, exclude: Iterable[int], k: int) -> list[int]:
    """The ``k`` best non-excluded items by descending score, ties by index.

    Uses a partial partition so cost stays linear in the catalog size.
    """
    scores = np.asarray(logits, dtype=np.float64).reshape(-1)
    n = scores.size
    allowed = np.ones(n, dtype=bool)
    excl = np.fromiter((int(i) for i in exclude), dtype=np.int64)
    if excl.size:
        allowed[excl[(excl >= 0) & (excl < n)]] = False
    cand = np.flatnonzero(allowed)
    if k < 0 or k > cand.size:
        raise ContractError(f"k={k} exceeds the {cand.size} items available after exclusion")
    if k == 0:
        return []
    s = scores[cand]
    if k < cand.size:
        kth = np.partition(s, cand.size - k)[cand.size - k]
        above = s > kth
        need = k - int(above.sum())
        tied = np.flatnonzero(s == kth)[:need]
        pick = np.concatenate([np.flatnonzero(above), tied])
        cand, s = cand[pick], s[pick]
    order = np.lexsort((cand, -s))
    return cand[order].tolist()


def rank_of(scores: np.ndarray, target: int, excluded: np.ndarray | None = None) -> int:
    """1-based rank of ``target`` under the same ordering as :func:`top_k_recommend`."""
    s = np.asarray(scores).reshape(-1)
    v = s[target]
    better = (s > v) | ((s == v) & (np.arange(s.size) < target))
    if excluded is not None:
        better &= ~excluded
    return int(better.sum()) + 1
