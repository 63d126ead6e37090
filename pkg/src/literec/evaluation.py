"""Ranking metrics, full-catalog and sampled-negative evaluation.

Anything that can score histories plugs in here: an object with
``score_histories(histories) -> (n, |I|) array`` is ranked over the whole
catalog, one with ``recommend(histories, k, exclude) -> ranked lists`` (the
beam-search baseline) is read off its own lists.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import SplitView, item_popularity, pad_left
from .errors import ContractError


def recall_at_k(ranked: Sequence[int], ground_truth: int, k: int) -> int:
    if k < 1:
        raise ContractError("k must be >= 1")
    return int(ground_truth in list(ranked)[:k])


def ndcg_at_k(ranked: Sequence[int], ground_truth: int, k: int) -> float:
    if k < 1:
        raise ContractError("k must be >= 1")
    top = list(ranked)[:k]
    if ground_truth not in top:
        return 0.0
    return 1.0 / math.log2(top.index(ground_truth) + 2)


def metrics_from_rank(rank: float, ks: Sequence[int]) -> dict[str, float]:
    """Recall/NDCG at each k for a single positive at 1-based ``rank``."""
    out = {}
    for k in ks:
        hit = rank <= k
        out[f"R@{k}"] = float(hit)
        out[f"N@{k}"] = 1.0 / math.log2(rank + 1) if hit else 0.0
    return out


@dataclass
class EvalReport:
    metrics: dict[str, float]
    num_users: int
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.metrics[name]

    def rows(self) -> list[tuple[str, int, float, str]]:
        out = []
        for key, value in self.metrics.items():
            name, k = key.split("@")
            out.append((name, int(k), value, self.fingerprint))
        return out

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'metric':<8}{'value':>10}   (users={self.num_users})")
        lines += [f"{key:<8}{value:>10.4f}" for key, value in self.metrics.items()]
        return "\n".join(lines)

    def to_tsv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            f.write("name\tk\tvalue\tfingerprint\n")
            for name, k, value, fp in self.rows():
                f.write(f"{name}\t{k}\t{value!r}\t{fp}\n")

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "num_users": self.num_users, "fingerprint": self.fingerprint, "extra": self.extra}


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scorers


class Scorer(Protocol):
    def score_histories(self, histories: Sequence[Sequence[int]]) -> np.ndarray: ...


class LiteScorer:
    """Adapter scoring histories with the hierarchical model in eval mode."""

    def __init__(self, model, max_len: int | None = None):
        self.model = model
        self.window = (max_len or model.rec_config.max_seq_len) - 1

    def batch_inputs(self, histories: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        return pad_left([list(h)[-self.window:] for h in histories], self.window, self.model.pad_index)

    def score_histories(self, histories: Sequence[Sequence[int]]) -> np.ndarray:
        was = self.model.training
        self.model.eval()
        try:
            return self.model.score(*self.batch_inputs(histories))
        finally:
            self.model.train(was)


class PopularityScorer:
    """Ranks by training-region interaction counts; ties by item index."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)

    @classmethod
    def from_split(cls, split: SplitView, num_items: int) -> "PopularityScorer":
        return cls(item_popularity(split, num_items))

    def score_histories(self, histories):
        return np.broadcast_to(self.counts, (len(histories), self.counts.size))


class RandomScorer:
    def __init__(self, num_items: int, seed: int = 0):
        self.num_items = num_items
        self.rng = np.random.default_rng(seed)

    def score_histories(self, histories):
        return self.rng.random((len(histories), self.num_items))


def as_recommender(model, **kw):
    if hasattr(model, "score_histories") or hasattr(model, "recommend"):
        return model
    if hasattr(model, "rec_encoder"):
        return LiteScorer(model, **kw)
    raise TypeError(f"cannot evaluate a {type(model).__name__}")


# ---------------------------------------------------------------------------
# evaluation loops


def _seen(split: SplitView, pos: int, stage: str) -> set[int]:
    seen = set(split.train[pos])
    if stage == "test":
        seen.add(split.valid[pos])
    # the ground truth is never excluded, even if it was consumed before
    seen.discard(split.target(pos, stage))
    return seen


def _average(per_user: list[dict[str, float]], ks) -> dict[str, float]:
    keys = [f"R@{k}" for k in ks] + [f"N@{k}" for k in ks]
    if not per_user:
        return {key: 0.0 for key in keys}
    return {key: float(np.mean([u[key] for u in per_user])) for key in keys}


def evaluate_full(
    model,
    split: SplitView,
    ks: Sequence[int] = (10, 20),
    stage: str = "test",
    include_valid: bool = True,
    exclude_seen: bool = True,
    batch_size: int = 256,
    fingerprint: str = "",
    users: Sequence[int] | None = None,
) -> EvalReport:
    """Rank every catalog item for each user and average the metrics.

    Seen items (train prefix, plus the validation item at test time) are
    removed from the candidates; the ground-truth item never is.
    """
    rec = as_recommender(model)
    positions = list(range(len(split))) if users is None else list(users)
    per_user: list[dict[str, float]] = []
    kmax = max(ks)
    for lo in range(0, len(positions), batch_size):
        chunk = positions[lo:lo + batch_size]
        hists = [split.history(p, stage, include_valid) for p in chunk]
        seen = [_seen(split, p, stage) if exclude_seen else set() for p in chunk]
        if hasattr(rec, "score_histories"):
            scores = np.asarray(rec.score_histories(hists))
            for r, p in enumerate(chunk):
                s = scores[r]
                tgt = split.target(p, stage)
                better = (s > s[tgt]) | ((s == s[tgt]) & (np.arange(s.size) < tgt))
                if seen[r]:
                    better[np.fromiter(seen[r], dtype=np.int64)] = False
                per_user.append(metrics_from_rank(int(better.sum()) + 1, ks))
        else:
            lists = rec.recommend(hists, kmax, seen)
            for r, p in enumerate(chunk):
                ranked = list(lists[r])
                tgt = split.target(p, stage)
                rank = ranked.index(tgt) + 1 if tgt in ranked[:kmax] else math.inf
                per_user.append(metrics_from_rank(rank, ks))
    return EvalReport(_average(per_user, ks), len(per_user), fingerprint, {"stage": stage})


def sample_negatives(
    split: SplitView, pos: int, num_items: int, num_negatives: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform draw without replacement from items the user never touched."""
    seen = np.fromiter(split.interacted(pos), dtype=np.int64)
    pool = np.setdiff1d(np.arange(num_items), seen, assume_unique=False)
    if pool.size < num_negatives:
        raise ContractError(f"user {split.users[pos]} has only {pool.size} un-interacted items")
    return rng.choice(pool, size=num_negatives, replace=False)


def topn_sampled_eval(
    model,
    split: SplitView,
    num_items: int,
    num_negatives: int = 99,
    ks: Sequence[int] = (1, 5, 10),
    seed: int = 0,
    include_valid: bool = True,
    batch_size: int = 256,
    fingerprint: str = "",
) -> EvalReport:
    """Rank the test item among ``num_negatives`` seeded random negatives."""
    if num_items < num_negatives + 1:
        raise ContractError(f"catalog of {num_items} items is too small for {num_negatives} negatives")
    rec = as_recommender(model)
    if not hasattr(rec, "score_histories"):
        raise ContractError("sampled evaluation needs a scorer over the catalog")
    rng = np.random.default_rng(seed)
    per_user = []
    for lo in range(0, len(split), batch_size):
        chunk = range(lo, min(lo + batch_size, len(split)))
        scores = np.asarray(rec.score_histories([split.history(p, "test", include_valid) for p in chunk]))
        for r, p in enumerate(chunk):
            gt = split.test[p]
            neg = sample_negatives(split, p, num_items, num_negatives, rng)
            s, sg = scores[r, neg], scores[r, gt]
            rank = 1 + int(np.sum(s > sg)) + int(np.sum((s == sg) & (neg < gt)))
            per_user.append(metrics_from_rank(rank, ks))
    return EvalReport(_average(per_user, ks), len(per_user), fingerprint, {"seed": seed, "negatives": num_negatives})
