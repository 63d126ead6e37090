"""Per-component inference timing, input-length and redundancy meters.

A pipeline runs one batch of histories end to end and wraps its stages in
``timer.scope(name)``. ``time_components`` drives it over fixed batches and
reports per-batch means, with everything outside the named scopes booked as
``other``.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from collections import Counter, defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import pad_left
from .head import top_k_recommend

Histories = Sequence[Sequence[int]]


class ComponentTimer:
    def __init__(self):
        self.totals: dict[str, float] = defaultdict(float)

    @contextmanager
    def scope(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - t0


class _NullTimer(ComponentTimer):
    @contextmanager
    def scope(self, name: str):
        yield


class Pipeline(Protocol):
    name: str

    def run_batch(self, histories: Histories, timer: ComponentTimer): ...


def hardware_descriptor() -> str:
    threads = os.environ.get("OMP_NUM_THREADS") or os.environ.get("OPENBLAS_NUM_THREADS") or "default"
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} blas-threads={threads} numpy={np.__version__} py={platform.python_version()}"


@dataclass
class TimingReport:
    pipeline: str
    components: dict[str, float]  # per-batch mean seconds, median over repetitions
    total_median: float  # per-batch seconds
    total_mean: float
    batches: int
    batch_size: int
    warmup: int
    reps: int
    rep_totals: list[float] = field(default_factory=list)
    hardware: str = field(default_factory=hardware_descriptor)

    def per_batch_ms(self, name: str | None = None) -> float:
        return 1000.0 * (self.total_median if name is None else self.components[name])

    def table(self) -> str:
        lines = [f"{self.pipeline}: {self.batches} batches x {self.batch_size}, warmup {self.warmup}, reps {self.reps}"]
        for name, sec in self.components.items():
            lines.append(f"  {name:<14}{1000 * sec:>10.2f} ms/batch")
        lines.append(f"  {'total':<14}{1000 * self.total_median:>10.2f} ms/batch (median; mean {1000 * self.total_mean:.2f})")
        return "\n".join(lines)

    def rows(self) -> list[tuple[str, str, float]]:
        out = [(self.pipeline, name, 1000 * sec) for name, sec in self.components.items()]
        out.append((self.pipeline, "total", 1000 * self.total_median))
        return out


def write_timing_tsv(path, reports: Sequence[TimingReport]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        f.write(f"# {hardware_descriptor()}\n")
        f.write("pipeline\tcomponent\tms_per_batch\n")
        for rep in reports:
            for pipe, comp, ms in rep.rows():
                f.write(f"{pipe}\t{comp}\t{ms:.4f}\n")


def time_components(pipeline: Pipeline, batches: Sequence[Histories], warmup: int = 3, reps: int = 5) -> TimingReport:
    """Time each named stage; the first ``warmup`` batches of a rep are not counted."""
    timed = batches[warmup:]
    if not timed:
        raise ValueError(f"need more than {warmup} batches")
    per_rep_components: list[dict[str, float]] = []
    totals: list[float] = []
    for _ in range(reps):
        for b in batches[:warmup]:
            pipeline.run_batch(b, _NullTimer())
        timer = ComponentTimer()
        elapsed = 0.0
        for b in timed:
            t0 = time.perf_counter()
            pipeline.run_batch(b, timer)
            elapsed += time.perf_counter() - t0
        named = dict(timer.totals)
        named["other"] = max(0.0, elapsed - sum(named.values()))
        per_rep_components.append({k: v / len(timed) for k, v in named.items()})
        totals.append(elapsed / len(timed))
    names = list(per_rep_components[0])
    comps = {n: statistics.median(r[n] for r in per_rep_components) for n in names}
    size = int(np.median([len(b) for b in timed]))
    return TimingReport(
        pipeline.name, comps, statistics.median(totals), statistics.fmean(totals), len(timed), size, warmup, reps, totals,
    )


def history_batches(histories: Histories, batch_size: int = 32, count: int | None = None) -> list[list[list[int]]]:
    """Fixed-composition batches, cycling through the histories if needed."""
    if not histories:
        return []
    count = count if count is not None else -(-len(histories) // batch_size)
    out, pos = [], 0
    for _ in range(count):
        batch = []
        for _ in range(batch_size):
            batch.append(list(histories[pos % len(histories)]))
            pos += 1
        out.append(batch)
    return out


# ---------------------------------------------------------------------------
# pipelines


class LitePipeline:
    """Hierarchical model: cached item vectors -> sequence encoder -> head -> top-k."""

    def __init__(self, model, k: int = 20, max_len: int | None = None, name: str = "lite"):
        self.model, self.k, self.name = model, k, name
        self.window = (max_len or model.rec_config.max_seq_len) - 1

    def run_batch(self, histories: Histories, timer: ComponentTimer):
        model = self.model
        model.eval()
        hs = [list(h)[-self.window:] for h in histories]
        ids, mask = pad_left(hs, self.window, model.pad_index)
        with timer.scope("encoding"):
            h_u = model.user_vectors(ids, mask)
        with timer.scope("head_scoring"):
            logits = model.head(h_u).data
            recs = [top_k_recommend(logits[r], hs[r], self.k) for r in range(len(hs))]
        return recs


class BeamPipeline:
    """Generative baseline: ID tokens -> encoder -> beam search -> parsed items."""

    def __init__(self, model, vocab, num_items: int, beam_width: int = 20, k: int = 20,
                 max_steps: int | None = None, constrained: bool = True, name: str | None = None):
        from .generative import item_trie

        self.model, self.vocab, self.num_items = model, vocab, num_items
        self.beam_width, self.k = beam_width, min(k, beam_width)
        self.max_steps = max_steps or len(vocab.item_tokens(num_items - 1)) + 1
        self.allowed = item_trie(vocab, num_items) if constrained else None
        self.name = name or f"beam_B{beam_width}"

    def run_batch(self, histories: Histories, timer: ComponentTimer):
        from .generative import beam_search_decode, id_token_inputs, parse_generated_items

        model = self.model
        model.eval()
        ids, mask = id_token_inputs(histories, self.vocab, model.config.max_input_len)
        with timer.scope("encoding"):
            memory = model.encode(ids, mask)
        with timer.scope("beam_search"):
            beams = beam_search_decode(
                model, ids, mask, self.beam_width, self.max_steps, self.k,
                length_penalty=model.config.length_penalty, allowed=self.allowed, memory=memory,
            )
            return [parse_generated_items([h.tokens for h in row], self.vocab, self.num_items).items for row in beams]


class TokenHeadPipeline:
    """Token-sequence encoder with a projection head (the decoder-free variants)."""

    def __init__(self, model, to_tokens, k: int = 20, name: str = "wo_d"):
        self.model, self.to_tokens, self.k, self.name = model, to_tokens, k, name

    def run_batch(self, histories: Histories, timer: ComponentTimer):
        model = self.model
        model.eval()
        ids, mask = self.to_tokens(histories)
        with timer.scope("encoding"):
            h = model.encode(ids, mask)
        with timer.scope("head_scoring"):
            logits = model.head(h).data
            return [top_k_recommend(logits[r], histories[r], self.k) for r in range(len(histories))]


# ---------------------------------------------------------------------------
# meters


def measure_input_length(kind: str, histories: Histories, max_items: int = 21, vocab=None, item_tokens=None) -> float:
    """Mean sequence positions consumed per history, each capped at ``max_items`` items.

    ``hierarchical`` counts one position per item; ``id_tokens`` counts the
    item-ID token expansion; ``title_tokens`` counts title-and-genre tokens.
    """
    if not histories:
        return 0.0
    capped = [list(h)[-max_items:] for h in histories]
    if kind == "hierarchical":
        lengths = [len(h) for h in capped]
    elif kind == "id_tokens":
        lengths = [sum(len(vocab.item_tokens(i)) for i in h) for h in capped]
    elif kind == "title_tokens":
        per_item = item_tokens.mask.sum(axis=1)
        lengths = [int(sum(per_item[i] for i in h)) for h in capped]
    else:
        raise ValueError(f"unknown pipeline kind {kind!r}")
    return sum(lengths) / len(lengths)


@dataclass
class RedundancyReport:
    encoder_calls: int
    occurrences: int
    distinct_items: int
    per_item_calls: Counter = field(default_factory=Counter)

    @property
    def ratio(self) -> float:
        """Encoder calls per distinct item (1.0 means no redundant work)."""
        return self.encoder_calls / self.distinct_items if self.distinct_items else 0.0


def count_redundant_encodings(model, batches: Sequence[Histories], cached: bool) -> RedundancyReport:
    """Count item-encoder passes needed to serve ``batches``.

    With the cache, each distinct item is encoded once up front and inference
    reads vectors from the cache; without it, every occurrence in every input
    sequence gets its own encoder pass.
    """
    from .item_encoder import EmbeddingCache

    model.eval()
    window = model.rec_config.max_seq_len - 1
    inputs = [[list(h)[-window:] for h in batch] for batch in batches]
    occ: Counter = Counter()
    for batch in inputs:
        for h in batch:
            occ.update(h)
    if not occ:
        return RedundancyReport(0, 0, 0)
    enc = model.item_encoder
    before_rows, before_counts = enc.rows_encoded, Counter(model.encode_counts)
    saved = model.cache, model.per_occurrence
    try:
        if cached:
            distinct = np.array(sorted(occ), dtype=np.int64)
            model.use_cache(None)
            matrix = np.zeros((model.num_items + 1, enc.config.model_dim), dtype=np.float32)
            matrix[distinct] = model.item_vectors(distinct).data
            model.use_cache(EmbeddingCache(matrix, b"\0" * 32))
        else:
            model.use_cache(None)
            model.per_occurrence = True
        for batch in inputs:
            model.user_vectors(*pad_left(batch, window, model.pad_index))
    finally:
        model.cache, model.per_occurrence = saved
    calls = model.encode_counts - before_counts
    return RedundancyReport(enc.rows_encoded - before_rows, sum(occ.values()), len(occ), calls)
