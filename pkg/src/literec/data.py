"""Interaction loading, k-core filtering, leave-one-out splits and batching."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "jsonl", "tsv")
MAX_MALFORMED_FRACTION = 0.10


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class ItemRecord:
    raw_id: str
    index: int
    title: str
    genre: str


@dataclass
class UserSequence:
    user_index: int
    raw_id: str
    items: list[int]
    timestamps: list[int] | None = None


@dataclass
class RawData:
    interactions: list[Interaction]
    metadata: dict[str, tuple[str, str]]
    malformed: int = 0


@dataclass
class ItemCatalog:
    items: list[ItemRecord]

    def __post_init__(self):
        self._by_raw = {it.raw_id: it.index for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> ItemRecord:
        return self.items[index]

    def index_of(self, raw_id: str) -> int:
        return self._by_raw[raw_id]

    @property
    def pad_index(self) -> int:
        return len(self.items)


@dataclass
class Dataset:
    catalog: ItemCatalog
    sequences: list[UserSequence]

    @property
    def num_items(self) -> int:
        return len(self.catalog)

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_interactions(self) -> int:
        return sum(len(s.items) for s in self.sequences)


@dataclass
class SplitView:
    """Per-user leave-one-out partition, aligned by position."""

    users: list[int]
    train: list[list[int]]
    valid: list[int]
    test: list[int]

    def __len__(self) -> int:
        return len(self.users)

    def history(self, pos: int, stage: str, include_valid: bool = True) -> list[int]:
        """Items visible when predicting the ``stage`` target of user ``pos``."""
        if stage == "valid":
            return list(self.train[pos])
        if stage == "test":
            return self.train[pos] + [self.valid[pos]] if include_valid else list(self.train[pos])
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, pos: int, stage: str) -> int:
        return self.valid[pos] if stage == "valid" else self.test[pos]

    def interacted(self, pos: int) -> set[int]:
        return set(self.train[pos]) | {self.valid[pos], self.test[pos]}


# ---------------------------------------------------------------------------
# loading


def _read_lines(path: Path) -> list[str]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        # the original MovieLens .dat files are latin-1
        text = raw.decode("latin-1")
    return [ln for ln in text.splitlines() if ln.strip()]


def _parse_interaction(line: str, fmt: str) -> Interaction | None:
    try:
        if fmt == "jsonl":
            obj = json.loads(line)
            return Interaction(str(obj["user"]), str(obj["item"]), float(obj["rating"]), int(obj["timestamp"]))
        parts = line.split("::") if fmt == "movielens-dat" else line.rstrip("\n").split("\t")
        if len(parts) != 4:
            return None
        return Interaction(parts[0].strip(), parts[1].strip(), float(parts[2]), int(float(parts[3])))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError):
        return None


def _parse_metadata(line: str, fmt: str) -> tuple[str, str, str] | None:
    try:
        if fmt == "jsonl":
            obj = json.loads(line)
            return str(obj["item"]), str(obj.get("title", "")), str(obj.get("genre", ""))
        parts = line.split("::") if fmt == "movielens-dat" else line.split("\t")
        if len(parts) != 3:
            return None
        return parts[0].strip(), parts[1].strip(), parts[2].strip()
    except (ValueError, KeyError, TypeError, json.JSONDecodeError):
        return None


def _default_items_path(path: Path, fmt: str) -> Path | None:
    name = {"movielens-dat": "movies.dat", "jsonl": "items.jsonl", "tsv": "items.tsv"}[fmt]
    candidate = path.parent / name
    return candidate if candidate.exists() and candidate != path else None


def load_interactions(path, fmt: str, items_path=None) -> RawData:
    """Parse an interaction file and its item-metadata companion.

    Malformed lines are skipped and counted; more than 10% malformed is fatal.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    path = Path(path)
    lines = _read_lines(path)
    interactions, bad = [], 0
    for ln in lines:
        rec = _parse_interaction(ln, fmt)
        if rec is None:
            bad += 1
        else:
            interactions.append(rec)
    items_path = Path(items_path) if items_path else _default_items_path(path, fmt)
    metadata: dict[str, tuple[str, str]] = {}
    meta_lines: list[str] = []
    if items_path is not None:
        meta_lines = _read_lines(items_path)
        for ln in meta_lines:
            rec = _parse_metadata(ln, fmt)
            if rec is None:
                bad += 1
            else:
                metadata[rec[0]] = (rec[1], rec[2])
    total = len(lines) + len(meta_lines)
    if total == 0:
        raise DataError(f"{path} contains no records")
    if bad:
        log.warning("skipped %d malformed line(s) of %d", bad, total)
    if bad / total > MAX_MALFORMED_FRACTION:
        raise DataError(f"{bad} of {total} lines malformed (> {MAX_MALFORMED_FRACTION:.0%})")
    return RawData(interactions, metadata, bad)


# ---------------------------------------------------------------------------
# filtering and indexing


def kcore_filter(interactions: Sequence[Interaction], k: int) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until a fixpoint."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = list(interactions)
    while True:
        users = Counter(x.user for x in kept)
        items = Counter(x.item for x in kept)
        nxt = [x for x in kept if users[x.user] >= k and items[x.item] >= k]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise DataError(f"{k}-core filtering removed every interaction; k is too large for this data")
    return kept


def _natural_key(raw: str):
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


def build_dataset(raw: RawData | Sequence[Interaction], metadata: dict[str, tuple[str, str]] | None = None) -> Dataset:
    """Assign dense indices and build chronologically ordered sequences.

    Items and users are indexed in natural order of their raw ids. Ties in
    timestamp keep file order.
    """
    if isinstance(raw, RawData):
        interactions, metadata = raw.interactions, raw.metadata
    else:
        interactions, metadata = list(raw), metadata or {}
    item_ids = sorted({x.item for x in interactions}, key=_natural_key)
    items = []
    for idx, rid in enumerate(item_ids):
        title, genre = metadata.get(rid, ("", ""))
        if not title and not genre:
            title = f"item {rid}"
        items.append(ItemRecord(rid, idx, title, genre))
    catalog = ItemCatalog(items)

    per_user: dict[str, list[tuple[int, int, int]]] = {}
    for order, x in enumerate(interactions):
        per_user.setdefault(x.user, []).append((x.timestamp, order, catalog.index_of(x.item)))
    sequences = []
    for uidx, uid in enumerate(sorted(per_user, key=_natural_key)):
        events = sorted(per_user[uid])
        sequences.append(UserSequence(uidx, uid, [e[2] for e in events], [e[0] for e in events]))
    return Dataset(catalog, sequences)


def leave_one_out_split(sequences: Sequence[UserSequence]) -> SplitView:
    """Last item is the test target, second-to-last the validation target."""
    users, train, valid, test = [], [], [], []
    for s in sequences:
        if len(s.items) < 3:
            raise ContractError(f"user {s.raw_id} has {len(s.items)} interactions; need at least 3")
        users.append(s.user_index)
        train.append(list(s.items[:-2]))
        valid.append(s.items[-2])
        test.append(s.items[-1])
    return SplitView(users, train, valid, test)


# ---------------------------------------------------------------------------
# training examples


@dataclass(frozen=True)
class Example:
    user: int
    inputs: tuple[int, ...]
    target: int


def sample_segment(train_prefix: Sequence[int], max_len: int, rng: np.random.Generator) -> list[int]:
    """A uniformly placed contiguous segment of ``min(len, max_len)`` items.

    The last element is the prediction target and the rest are the input.
    """
    n = len(train_prefix)
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    if n < 2:
        raise ContractError("a segment needs at least two items (input + target)")
    length = min(n, max_len)
    start = int(rng.integers(0, n - length + 1))
    return list(train_prefix[start:start + length])


def sampling_examples(split: SplitView, max_len: int, rng: np.random.Generator) -> list[Example]:
    """One random segment per user (users with a single training item are skipped)."""
    out = []
    for pos, prefix in enumerate(split.train):
        if len(prefix) < 2:
            continue
        seg = sample_segment(prefix, max_len, rng)
        out.append(Example(split.users[pos], tuple(seg[:-1]), seg[-1]))
    return out


def all_examples(split: SplitView, max_len: int) -> list[Example]:
    """Every training-region position with at least one preceding item."""
    window = max_len - 1
    out = []
    for pos, prefix in enumerate(split.train):
        for j in range(1, len(prefix)):
            out.append(Example(split.users[pos], tuple(prefix[max(0, j - window):j]), prefix[j]))
    return out


def eval_examples(split: SplitView, stage: str, max_len: int, include_valid: bool = True) -> list[Example]:
    window = max_len - 1
    return [
        Example(split.users[pos], tuple(split.history(pos, stage, include_valid)[-window:]), split.target(pos, stage))
        for pos in range(len(split))
    ]


@dataclass
class Batch:
    inputs: np.ndarray  # (B, pad_to) item indices, left padded
    mask: np.ndarray  # (B, pad_to) True at real positions
    targets: np.ndarray
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.targets)


def pad_left(seqs: Sequence[Sequence[int]], pad_to: int, pad_index: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(seqs), pad_to), pad_index, dtype=np.int64)
    for r, s in enumerate(seqs):
        if len(s) > pad_to:
            raise ValueError(f"sequence of length {len(s)} exceeds pad_to={pad_to}")
        if len(s):
            ids[r, pad_to - len(s):] = s
    mask = np.zeros_like(ids, dtype=bool)
    for r, s in enumerate(seqs):
        mask[r, pad_to - len(s):] = len(s) > 0
    return ids, mask


def make_batches(examples: Sequence[Example], batch_size: int, pad_to: int, pad_index: int) -> list[Batch]:
    """Chunk examples into left-padded batches; the last batch may be short."""
    batches = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        ids, mask = pad_left([e.inputs for e in chunk], pad_to, pad_index)
        batches.append(Batch(
            ids, mask,
            np.array([e.target for e in chunk], dtype=np.int64),
            np.array([e.user for e in chunk], dtype=np.int64),
        ))
    return batches


# ---------------------------------------------------------------------------
# prepared-dataset files


def save_prepared(dataset: Dataset, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    items_path = d / "items.tsv"
    with items_path.open("w", encoding="utf-8") as f:
        for it in dataset.catalog.items:
            f.write(f"{it.index}\t{it.raw_id}\t{it.title}\t{it.genre}\n")
    seq_path = d / "sequences.tsv"
    with seq_path.open("w", encoding="utf-8") as f:
        for s in dataset.sequences:
            f.write(f"{s.user_index}\t{s.raw_id}\t{' '.join(map(str, s.items))}\n")
    split = leave_one_out_split(dataset.sequences)
    split_path = d / "split.tsv"
    with split_path.open("w", encoding="utf-8") as f:
        f.write("user\ttrain\tvalid\ttest\n")
        for pos, u in enumerate(split.users):
            f.write(f"{u}\t{' '.join(map(str, split.train[pos]))}\t{split.valid[pos]}\t{split.test[pos]}\n")
    return [items_path, seq_path, split_path]


def load_prepared(directory) -> Dataset:
    d = Path(directory)
    if not (d / "items.tsv").exists() or not (d / "sequences.tsv").exists():
        raise DataError(f"{d} does not contain a prepared dataset (run `prepare` first)")
    items = []
    for ln in (d / "items.tsv").read_text(encoding="utf-8").splitlines():
        idx, rid, title, genre = ln.split("\t")
        items.append(ItemRecord(rid, int(idx), title, genre))
    seqs = []
    for ln in (d / "sequences.tsv").read_text(encoding="utf-8").splitlines():
        uidx, rid, items_str = ln.split("\t")
        seqs.append(UserSequence(int(uidx), rid, [int(i) for i in items_str.split()]))
    return Dataset(ItemCatalog(items), seqs)


def item_popularity(split: SplitView, num_items: int) -> np.ndarray:
    counts = np.zeros(num_items, dtype=np.int64)
    for prefix in split.train:
        np.add.at(counts, np.asarray(prefix, dtype=np.int64), 1)
    return counts


def occurrences(histories: Iterable[Sequence[int]]) -> Counter:
    c: Counter = Counter()
    for h in histories:
        c.update(h)
    return c
