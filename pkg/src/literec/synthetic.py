"""Deterministic MovieLens-100k-shaped corpus with text-linked sequential structure.

Items carry titles drawn from genre-specific word pools, so an item's text
says something about which genre it belongs to. Users drift between genres
with a sticky Markov chain and pick popular titles within the current genre;
franchise sequels tend to follow their predecessors. A model that reads item
text and recent history therefore has real signal to find, while plain
popularity does not see the drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Interaction

GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama", "Fantasy",
    "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

_SYLLABLES = ("ka", "lo", "mi", "ra", "ten", "vo", "sha", "dor", "pel", "quin", "bru", "zan", "fey", "mor", "tal", "ux")


@dataclass
class SyntheticConfig:
    num_users: int = 943
    num_items: int = 1600
    mean_length: float = 110.0
    min_length: int = 20
    max_length: int = 400
    words_per_genre: int = 24
    stickiness: float = 0.65  # chance the next item stays in the current genre
    sequel_rate: float = 0.35  # chance a consumed franchise entry is followed by its sequel
    franchise_fraction: float = 0.15
    zipf: float = 1.1
    seed: int = 7


def _genre_words(rng: np.random.Generator, n_genres: int, per_genre: int) -> list[list[str]]:
    seen: set[str] = set()
    pools = []
    for _ in range(n_genres):
        pool = []
        while len(pool) < per_genre:
            w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
            if w not in seen:
                seen.add(w)
                pool.append(w)
        pools.append(pool)
    return pools


def generate_corpus(config: SyntheticConfig = SyntheticConfig()):
    """Return ``(interactions, metadata)`` in the loader's raw shapes."""
    rng = np.random.default_rng(config.seed)
    n_g = len(GENRES)
    pools = _genre_words(rng, n_g, config.words_per_genre)
    shared = ["the", "of", "a", "night", "return", "story", "last", "day"]

    # items: a primary genre, sometimes a secondary, a title and a year
    primary = rng.integers(0, n_g, size=config.num_items)
    secondary = np.where(rng.random(config.num_items) < 0.4, rng.integers(0, n_g, size=config.num_items), -1)
    titles, genres = [], []
    sequel_of = np.full(config.num_items, -1)
    for i in range(config.num_items):
        g = primary[i]
        if i > 0 and rng.random() < config.franchise_fraction and primary[i - 1] == g and sequel_of[i - 1] == -1:
            base = titles[i - 1].rsplit(" (", 1)[0]
            titles.append(f"{base} 2 ({int(rng.integers(1960, 1999))})")
            sequel_of[i] = i - 1
        else:
            words = list(rng.choice(pools[g], size=int(rng.integers(1, 4)), replace=False))
            if rng.random() < 0.3:
                words.insert(0, str(rng.choice(shared)))
            if secondary[i] >= 0 and rng.random() < 0.5:
                words.append(str(rng.choice(pools[secondary[i]])))
            titles.append(" ".join(w.capitalize() for w in words) + f" ({int(rng.integers(1930, 1999))})")
        gs = [GENRES[g]] + ([GENRES[secondary[i]]] if secondary[i] >= 0 and secondary[i] != g else [])
        genres.append("|".join(gs))
    sequel = {int(sequel_of[i]): i for i in range(config.num_items) if sequel_of[i] >= 0}

    members = [np.flatnonzero((primary == g) | (secondary == g)) for g in range(n_g)]
    weights = []
    for m in members:
        w = 1.0 / np.arange(1, m.size + 1) ** config.zipf
        weights.append(w[rng.permutation(m.size)])

    interactions: list[Interaction] = []
    sigma = 0.8
    mu = np.log(config.mean_length) - sigma**2 / 2
    for u in range(config.num_users):
        length = int(np.clip(rng.lognormal(mu, sigma), config.min_length, config.max_length))
        pref = rng.dirichlet(np.full(n_g, 0.3))
        consumed: set[int] = set()
        g = int(rng.choice(n_g, p=pref))
        ts = 874_724_710 + int(rng.integers(0, 10**7))
        last = -1
        seq: list[int] = []
        for _ in range(length * 3):
            if len(seq) >= length:
                break
            if last in sequel and sequel[last] not in consumed and rng.random() < config.sequel_rate:
                item = sequel[last]
            else:
                if rng.random() > config.stickiness:
                    g = int(rng.choice(n_g, p=pref))
                m, w = members[g], weights[g]
                free = np.array([i not in consumed for i in m])
                if not free.any():
                    g = int(rng.choice(n_g, p=pref))
                    continue
                p = w * free
                item = int(rng.choice(m, p=p / p.sum()))
                g = int(primary[item]) if rng.random() < 0.5 else g
            consumed.add(item)
            seq.append(item)
            last = item
        for item in seq:
            ts += int(rng.integers(1, 5000))
            interactions.append(Interaction(str(u + 1), str(item + 1), float(rng.integers(1, 6)), ts))
    metadata = {str(i + 1): (titles[i], genres[i]) for i in range(config.num_items)}
    return interactions, metadata


def write_movielens(directory, interactions, metadata) -> tuple[Path, Path]:
    """Write ``ratings.dat`` and ``movies.dat`` in the ``::`` format."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ratings, movies = d / "ratings.dat", d / "movies.dat"
    with ratings.open("w", encoding="utf-8") as f:
        for it in interactions:
            f.write(f"{it.user}::{it.item}::{int(it.rating)}::{it.timestamp}\n")
    with movies.open("w", encoding="utf-8") as f:
        for rid in sorted(metadata, key=int):
            title, genre = metadata[rid]
            f.write(f"{rid}::{title}::{genre}\n")
    return ratings, movies
