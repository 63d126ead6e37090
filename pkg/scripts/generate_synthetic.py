"""Write a synthetic MovieLens-style corpus (``ratings.dat`` plus ``movies.dat``).

    python3 scripts/generate_synthetic.py data/synth --users 943 --items 1349
    literec prepare --data data/synth/ratings.dat --out runs/synth
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from literec.synthetic import SyntheticConfig, generate_corpus, write_movielens


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--users", type=int, default=943)
    ap.add_argument("--items", type=int, default=1349)
    ap.add_argument("--mean-length", type=int, default=100)
    ap.add_argument("--min-length", type=int, default=20)
    ap.add_argument("--max-length", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cfg = SyntheticConfig(num_users=args.users, num_items=args.items, mean_length=args.mean_length,
                          min_length=args.min_length, max_length=args.max_length, seed=args.seed)
    interactions, metadata = generate_corpus(cfg)
    ratings, movies = write_movielens(args.out, interactions, metadata)
    print(f"wrote {len(interactions)} interactions to {ratings} and {len(metadata)} items to {movies}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
