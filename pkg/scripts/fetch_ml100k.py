"""Fetch MovieLens-100k and write it as ``ratings.dat`` / ``movies.dat``.

The GroupLens site is often unreachable from build machines, so by default the
dataset is taken from the example data bundled in the ``recbole`` wheel, which
is a verbatim copy of ML-100k (100,000 ratings, 943 users, 1,682 movies). It is
downloaded with ``pip download --no-deps`` and read straight from the zip; the
package itself is never installed or imported.

An original GroupLens extract (``u.data`` and ``u.item``) can be converted
instead with ``--grouplens DIR``.

    python3 scripts/fetch_ml100k.py data/ml-100k
    literec prepare --data data/ml-100k/ratings.dat --out runs/ml100k
"""

from __future__ import annotations

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL_SPEC = "recbole==1.2.1"
MEMBER = "recbole/dataset_example/ml-100k/ml-100k.{}"
GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
    "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


def _download_wheel(dest: Path) -> Path:
    cmd = [sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps", "-q", "-d", str(dest)]
    subprocess.run(cmd, check=True)
    wheels = sorted(dest.glob("recbole-*.whl"))
    if not wheels:
        raise SystemExit(f"pip download produced no wheel in {dest}")
    return wheels[0]


def from_wheel(wheel: Path) -> tuple[list[str], list[str]]:
    """Atomic-file rows (tab separated, typed header) to ``::`` lines."""
    with zipfile.ZipFile(wheel) as zf:
        inter = zf.read(MEMBER.format("inter")).decode("utf-8").splitlines()[1:]
        items = zf.read(MEMBER.format("item")).decode("utf-8").splitlines()[1:]
    ratings = []
    for line in inter:
        user, item, rating, ts = line.split("\t")
        ratings.append(f"{user}::{item}::{int(float(rating))}::{int(float(ts))}")
    movies = []
    for line in items:
        item, title, year, genres = (line.split("\t") + ["", "", ""])[:4]
        full = f"{title} ({year})" if year else title
        movies.append(f"{item}::{full}::{'|'.join(genres.split())}")
    return ratings, movies


def from_grouplens(folder: Path) -> tuple[list[str], list[str]]:
    """Original ``u.data`` (tab separated) and ``u.item`` (pipe separated, latin-1)."""
    ratings = []
    for line in (folder / "u.data").read_text(encoding="latin-1").splitlines():
        user, item, rating, ts = line.split("\t")
        ratings.append(f"{user}::{item}::{rating}::{ts}")
    movies = []
    for line in (folder / "u.item").read_text(encoding="latin-1").splitlines():
        parts = line.split("|")
        if len(parts) < 5 + len(GENRES):
            continue
        flags = parts[-len(GENRES):]
        genres = [g for g, f in zip(GENRES, flags) if f == "1"]
        movies.append(f"{parts[0]}::{parts[1]}::{'|'.join(genres)}")
    return ratings, movies


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path, help="directory for ratings.dat and movies.dat")
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--wheel", type=Path, help="use an already downloaded recbole wheel")
    src.add_argument("--grouplens", type=Path, help="folder holding u.data and u.item")
    args = ap.parse_args(argv)

    if args.grouplens:
        ratings, movies = from_grouplens(args.grouplens)
    elif args.wheel:
        ratings, movies = from_wheel(args.wheel)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            ratings, movies = from_wheel(_download_wheel(Path(tmp)))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ratings.dat").write_text("\n".join(ratings) + "\n", encoding="utf-8")
    (args.out / "movies.dat").write_text("\n".join(movies) + "\n", encoding="utf-8")
    print(f"wrote {len(ratings)} ratings and {len(movies)} movies to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
