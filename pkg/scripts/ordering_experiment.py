"""Train the hierarchical model and the generative beam-search baseline on the
same data with the same training budget, then compare them with popularity.

The corpus is MovieLens-100k (see ``fetch_ml100k.py``) filtered to 5-core with
leave-one-out splits. Both models share one training configuration: the same
epoch cap, early-stopping patience, optimizer and batch size. Results go to
``<out>/reports/ordering.json``; a finished workspace is reused unless
``--force`` is given.

    python3 scripts/fetch_ml100k.py data/ml-100k
    python3 scripts/ordering_experiment.py --data data/ml-100k/ratings.dat --out runs/ml100k
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from literec.config import build_config
from literec.evaluation import PopularityScorer, evaluate_full
from literec.workflow import (
    Workspace, evaluate_variant, load_prepared_workspace, load_variant, prepare, train_variant,
)

VARIANTS = ("lite", "full_beam")
KEYS = ("R@10", "N@10", "R@20", "N@20")


@dataclass
class OrderingResult:
    metrics: dict[str, dict[str, float]]
    train_seconds: dict[str, float] = field(default_factory=dict)
    total_seconds: float = 0.0

    def beats(self, winner: str, loser: str, keys=("R@10", "N@10")) -> bool:
        return all(self.metrics[winner][k] > self.metrics[loser][k] for k in keys)

    def table(self) -> str:
        lines = [f"{'model':<12}" + "".join(f"{k:>9}" for k in KEYS) + f"{'train_s':>10}"]
        for name, m in self.metrics.items():
            secs = self.train_seconds.get(name)
            lines.append(f"{name:<12}" + "".join(f"{m[k]:>9.4f}" for k in KEYS)
                         + (f"{secs:>10.0f}" if secs is not None else f"{'-':>10}"))
        lines.append(f"total {self.total_seconds:.0f}s")
        return "\n".join(lines)


def experiment_config(data: Path, out: Path, epochs: int = 150, patience: int = 20, seed: int = 0):
    overrides = {"data.path": str(data), "out": str(out), "train.epochs": str(epochs),
                 "train.early_stop_patience": str(patience), "seed": str(seed)}
    return build_config(overrides=overrides, env={})


def results_path(out: Path) -> Path:
    return Path(out) / "reports" / "ordering.json"


def run_ordering(data: Path, out: Path, epochs: int = 150, patience: int = 20, seed: int = 0,
                 force: bool = False, log=print) -> OrderingResult:
    """Prepare, train both variants, evaluate on the test split and save the result."""
    if not force and Workspace(out).is_complete(results_path(out)):
        log(f"ordering: {results_path(out)} is complete, reusing it (use --force to redo)")
        return load_ordering(out)
    start = time.perf_counter()
    cfg = experiment_config(data, out, epochs, patience, seed)
    ws = Workspace(cfg.out)
    prepare(cfg, ws, force=force, log=log)
    prep = load_prepared_workspace(cfg, ws)
    metrics = {"popularity": evaluate_full(PopularityScorer.from_split(prep.split, prep.num_items), prep.split,
                                           ks=cfg.eval.ks, include_valid=cfg.eval.include_valid).metrics}
    seconds = {}
    for name in VARIANTS:
        t = time.perf_counter()
        model, _ = train_variant(name, cfg, prep, ws, force=force, log=log)
        seconds[name] = time.perf_counter() - t
        metrics[name] = evaluate_variant(name, cfg, prep, ws, model=model).metrics
    result = OrderingResult(metrics, seconds, time.perf_counter() - start)
    path = results_path(cfg.out)
    ws.write(path, lambda p: p.write_text(json.dumps(
        {"metrics": metrics, "train_seconds": seconds, "total_seconds": result.total_seconds}, indent=1)))
    ws.record("ordering", path)
    return result


def load_ordering(out: Path) -> OrderingResult | None:
    path = results_path(out)
    if not path.exists():
        return None
    raw = json.loads(path.read_text())
    return OrderingResult(raw["metrics"], raw["train_seconds"], raw["total_seconds"])


def reevaluate(data: Path, out: Path, epochs: int = 150, patience: int = 20, seed: int = 0) -> dict[str, dict]:
    """Test metrics recomputed from the saved checkpoints of a finished run."""
    cfg = experiment_config(data, out, epochs, patience, seed)
    ws = Workspace(cfg.out)
    prep = load_prepared_workspace(cfg, ws)
    return {name: evaluate_variant(name, cfg, prep, ws, model=load_variant(name, cfg, prep, ws)).metrics
            for name in VARIANTS}


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, default=Path("data/ml-100k/ratings.dat"))
    ap.add_argument("--out", type=Path, default=Path("runs/ml100k"))
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--patience", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)
    res = run_ordering(args.data, args.out, args.epochs, args.patience, args.seed, args.force)
    print(res.table())
    verdict = res.beats("lite", "popularity") and res.beats("lite", "full_beam")
    print("lite ahead of both baselines on R@10 and N@10:", "yes" if verdict else "no")
    return 0


if __name__ == "__main__":
    sys.exit(main())
