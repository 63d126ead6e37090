"""End-to-end steps shared by the command line, scripts and acceptance checks.

Everything a run produces lives under one output directory::

    data/         prepared dataset (items.tsv, sequences.tsv, split.tsv, vocab.txt)
    checkpoints/  one .ckpt per model variant
    logs/         per-variant loss and validation curves
    cache/        precomputed item embeddings
    reports/      evaluation, timing and meter tables
    manifest.json artifact -> sha256, used to skip already-complete work
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .config import RunConfig
from .data import Dataset, SplitView, build_dataset, kcore_filter, leave_one_out_split, load_interactions, load_prepared, save_prepared
from .errors import ContractError, DataError
from .evaluation import EvalReport, LiteScorer, config_fingerprint, evaluate_full, topn_sampled_eval
from .generative import (
    BeamRanker, GenVocab, Seq2Seq, TokenRecommender, TokenScorer, id_tokenizer, seq2seq_trainer, title_tokenizer,
    token_trainer,
)
from .item_encoder import ItemTokens, encoder_fingerprint, load_cache_if_fresh
from .model import LiteRec
from .text import Vocab, build_vocab, item_context_text
from .training import (
    TrainConfig, TrainResult, Trainer, lite_trainer, load_checkpoint, save_checkpoint, trainer_checkpoint,
)

LITE_VARIANTS = ("lite", "lite_fixrec", "lite_fixhead")
BASELINE_VARIANTS = ("full_beam", "wo_d", "wo_d_tid")
ALL_VARIANTS = BASELINE_VARIANTS + LITE_VARIANTS


# ---------------------------------------------------------------------------
# artifacts


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest: dict[str, dict] = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def rel(self, path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def is_complete(self, *paths) -> bool:
        for p in paths:
            entry = self.manifest.get(self.rel(p))
            if entry is None or not Path(p).exists() or sha256_file(p) != entry["sha256"]:
                return False
        return True

    def record(self, command: str, *paths) -> None:
        for p in paths:
            self.manifest[self.rel(p)] = {"sha256": sha256_file(p), "command": command}
        tmp = self.manifest_path.with_name("manifest.json.incomplete")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True), encoding="utf-8")
        tmp.replace(self.manifest_path)

    def write(self, path, writer: Callable[[Path], None]) -> Path:
        """Write via ``<name>.incomplete`` and rename once ``writer`` returns."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".incomplete")
        writer(tmp)
        tmp.replace(path)
        return path


# ---------------------------------------------------------------------------
# data


@dataclass
class Prepared:
    dataset: Dataset
    split: SplitView
    vocab: Vocab
    item_tokens: ItemTokens
    gen_vocab: GenVocab

    @property
    def num_items(self) -> int:
        return self.dataset.num_items


def prepare(cfg: RunConfig, ws: Workspace, force: bool = False, log=print) -> list[Path]:
    data_dir = ws.path("data")
    outputs = [data_dir / n for n in ("items.tsv", "sequences.tsv", "split.tsv", "vocab.txt")]
    if not force and ws.is_complete(*outputs):
        log(f"prepare: {data_dir} is complete, skipping (use --force to redo)")
        return outputs
    if not cfg.data.path:
        raise ContractError("no dataset given (set data.path or pass --data)")
    src = Path(cfg.data.path)
    if not src.exists():
        raise DataError(f"dataset file {src} does not exist")
    raw = load_interactions(src, cfg.data.format, cfg.data.items_path or None)
    if raw.malformed:
        log(f"prepare: skipped {raw.malformed} malformed lines")
    kept = kcore_filter(raw.interactions, cfg.data.kcore)
    dataset = build_dataset(kept, raw.metadata)
    vocab = build_vocab([item_context_text(it.title, it.genre) for it in dataset.catalog.items], cfg.data.min_freq)
    tmp = ws.path("data.incomplete")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_prepared(dataset, tmp)
    vocab.save(tmp / "vocab.txt")
    if data_dir.exists():
        shutil.rmtree(data_dir)
    tmp.rename(data_dir)
    ws.record("prepare", *outputs)
    log(f"prepare: {dataset.num_users} users, {dataset.num_items} items, {dataset.num_interactions} interactions "
        f"after {cfg.data.kcore}-core")
    return outputs


def load_prepared_workspace(cfg: RunConfig, ws: Workspace) -> Prepared:
    data_dir = ws.path("data")
    if not (data_dir / "vocab.txt").exists():
        raise DataError(f"no prepared dataset under {data_dir} (run `prepare` first)")
    dataset = load_prepared(data_dir)
    vocab = Vocab.load(data_dir / "vocab.txt")
    return from_dataset(dataset, cfg, vocab)


def from_dataset(dataset: Dataset, cfg: RunConfig, vocab: Vocab | None = None) -> Prepared:
    if vocab is None:
        vocab = build_vocab([item_context_text(it.title, it.genre) for it in dataset.catalog.items], cfg.data.min_freq)
    tokens = ItemTokens.from_catalog(dataset.catalog, vocab, cfg.item.max_item_text_len)
    return Prepared(dataset, leave_one_out_split(dataset.sequences), vocab, tokens,
                    GenVocab(cfg.gen.vocab_size, cfg.gen.id_offset))


# ---------------------------------------------------------------------------
# models


def variant_train_config(name: str, cfg: RunConfig) -> TrainConfig:
    train = cfg.train
    if name == "lite_fixrec":
        train = replace(train, freeze_rec_encoder=True)
    elif name == "lite_fixhead":
        train = replace(train, freeze_projection_head=True)
    return train


def title_input_len(prep: Prepared, window: int) -> int:
    return int(window * prep.item_tokens.mask.sum(axis=1).max())


def build_model(name: str, cfg: RunConfig, prep: Prepared):
    window = cfg.train.max_seq_len - 1
    if name in LITE_VARIANTS:
        return LiteRec(cfg.item, cfg.rec, prep.num_items, len(prep.vocab), prep.item_tokens, seed=cfg.seed)
    if name == "full_beam":
        return Seq2Seq(replace(cfg.gen, max_input_len=max(cfg.gen.max_input_len, 4 * window)), seed=cfg.seed)
    if name == "wo_d":
        return TokenRecommender(cfg.gen.vocab_size, prep.num_items, cfg.gen, max(cfg.gen.max_input_len, 4 * window), cfg.seed)
    if name == "wo_d_tid":
        return TokenRecommender(len(prep.vocab), prep.num_items, cfg.gen, title_input_len(prep, window), cfg.seed)
    raise ContractError(f"unknown model variant {name!r}; expected one of {ALL_VARIANTS}")


def make_trainer(name: str, model, cfg: RunConfig, prep: Prepared, log=None) -> Trainer:
    train = variant_train_config(name, cfg)
    window = train.max_seq_len - 1
    if name in LITE_VARIANTS:
        return lite_trainer(model, prep.split, train, validate=train.validate, log=log)
    if name == "full_beam":
        return seq2seq_trainer(model, prep.split, prep.gen_vocab, train, prep.num_items, log=log)
    return token_trainer(model, prep.split, tokenizer_for(name, model, prep, window), train, log=log)


def tokenizer_for(name: str, model, prep: Prepared, window: int = 20):
    if name == "wo_d":
        return id_tokenizer(prep.gen_vocab, model.max_input_len, window)
    return title_tokenizer(prep.item_tokens, model.max_input_len, window)


def recommender_for(name: str, model, cfg: RunConfig, prep: Prepared, beam_width: int | None = None):
    if name in LITE_VARIANTS:
        return LiteScorer(model, cfg.rec.max_seq_len)
    if name == "full_beam":
        return BeamRanker(model, prep.gen_vocab, prep.num_items, beam_width or cfg.gen.beam_width)
    return TokenScorer(model, tokenizer_for(name, model, prep, cfg.train.max_seq_len - 1))


def checkpoint_path(ws: Workspace, name: str) -> Path:
    return ws.path("checkpoints", f"{name}.ckpt")


def train_variant(name: str, cfg: RunConfig, prep: Prepared, ws: Workspace | None = None,
                  force: bool = False, log=print):
    """Train one variant (or reuse a complete checkpoint) and return ``(model, result)``."""
    if ws is not None and not force and ws.is_complete(checkpoint_path(ws, name)):
        log(f"train: {name} checkpoint is complete, skipping (use --force to retrain)")
        return load_variant(name, cfg, prep, ws), None
    model = build_model(name, cfg, prep)
    trainer = make_trainer(name, model, cfg, prep, log=(lambda m: log(f"[{name}] {m}")))
    result = trainer.fit()
    if ws is not None:
        ckpt = trainer_checkpoint(trainer, {"variant": name, "config": cfg.to_dict(), "num_items": prep.num_items,
                                            "vocab_size": len(prep.vocab), "best_epoch": result.best_epoch})
        path = checkpoint_path(ws, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, ckpt)
        log_path = ws.path("logs", f"{name}_loss.tsv")
        ws.write(log_path, lambda p: _write_curve(p, result))
        ws.record("train", path, log_path)
    return model, result


def _write_curve(path: Path, result: TrainResult) -> None:
    with path.open("w", encoding="utf-8") as f:
        f.write("epoch\tloss\tval_r10\tseconds\n")
        for i, e in enumerate(result.epochs):
            val = result.val_history[i] if i < len(result.val_history) else float("nan")
            f.write(f"{e.epoch}\t{e.loss:.6f}\t{val:.6f}\t{e.seconds:.3f}\n")


def load_variant(name: str, cfg: RunConfig, prep: Prepared, ws: Workspace):
    path = checkpoint_path(ws, name)
    if not path.exists():
        raise ContractError(f"no checkpoint for {name!r} at {path} (run `train` first)")
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("variant", name) != name:
        raise ContractError(f"{path} holds variant {ckpt.meta.get('variant')!r}, not {name!r}")
    model = build_model(name, cfg, prep)
    model.load_state_dict(ckpt.params)
    return model


def attach_cache(model: LiteRec, prep: Prepared, ws: Workspace, log=print) -> bool:
    """Use the on-disk embedding cache when its fingerprint matches the model."""
    fp = encoder_fingerprint(model.item_encoder, prep.vocab)
    cache = load_cache_if_fresh(ws.path("cache", "items.emb"), fp)
    if cache is None:
        log("eval: no fresh embedding cache, encoding items on the fly")
        return False
    model.use_cache(cache)
    return True


def precompute(cfg: RunConfig, prep: Prepared, ws: Workspace, force: bool = False, log=print) -> Path:
    model = load_variant("lite", cfg, prep, ws)
    path = ws.path("cache", "items.emb")
    fp = encoder_fingerprint(model.item_encoder, prep.vocab)
    if not force and ws.is_complete(path) and load_cache_if_fresh(path, fp) is not None:
        log(f"precompute: {path} is fresh, skipping (use --force to redo)")
        return path
    cache = model.build_cache(prep.vocab)
    ws.write(path, cache.save)
    ws.record("precompute", path)
    log(f"precompute: {cache.num_items} items x {cache.dim} -> {path}")
    return path


def evaluate_variant(name: str, cfg: RunConfig, prep: Prepared, ws: Workspace, model=None) -> EvalReport:
    model = model if model is not None else load_variant(name, cfg, prep, ws)
    if name in LITE_VARIANTS:
        attach_cache(model, prep, ws, log=lambda m: None)
    rec = recommender_for(name, model, cfg, prep)
    fp = config_fingerprint({"variant": name, **cfg.to_dict()})
    report = evaluate_full(rec, prep.split, ks=cfg.eval.ks, include_valid=cfg.eval.include_valid, fingerprint=fp)
    if name == "full_beam":
        report.extra.update(invalid=rec.invalid, duplicates=rec.duplicates)
    return report


def topn_variant(name: str, cfg: RunConfig, prep: Prepared, ws: Workspace, model=None) -> EvalReport:
    model = model if model is not None else load_variant(name, cfg, prep, ws)
    rec = recommender_for(name, model, cfg, prep)
    fp = config_fingerprint({"variant": name, **cfg.to_dict()})
    return topn_sampled_eval(rec, prep.split, prep.num_items, cfg.eval.negatives, cfg.eval.topn_ks, seed=cfg.seed,
                             include_valid=cfg.eval.include_valid, fingerprint=fp)


def write_report(ws: Workspace, path, report: EvalReport) -> Path:
    return ws.write(path, report.to_tsv)


def summarize(reports: dict[str, EvalReport], keys=("R@10", "N@10", "R@20", "N@20")) -> str:
    width = max(len(n) for n in reports) + 2
    lines = [f"{'variant':<{width}}" + "".join(f"{k:>9}" for k in keys)]
    for name, rep in reports.items():
        lines.append(f"{name:<{width}}" + "".join(f"{rep.metrics.get(k, float('nan')):>9.4f}" for k in keys))
    return "\n".join(lines)
