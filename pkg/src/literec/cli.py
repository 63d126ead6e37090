"""Command line: prepare -> train -> precompute -> eval / topn -> bench, plus ablate."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import (
    BeamPipeline, LitePipeline, count_redundant_encodings, history_batches, measure_input_length, time_components,
    write_timing_tsv,
)
from .config import RunConfig, build_config
from .errors import LiteRecError
from .evaluation import EvalReport
from .workflow import (
    ALL_VARIANTS, Workspace, attach_cache, evaluate_variant, load_prepared_workspace, load_variant, precompute,
    prepare, summarize, topn_variant, tokenizer_for, train_variant, write_report,
)

DISPLAY = {"lite_fixrec": "lite+fixRec", "lite_fixhead": "lite+fixHead"}


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise LiteRecError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    flag_keys = {
        "out": "out", "seed": "seed", "data": "data.path", "format": "data.format", "kcore": "data.kcore",
        "items": "data.items_path", "strategy": "train.strategy", "profile": "profile", "epochs": "train.epochs",
        "k": "eval.ks", "negatives": "eval.negatives", "beam": "bench.beam_widths", "reps": "bench.reps",
        "batches": "bench.batches", "warmup": "bench.warmup",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


def _say(args):
    return (lambda msg: None) if args.quiet else print


def cmd_prepare(cfg: RunConfig, ws: Workspace, args) -> int:
    prepare(cfg, ws, force=args.force, log=_say(args))
    return 0


def cmd_train(cfg: RunConfig, ws: Workspace, args) -> int:
    prep = load_prepared_workspace(cfg, ws)
    names = ALL_VARIANTS if args.variant == "all" else (args.variant,)
    for name in names:
        train_variant(name, cfg, prep, ws, force=args.force, log=_say(args))
    return 0


def cmd_precompute(cfg: RunConfig, ws: Workspace, args) -> int:
    prep = load_prepared_workspace(cfg, ws)
    precompute(cfg, prep, ws, force=args.force, log=_say(args))
    return 0


def _report_cmd(kind: str, cfg: RunConfig, ws: Workspace, args) -> int:
    prep = load_prepared_workspace(cfg, ws)
    path = ws.path("reports", f"{kind}_{args.variant}.tsv")
    if not args.force and ws.is_complete(path):
        _say(args)(f"{kind}: {path} is complete, skipping (use --force to redo)")
        return 0
    fn = evaluate_variant if kind == "eval" else topn_variant
    report: EvalReport = fn(args.variant, cfg, prep, ws)
    write_report(ws, path, report)
    ws.record(kind, path)
    _say(args)(report.table(f"{kind} {args.variant}"))
    return 0


def cmd_eval(cfg, ws, args) -> int:
    return _report_cmd("eval", cfg, ws, args)


def cmd_topn(cfg, ws, args) -> int:
    return _report_cmd("topn", cfg, ws, args)


def cmd_bench(cfg: RunConfig, ws: Workspace, args) -> int:
    say = _say(args)
    timing_path, meters_path = ws.path("reports", "timing.tsv"), ws.path("reports", "meters.tsv")
    if not args.force and ws.is_complete(timing_path, meters_path):
        say("bench: reports are complete, skipping (use --force to redo)")
        return 0
    prep = load_prepared_workspace(cfg, ws)
    lite = load_variant("lite", cfg, prep, ws)
    if not attach_cache(lite, prep, ws, log=say):
        lite.use_cache(lite.build_cache(prep.vocab))
    beam_model = load_variant("full_beam", cfg, prep, ws)
    b = cfg.bench
    hists = [prep.split.history(p, "test") for p in range(len(prep.split))]
    batches = history_batches(hists, b.batch_size, b.batches + b.warmup)
    reports = [time_components(LitePipeline(lite, k=b.k), batches, b.warmup, b.reps)]
    for width in b.beam_widths:
        pipe = BeamPipeline(beam_model, prep.gen_vocab, prep.num_items, beam_width=width, k=min(b.k, width))
        reports.append(time_components(pipe, batches, b.warmup, b.reps))
    for rep in reports:
        say(rep.table())
    ws.write(timing_path, lambda p: write_timing_tsv(p, reports))

    window = cfg.rec.max_seq_len
    cached = count_redundant_encodings(lite, batches, cached=True)
    fresh = count_redundant_encodings(lite, batches, cached=False)
    rows = [
        ("input_length", "hierarchical", measure_input_length("hierarchical", hists, window)),
        ("input_length", "id_tokens", measure_input_length("id_tokens", hists, window, vocab=prep.gen_vocab)),
        ("input_length", "title_tokens", measure_input_length("title_tokens", hists, window, item_tokens=prep.item_tokens)),
        ("encoder_calls", "cached", cached.encoder_calls),
        ("encoder_calls", "uncached", fresh.encoder_calls),
        ("occurrences", "total", fresh.occurrences),
        ("distinct_items", "total", fresh.distinct_items),
        ("redundancy_ratio", "cached", cached.ratio),
        ("redundancy_ratio", "uncached", fresh.ratio),
        ("max_item_occurrences", "uncached", max(fresh.per_item_calls.values(), default=0)),
    ]

    def write_meters(p: Path) -> None:
        with p.open("w", encoding="utf-8") as f:
            f.write("meter\tpipeline\tvalue\n")
            for meter, pipe, value in rows:
                f.write(f"{meter}\t{pipe}\t{value}\n")

    ws.write(meters_path, write_meters)
    ws.record("bench", timing_path, meters_path)
    for meter, pipe, value in rows:
        say(f"{meter:<22}{pipe:<14}{value}")
    return 0


def cmd_ablate(cfg: RunConfig, ws: Workspace, args) -> int:
    from .bench import TokenHeadPipeline

    say = _say(args)
    prep = load_prepared_workspace(cfg, ws)
    hists = [prep.split.history(p, "test") for p in range(len(prep.split))]
    batches = history_batches(hists, cfg.bench.batch_size, 10 + cfg.bench.warmup)
    reports, timings = {}, {}
    for name in ALL_VARIANTS:
        model, _ = train_variant(name, cfg, prep, ws, force=args.force, log=say)
        reports[DISPLAY.get(name, name)] = evaluate_variant(name, cfg, prep, ws, model=model)
        if name == "full_beam":
            pipe = BeamPipeline(model, prep.gen_vocab, prep.num_items, beam_width=cfg.gen.beam_width, k=cfg.bench.k)
        elif name in ("wo_d", "wo_d_tid"):
            pipe = TokenHeadPipeline(model, tokenizer_for(name, model, prep), k=cfg.bench.k, name=name)
        else:
            model.use_cache(model.build_cache(prep.vocab))
            pipe = LitePipeline(model, k=cfg.bench.k, name=name)
        timings[DISPLAY.get(name, name)] = time_components(pipe, batches, cfg.bench.warmup, 1).per_batch_ms()
    path = ws.path("reports", "ablation.tsv")

    def write(p: Path) -> None:
        with p.open("w", encoding="utf-8") as f:
            f.write("variant\tR@10\tN@10\tR@20\tN@20\tms_per_batch\n")
            for name, rep in reports.items():
                m = rep.metrics
                f.write(f"{name}\t{m['R@10']:.6f}\t{m['N@10']:.6f}\t{m['R@20']:.6f}\t{m['N@20']:.6f}\t{timings[name]:.3f}\n")

    ws.write(path, write)
    ws.record("ablate", path)
    say(summarize(reports))
    return 0


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "precompute": cmd_precompute, "eval": cmd_eval,
    "topn": cmd_topn, "bench": cmd_bench, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: $LLREC_CONFIG)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--force", action="store_true", help="redo work even if outputs are complete")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="literec", description="Hierarchical sequential recommender toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="filter, index and split a dataset")
    p.add_argument("--data")
    p.add_argument("--format", choices=("movielens-dat", "jsonl", "tsv"))
    p.add_argument("--kcore", type=int)
    p.add_argument("--items", help="item metadata file (default: sibling of --data)")
    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--strategy", choices=("sampling", "all"))
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", default="lite", choices=ALL_VARIANTS + ("all",))
    sub.add_parser("precompute", parents=[common], help="write the item embedding cache")
    helps = {"eval": "Recall@k and NDCG@k over the whole catalog", "topn": "ranking against sampled negatives"}
    for name, extra in (("eval", "--k"), ("topn", "--negatives")):
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument(extra, type=str if extra == "--k" else int)
        p.add_argument("--variant", default="lite", choices=ALL_VARIANTS)
    p = sub.add_parser("bench", parents=[common], help="timing, input-length and redundancy meters")
    p.add_argument("--beam", help="comma-separated beam widths")
    p.add_argument("--reps", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--warmup", type=int)
    p = sub.add_parser("ablate", parents=[common], help="train and compare every variant")
    p.add_argument("--epochs", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args.config, _overrides(args))
        ws = Workspace(cfg.out)
        return COMMANDS[args.command](cfg, ws, args)
    except (LiteRecError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
