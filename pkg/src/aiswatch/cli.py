"""Command-line surface: ingest, synth, train, eval, infer, serve."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import report
from .changepoint import CpdConfig
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, EngineConfig
from .engine import serve_stream, start_metrics_server, tcp_lines
from .features import FeatureConfig
from .ingest import IngestError, format_record, normalize_message, parse_record
from .model import (
    ModelConfig,
    production_activity_config,
    production_entity_config,
    toy_config,
)
from .synth import (
    InvalidSpec,
    activity_examples,
    entity_examples,
    generate_dataset,
    tracks_to_stream,
)
from .taxonomy import ACTIVITY_CLASSES, ENTITY_CLASSES
from .training import (
    EmptyDataset,
    TrainConfig,
    evaluate,
    load_dataset_jsonl,
    save_dataset_jsonl,
    train_and_select,
)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError, CheckpointError, EmptyDataset,
            InvalidSpec, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aiswatch",
        description="Streaming AIS vessel-behavior classification engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and convert position reports")
    p.add_argument("input", help="input file, or - for stdin")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv",
                   help="input record format (default csv)")
    p.add_argument("--to", choices=["csv", "jsonl"], default="jsonl",
                   help="output record format (default jsonl)")
    p.add_argument("--out", default="-", help="output file (default stdout)")
    p.add_argument("--clamp-sog", type=float, default=40.0, metavar="KN",
                   help="clamp ceiling for sentinel speeds (default 40)")
    p.add_argument("--strict", action="store_true",
                   help="exit nonzero if any record is rejected")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-s", type=int, default=7200)
    p.add_argument("--cadence-s", type=float, default=60.0)
    p.add_argument("--report", action="store_true",
                   help="also render a track gallery figure")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train an activity or entity model")
    p.add_argument("--dataset", required=True, help="labeled JSONL dataset")
    p.add_argument("--task", choices=["activity", "entity"], default="activity")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--scale", choices=["toy", "paper-scale"], default="toy",
                   help="model size preset (default toy)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--n-anchor", type=int, default=None,
                   help="feature anchor count (default 9)")
    for flag, dest in [("--d-model", "d_model"), ("--n-heads", "n_heads"),
                       ("--d-ff", "d_ff"), ("--cpe-layers", "n_cpe_layers"),
                       ("--cnn-layers", "n_cnn_layers"),
                       ("--tf-layers", "n_transformer_layers"),
                       ("--max-seq-len", "max_seq_len")]:
        p.add_argument(flag, dest=dest, type=int, default=None)
    p.add_argument("--report", default=None, metavar="DIR",
                   help="write training_log.csv and curves.png here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="confusion report for a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", default=None, metavar="DIR",
                   help="write confusion.csv and confusion.png here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="batch file of reports -> events")
    _engine_flags(p)
    p.add_argument("--input", required=True, help="record file, or - for stdin")
    p.add_argument("--out", default="-", help="event output (default stdout)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("serve", help="stream stdin or TCP -> JSONL events")
    _engine_flags(p)
    p.add_argument("--tcp", type=int, default=None, metavar="PORT",
                   help="accept one TCP client instead of reading stdin")
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=_cmd_serve)

    return parser


def _engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML engine config")
    p.add_argument("--checkpoint", default=None, help="activity checkpoint")
    p.add_argument("--entity-checkpoint", default=None)
    p.add_argument("--fences", default=None, help="geofence JSON file")
    p.add_argument("--format", choices=["csv", "jsonl"], default=None,
                   help="input record format")
    p.add_argument("--entity-min-context", type=int, default=None)
    p.add_argument("--entity-refresh-increment", type=int, default=None)
    p.add_argument("--queue-depth", type=int, default=None)
    p.add_argument("--metrics-port", type=int, default=None,
                   help="serve metrics JSON over HTTP on this port (0 picks one)")
    p.add_argument("--time-gap-s", type=int, default=None)
    p.add_argument("--sog-window-k", type=int, default=None)
    p.add_argument("--sog-shift-kn", type=float, default=None)
    p.add_argument("--min-messages", type=int, default=None)
    p.add_argument("--fishing-max-sog", type=float, default=None, metavar="KN")
    p.add_argument("--confidence-threshold", type=float, default=None)


def _engine_config(args) -> EngineConfig:
    cfg = EngineConfig.from_yaml(args.config) if args.config else EngineConfig()
    cfg = cfg.with_overrides(
        activity_checkpoint=args.checkpoint,
        entity_checkpoint=args.entity_checkpoint,
        fences=args.fences,
        input_format=args.format,
        entity_min_context=args.entity_min_context,
        entity_refresh_increment=args.entity_refresh_increment,
        queue_depth=args.queue_depth,
        metrics_port=args.metrics_port,
    )
    cpd_over = {k: v for k, v in [
        ("time_gap_threshold_s", args.time_gap_s),
        ("sog_window_k", args.sog_window_k),
        ("sog_shift_threshold_kn", args.sog_shift_kn),
        ("min_messages", args.min_messages)] if v is not None}
    if cpd_over:
        cfg = replace(cfg, cpd=replace(cfg.cpd, **cpd_over))
    post_over = {k: v for k, v in [
        ("fishing_max_sog_kn", args.fishing_max_sog),
        ("confidence_threshold", args.confidence_threshold)] if v is not None}
    if post_over:
        cfg = replace(cfg, post=replace(cfg.post, **post_over))
    return cfg


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8")


def _iter_input(path: str):
    if path == "-":
        yield from sys.stdin
    else:
        with open(path, encoding="utf-8") as fh:
            yield from fh


def _cmd_ingest(args) -> int:
    out = _open_out(args.out)
    rejected = accepted = 0
    try:
        for lineno, raw in enumerate(_iter_input(args.input), start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                msg = normalize_message(parse_record(raw, fmt=args.format),
                                        clamp_max_kn=args.clamp_sog)
            except IngestError as exc:
                rejected += 1
                print(f"line {lineno}: {exc}", file=sys.stderr)
                continue
            accepted += 1
            out.write(format_record(msg, fmt=args.to) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"accepted {accepted}, rejected {rejected}", file=sys.stderr)
    return 1 if (args.strict and rejected) else 0


def _cmd_synth(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tracks = generate_dataset(args.n_per_class, seed=args.seed,
                              duration_s=args.duration_s,
                              cadence_mean_s=args.cadence_s)
    save_dataset_jsonl(outdir / "activity.jsonl", activity_examples(tracks))
    save_dataset_jsonl(outdir / "entity.jsonl", entity_examples(tracks))
    with (outdir / "stream.csv").open("w", encoding="utf-8") as fh:
        for msg in tracks_to_stream(tracks):
            fh.write(format_record(msg, fmt="csv") + "\n")
    if args.report:
        report.plot_track_gallery(outdir / "gallery.png", tracks)
    print(f"wrote {len(tracks)} tracks to {outdir}", file=sys.stderr)
    return 0


def _model_config(args, n_classes: int, feature_width: int) -> ModelConfig:
    if args.scale == "paper-scale":
        base = (production_activity_config(feature_width=feature_width)
                if args.task == "activity"
                else production_entity_config(feature_width=feature_width))
    else:
        base = toy_config(n_classes=n_classes, feature_width=feature_width)
    arch = {k: getattr(args, k) for k in
            ("d_model", "n_heads", "d_ff", "n_cpe_layers", "n_cnn_layers",
             "n_transformer_layers", "max_seq_len")
            if getattr(args, k) is not None}
    return replace(base, **arch) if arch else base


def _cmd_train(args) -> int:
    dataset = load_dataset_jsonl(args.dataset)
    class_names = ACTIVITY_CLASSES if args.task == "activity" else ENTITY_CLASSES
    fcfg = FeatureConfig(n_anchor=args.n_anchor) if args.n_anchor \
        else FeatureConfig()
    mcfg = _model_config(args, len(class_names), fcfg.feature_width)
    tdefaults = TrainConfig()
    tcfg = TrainConfig(
        batch_size=args.batch_size or tdefaults.batch_size,
        learning_rate=args.lr or tdefaults.learning_rate,
        n_epochs=args.epochs or tdefaults.n_epochs,
        seed=tdefaults.seed if args.seed is None else args.seed,
        val_fraction=(tdefaults.val_fraction if args.val_fraction is None
                      else args.val_fraction),
    )
    result = train_and_select(
        dataset, mcfg, tcfg, fcfg, class_names,
        log_fn=lambda row: print(
            f"epoch {row.epoch}: train_loss {row.train_loss:.4f} "
            f"val_loss {row.val_loss:.4f}", file=sys.stderr))
    print(f"selected epoch {result.best_epoch} "
          f"(min validation loss)", file=sys.stderr)
    ckpt = Checkpoint(model_config=mcfg, feature_config=fcfg,
                      class_names=class_names, weights=result.weights)
    save_checkpoint(args.out, ckpt)
    print(f"wrote checkpoint {args.out} "
          f"({result.weights.n_params} parameters)", file=sys.stderr)
    if args.report:
        rdir = Path(args.report)
        rdir.mkdir(parents=True, exist_ok=True)
        report.write_training_log_csv(rdir / "training_log.csv", result.log)
        report.plot_training_curves(rdir / "curves.png", result.log,
                                    result.best_epoch)
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset_jsonl(args.dataset)
    result = evaluate(ckpt.model_config, ckpt.weights, dataset,
                      ckpt.feature_config, ckpt.class_names)
    print(f"accuracy {result.accuracy:.4f} on {int(result.confusion.sum())} "
          f"examples")
    for name, recall in result.per_class_recall.items():
        shown = "n/a" if recall is None else f"{recall:.4f}"
        print(f"recall[{name}] {shown}")
    if args.report:
        rdir = Path(args.report)
        rdir.mkdir(parents=True, exist_ok=True)
        report.write_confusion_csv(rdir / "confusion.csv", result)
        report.plot_confusion(rdir / "confusion.png", result)
    return 0


def _cmd_infer(args) -> int:
    cfg = _engine_config(args)
    engine = cfg.build_engine()
    out = _open_out(args.out)
    try:
        stats = serve_stream(engine, _iter_input(args.input), out,
                             fmt=cfg.input_format, queue_depth=cfg.queue_depth)
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"read {stats.lines_read} records, emitted {stats.events_emitted} "
          f"events, {stats.dead_letters} dead-lettered", file=sys.stderr)
    return 0


def _cmd_serve(args) -> int:
    cfg = _engine_config(args)
    engine = cfg.build_engine()
    server = None
    if cfg.metrics_port is not None:
        server = start_metrics_server(engine, port=cfg.metrics_port,
                                      host=args.host)
        print(f"metrics on http://{args.host}:{server.server_address[1]}/",
              file=sys.stderr)
    lines = tcp_lines(args.host, args.tcp) if args.tcp is not None else sys.stdin
    try:
        stats = serve_stream(engine, lines, sys.stdout,
                             fmt=cfg.input_format, queue_depth=cfg.queue_depth)
    finally:
        if server is not None:
            server.shutdown()
    print(f"stream closed: {stats.lines_read} records, "
          f"{stats.events_emitted} events", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
