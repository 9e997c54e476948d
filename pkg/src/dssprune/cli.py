"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 run error.
Diagnostics go to stderr, per-stage summaries to stdout, artifacts to files.
The default output directory is ``$DSSPRUNE_OUT`` or ``./runs``.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import save_dataset
from .errors import ConfigError, FormatError, InputError, RunError
from .experiment import (
    BASELINE_TAG,
    DomainSplit,
    evaluate,
    finetune,
    load_domains,
    prepare_baseline,
    run_pipeline,
    run_sweep,
)
from .metrics import MetricsRecord, append_metrics, read_metrics
from .plot import render_sparsity_plot
from .pruning import apply_prune, make_plan, sparsity_report
from .saliency import Method, collect_stats, load_stats, save_stats, score_layers

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3
OUT_ENV = "DSSPRUNE_OUT"

log = logging.getLogger("dssprune")


class DataError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "sparsity", None) is not None:
        overrides.append(f"prune.sparsity_ratio={args.sparsity}")
    if getattr(args, "method", None) is not None:
        overrides.append(f"prune.score_method={args.method}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _domains(cfg: ExperimentConfig) -> tuple[DomainSplit, DomainSplit]:
    try:
        return load_domains(cfg.data)
    except (OSError, FormatError, InputError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from exc


def _ratio_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse ratio list {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse integer list {text!r}") from None


# --------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    source, target = _domains(cfg)
    split = target.train if args.split == "train" else target.eval
    out = Path(args.output) if args.output else _out_dir(args) / f"mnistm_{args.split}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    print(f"synth: wrote {len(split)} {args.split} samples to {out}")
    print(f"sha256 {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    source, target = _domains(cfg)
    out = _out_dir(args)
    base = prepare_baseline(cfg.train, source, target, out, cfg.data.eval_batch_size)
    for i, loss in enumerate(base.loss_history):
        print(f"epoch {i}: loss {loss:.4f}")
    print(f"wrote {out / 'trained.ckpt'}")
    return EXIT_OK


def _stats_for(args, cfg, model, source, target):
    if args.stats_dir:
        d = Path(args.stats_dir)
        try:
            return load_stats(d / "stats_source.bin"), load_stats(d / "stats_target.bin")
        except (OSError, FormatError) as exc:
            raise DataError(str(exc)) from exc
    src = collect_stats(model, source.train, sample_cap=cfg.train.sample_cap)
    tgt = collect_stats(model, target.train, sample_cap=cfg.train.sample_cap)
    return src, tgt


def cmd_score(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    source, target = _domains(cfg)
    out = _out_dir(args)
    src, tgt = _stats_for(args, cfg, model, source, target)
    save_stats(src, out / "stats_source.bin")
    save_stats(tgt, out / "stats_target.bin")
    scores = score_layers(model, cfg.train.score_method, src, tgt, seed=cfg.train.seed)
    lines = [f"{lid}: {' '.join(f'{v:.6f}' for v in s.values)}" for lid, s in scores.items()]
    (out / "scores.txt").write_text(f"# method={cfg.train.score_method.value}\n" + "\n".join(lines) + "\n")
    print(f"score: {cfg.train.score_method.value} over {len(scores)} layers, {src.sample_count} source / "
          f"{tgt.sample_count} target samples -> {out / 'scores.txt'}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    src = tgt = None
    if cfg.train.score_method in (Method.DSS, Method.REVERSE_DSS):
        source, target = (None, None) if args.stats_dir else _domains(cfg)
        src, tgt = _stats_for(args, cfg, model, source, target)
    scores = score_layers(model, cfg.train.score_method, src, tgt, seed=cfg.train.seed)
    plan = make_plan(scores, cfg.train.sparsity_ratio)
    pruned = apply_prune(model, plan)
    plan.save(out / "plan.txt")
    save_checkpoint(pruned, out / "pruned.ckpt")
    print(f"prune: {sparsity_report(model, pruned, plan).summary()}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    source, _ = _domains(cfg)
    out = _out_dir(args)
    finetune(model, source.train, cfg.train)
    save_checkpoint(model, out / "finetuned.ckpt")
    print(f"finetune: {cfg.train.finetune_epochs} epochs at lr {cfg.train.finetune_lr} -> {out / 'finetuned.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _load_model(args.checkpoint)
    source, target = _domains(cfg)
    bs = cfg.data.eval_batch_size
    src_acc, tgt_acc = evaluate(model, source.eval, bs), evaluate(model, target.eval, bs)
    print(f"eval: source acc {src_acc:.4f}, target acc {tgt_acc:.4f}")
    if args.metrics:
        rec = MetricsRecord(BASELINE_TAG, 0.0, cfg.train.seed, src_acc, tgt_acc, tgt_acc, 0.0)
        append_metrics([rec], args.metrics)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    source, target = _domains(cfg)
    out = _out_dir(args)
    (out / "config.ini").write_text(dump_config(cfg))
    rec = run_pipeline(cfg.train, source, target, out, eval_batch_size=cfg.data.eval_batch_size)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    append_metrics([rec], metrics)
    print(
        f"pipeline: {rec.method_tag} sparsity {rec.sparsity_ratio} seed {rec.seed}: source {rec.source_acc:.4f}, "
        f"target before ft {rec.target_acc_before_ft:.4f}, after ft {rec.target_acc_after_ft:.4f} -> {metrics}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ratios = _ratio_list(args.ratios)
    seeds = _int_list(args.seeds)
    methods = [Method.parse(m) for m in args.methods.split(",") if m.strip()]
    source, target = _domains(cfg)
    out = _out_dir(args)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    result = run_sweep(cfg.train, ratios, methods, seeds, source, target, out, metrics, cfg.data.eval_batch_size)
    svg = out / "sparsity_plot.svg"
    svg.write_text(render_sparsity_plot(read_metrics(metrics) if metrics.exists() else result.records))
    print(f"sweep: {len(result.records)} records, {len(result.failures)} failures -> {metrics}, {svg}")
    for ratio, method, seed, msg in result.failures:
        print(f"sweep: failed ratio={ratio} method={method} seed={seed}: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUN


def cmd_plot(args) -> int:
    try:
        records = read_metrics(args.metrics_csv)
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from exc
    Path(args.out_svg).write_text(render_sparsity_plot(records))
    print(f"plot: {len(records)} records -> {args.out_svg}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dssprune", description="Domain-similarity channel pruning toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_checkpoint=False, with_stats=False):
        p.add_argument("--config", help="INI config file (see configs/default.ini)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr=0.01")
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, help="shortcut for train.seed")
        if with_checkpoint:
            p.add_argument("--checkpoint", required=True)
        if with_stats:
            p.add_argument("--stats-dir", help="reuse stats_source.bin / stats_target.bin from this directory")

    p = sub.add_parser("synth", help="write the synthesized target domain to a dataset container")
    common(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the baseline on the source domain")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="collect activation stats and score channels")
    common(p, with_checkpoint=True, with_stats=True)
    p.add_argument("--method")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", help="select channels and write the pruned checkpoint")
    common(p, with_checkpoint=True, with_stats=True)
    p.add_argument("--method")
    p.add_argument("--sparsity", type=float)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="finetune a (pruned) checkpoint on the source domain")
    common(p, with_checkpoint=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on both domains")
    common(p, with_checkpoint=True)
    p.add_argument("--metrics", help="append a baseline record to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="train, score, prune, finetune and evaluate")
    common(p)
    p.add_argument("--method")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--metrics", help="metrics CSV (default <out-dir>/metrics.csv)")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="pipelines over ratios x methods x seeds, plus the plot")
    common(p)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--methods", default="DSS,L2")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--metrics", help="metrics CSV (default <out-dir>/metrics.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render a metrics CSV as an SVG chart")
    p.add_argument("metrics_csv")
    p.add_argument("out_svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    log.propagate = False
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RunError, InputError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
