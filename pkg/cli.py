"""
Command-line entry point for the zero-shot spoken intent pipeline
Subcommands: generate, train, build-db, classify, evaluate, experiment
"""

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from tabulate import tabulate

from config import RunConfig, config_to_dict, dump_config, load_config
from src.checkpoint import load_checkpoint, save_checkpoint
from src.data_generation import generate_corpus, load_bot, load_corpus, save_corpus
from src.exceptions import ConfigError, DependencyError, ZIntentError
from src.harness import (
    TEACHER_FOR,
    check_variant,
    embed_corpus_bot,
    extraction_pipeline,
    layer_checks,
    noise_sweep,
    run_layer_ablation,
    run_sample_sweep,
    run_variant_grid,
    summary_table,
    sweep_checks,
    sweep_knee,
    sweep_trend,
    synth_trained_upper_bound,
    train_model,
    trend_checks,
    write_reports,
)
from src.utils import MetricsTracker, create_dirs, format_time, setup_logging
from src.zeroshot import EmbeddingDatabase, classify_batch, evaluate_zero_shot

logger = logging.getLogger("zintent")


def banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def cmd_generate(args, cfg: RunConfig) -> int:
    banner("GENERATE CORPUS")
    generated = generate_corpus(cfg.corpus)
    save_corpus(generated, cfg.paths.data_dir, cfg.zeroshot.bot_sentences_per_intent)
    for name in ("train", "dev", "test"):
        n_seen = len(generated.seen.split(name))
        n_unseen = len(generated.unseen.split(name))
        print(f"  {name}: {n_seen} seen, {n_unseen} unseen utterances")
    print(f"  bot pool: {len(generated.bot_pool)} sentences")
    print(f"Corpus saved to: {cfg.paths.data_dir}")
    return 0


def _teacher_checkpoint(args, cfg: RunConfig, variant: str):
    path = args.teacher or str(Path(cfg.paths.output_dir) / f"{TEACHER_FOR[variant]}.ckpt")
    if not Path(path).exists():
        raise DependencyError(
            f"{variant} needs a trained {TEACHER_FOR[variant]} teacher checkpoint; "
            f"pass --teacher or train it first (looked for {path})"
        )
    ckpt = load_checkpoint(path)
    if ckpt.kind != "teacher":
        raise DependencyError(f"{path} holds a {ckpt.kind} checkpoint, not a teacher")
    return ckpt.model


def cmd_train(args, cfg: RunConfig) -> int:
    variant = check_variant(args.variant)
    banner(f"TRAIN {variant.upper()}")
    generated = load_corpus(cfg.paths.data_dir)
    teacher = _teacher_checkpoint(args, cfg, variant) if variant in TEACHER_FOR else None

    out = Path(cfg.paths.output_dir)
    # one row per epoch, appended as soon as the epoch ends
    tracker = MetricsTracker(str(out / f"{variant}_metrics.csv"))
    start = time.time()
    trained = train_model(variant, generated.seen, cfg, teacher, tracker)
    ckpt_path = out / f"{variant}.ckpt"
    fingerprint = save_checkpoint(str(ckpt_path), trained.model, variant, config_to_dict(cfg))

    print(f"Training time: {format_time(time.time() - start)}")
    print(f"Checkpoint: {ckpt_path} ({fingerprint[:16]})")
    dev_acc = trained.accuracy(generated.seen.split("dev"))
    if dev_acc is not None:
        print(f"Final dev accuracy: {dev_acc!r}")
    return 0


def cmd_build_db(args, cfg: RunConfig) -> int:
    banner("BUILD EMBEDDING DATABASE")
    ckpt = load_checkpoint(args.checkpoint)
    bot_path = args.bot or str(Path(cfg.paths.data_dir) / "bot_unseen.jsonl")
    bot = load_bot(bot_path)
    layer = args.layer or cfg.zeroshot.layer
    pipeline = extraction_pipeline(ckpt.model, layer)
    db = embed_corpus_bot(pipeline, bot, cfg.corpus)
    out = args.out or str(Path(cfg.paths.output_dir) / f"{ckpt.variant or ckpt.kind}_{layer}.edb")
    db.save(out)
    print(f"  entries: {len(db)}  dim: {db.dim}  layer: {db.layer.value}")
    print(f"Database saved to: {out}")
    return 0


def _query_frames(args, cfg: RunConfig) -> np.ndarray:
    if args.from_corpus:
        generated = load_corpus(cfg.paths.data_dir)
        for corpus in (generated.seen, generated.unseen):
            try:
                return corpus.get(args.from_corpus).frames
            except KeyError:
                continue
        raise ConfigError(f"utterance {args.from_corpus!r} is not in the corpus")
    if not Path(args.audio).exists():
        raise DependencyError(f"audio file not found: {args.audio}")
    return np.load(args.audio)


def cmd_classify(args, cfg: RunConfig) -> int:
    db = EmbeddingDatabase.load(args.db)
    ckpt = load_checkpoint(args.checkpoint)
    pipeline = extraction_pipeline(ckpt.model, db.layer)
    k = args.top_k or cfg.zeroshot.top_k
    prediction = classify_batch(db, pipeline, [_query_frames(args, cfg)], k)[0]
    for intent, similarity in prediction.top_k:
        print(f"{intent}\t{similarity!r}")
    logger.info("predicted intent %d via %s (similarity %.6f)",
                prediction.intent, prediction.best_sentence_id, prediction.similarity)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    banner("ZERO-SHOT EVALUATION")
    db = EmbeddingDatabase.load(args.db)
    ckpt = load_checkpoint(args.checkpoint)
    pipeline = extraction_pipeline(ckpt.model, db.layer)
    generated = load_corpus(cfg.paths.data_dir)
    test = {"unseen": generated.unseen_test, "mix": generated.mix_test,
            "seen": lambda: generated.seen.split("test")}[args.split]()
    result = evaluate_zero_shot(db, test, pipeline)
    print(f"Accuracy ({args.split}, {len(test)} utterances): {result.accuracy!r}")
    print(tabulate(result.confusion, headers="keys"))
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    banner("EXPERIMENT")
    if (Path(cfg.paths.data_dir) / "corpus.json").exists():
        generated = load_corpus(cfg.paths.data_dir)
        cfg = dataclasses.replace(cfg, corpus=generated.spec)
    else:
        logger.info("no corpus in %s; generating one in memory", cfg.paths.data_dir)
        generated = generate_corpus(cfg.corpus)

    out = cfg.paths.reports_dir
    if args.ablation == "layers":
        table = run_layer_ablation(generated, cfg)
        checks = layer_checks(table, 1.0 / max(1, len(generated.unseen_intents)))
        write_reports([], out, {"layers": table}, checks)
        print(tabulate(table, headers="keys", showindex=False, floatfmt=".4f"))
        for name, holds in sorted(checks.items()):
            print(f"  {name}: {holds}")
    elif args.ablation == "samples":
        table = run_sample_sweep(generated, cfg)
        checks = sweep_checks(table)
        write_reports([], out, {"sweep": table}, checks)
        print(tabulate(table, headers="keys", showindex=False, floatfmt=".4f"))
        print(f"Knee (within 0.01 of best): {sweep_knee(table)} sentences per intent")
        print(f"Spearman(size, mean): {sweep_trend(table, 'mean'):.4f}")
        print(f"Spearman(size, spread): {sweep_trend(table):.4f}")
        for name, holds in sorted(checks.items()):
            print(f"  {name}: {holds}")
    else:
        variants = args.grid.split(",") if args.grid else None
        reports = run_variant_grid(generated, cfg, variants)
        tables = {}
        if generated.unseen_intents:
            first = {r.variant: r.pipelines[r.seeds[0]] for r in reports if r.seeds}
            tables["noise"] = noise_sweep(first, generated, cfg.experiment.noise_levels, cfg)
            if any(v != "frozen" for v in first):
                bot = generated.unseen_bot(cfg.zeroshot.bot_sentences_per_intent)
                anchor = synth_trained_upper_bound(bot, generated.unseen_test(), cfg)
                tables["anchor"] = pd.DataFrame([{"accuracy": anchor}])
        write_reports(reports, out, tables)
        print(summary_table(reports))
        for name, holds in sorted(trend_checks(reports).items()):
            print(f"  {name}: {holds}")
    print(f"Reports saved to: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Zero-shot spoken intent classification")
    parser.add_argument("--config", type=str, default=None,
                        help="TOML config file (defaults apply when omitted)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Generate the synthetic corpus and bot files")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="Train one model variant")
    p.add_argument("--variant", required=True, help="frozen, audio-only, mm, mm-cl, stu-mm or stu-mm-cl")
    p.add_argument("--teacher", type=str, default=None, help="Teacher checkpoint for stu-* variants")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-db", help="Pre-compute the embedding database of a bot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bot", type=str, default=None, help="Bot definition (jsonl)")
    p.add_argument("--layer", choices=["pooled", "projection", "feedforward"], default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("classify", help="Classify one utterance against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    query = p.add_mutually_exclusive_group(required=True)
    query.add_argument("--audio", type=str, help="Frame matrix saved with numpy (.npy)")
    query.add_argument("--from-corpus", type=str, help="Utterance id from the generated corpus")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="Zero-shot accuracy of a database on a corpus test split")
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["unseen", "mix", "seen"], default="unseen")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="Run the variant grid or an ablation")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--grid", type=str, default=None, help="Comma-separated variants")
    mode.add_argument("--ablation", choices=["layers", "samples"], default=None)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        create_dirs([cfg.paths.output_dir, cfg.paths.logging_dir, cfg.paths.reports_dir])
        setup_logging(str(Path(cfg.paths.logging_dir) / "zintent.log"))
        logger.info("command: %s", args.command)
        logger.info("resolved config:\n%s", dump_config(cfg))
        return args.func(args, cfg)
    except ZIntentError as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
