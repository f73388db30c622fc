"""
Experiment orchestration
Variant grid, extraction-layer ablation, bot sample-size sweep, the
synthesized-audio supervised anchor and the sanity checks around them
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats
from tabulate import tabulate

from config import CorpusSpec, RunConfig
from src.data_generation import GeneratedCorpus, render_natural
from src.encoders import AudioBackbone, Corpus, Utterance
from src.exceptions import ConfigError
from src.numerics import derive_rng
from src.student import StudentModel, student_accuracy, student_train
from src.teacher import TeacherModel, teacher_accuracy, teacher_train
from src.utils import MetricsTracker
from src.zeroshot import (
    BotDefinition,
    EmbeddingDatabase,
    ExtractionLayer,
    ExtractionPipeline,
    embed_bot,
    evaluate_zero_shot,
    synthesize_pseudo_audio,
)

logger = logging.getLogger(__name__)

VARIANTS = ("frozen", "audio-only", "mm", "mm-cl", "stu-mm", "stu-mm-cl")
TEACHER_VARIANTS = ("mm", "mm-cl")
TEACHER_FOR = {"stu-mm": "mm", "stu-mm-cl": "mm-cl"}

Model = Union[TeacherModel, StudentModel, AudioBackbone]


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return variant


def seeded_config(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of cfg whose training order and head initialization follow `seed`"""
    return dataclasses.replace(
        cfg,
        training=dataclasses.replace(cfg.training, seed=seed),
        teacher=dataclasses.replace(cfg.teacher, head_seed=cfg.teacher.head_seed + seed),
        student=dataclasses.replace(cfg.student, head_seed=cfg.student.head_seed + seed),
    )


@dataclass
class TrainedModel:
    variant: str
    model: Model
    tracker: MetricsTracker = field(default_factory=MetricsTracker)

    def pipeline(self, layer="pooled") -> ExtractionPipeline:
        return extraction_pipeline(self.model, layer)

    def accuracy(self, utterances: Sequence[Utterance]) -> Optional[float]:
        if isinstance(self.model, TeacherModel):
            return teacher_accuracy(self.model, utterances)
        if isinstance(self.model, StudentModel):
            return student_accuracy(self.model, utterances)
        return None


def extraction_pipeline(model: Model, layer="pooled") -> ExtractionPipeline:
    if isinstance(model, AudioBackbone):
        return ExtractionPipeline(model, layer)
    return ExtractionPipeline(model.audio_backbone, layer, model.extraction_heads())


def train_model(variant: str, corpus: Corpus, cfg: RunConfig,
                teacher: Optional[TeacherModel] = None,
                tracker: Optional[MetricsTracker] = None) -> TrainedModel:
    """
    Build and train one variant on the seen corpus

    `frozen` returns the untrained backbone; `stu-*` variants need the matching
    teacher. Epoch metrics go to `tracker` when given.
    """
    check_variant(variant)
    if variant == "frozen":
        backbone = AudioBackbone.from_seed(cfg.encoders.audio_seed, cfg.encoders.d_raw_audio,
                                           cfg.encoders.d_hid, layer2_trainable=False)
        return TrainedModel(variant, backbone)

    if variant in TEACHER_VARIANTS:
        teacher_cfg = dataclasses.replace(cfg.teacher, use_contrastive=(variant == "mm-cl"))
        model = TeacherModel.build(corpus.intents, corpus.vocab_size, cfg.encoders, teacher_cfg)
        model, tracker = teacher_train(model, corpus, cfg.training, tracker)
        return TrainedModel(variant, model, tracker)

    if variant == "audio-only":
        student_cfg = dataclasses.replace(cfg.student, distill=False)
        student = StudentModel.build(corpus.intents, cfg.encoders, student_cfg)
        student, tracker = student_train(student, None, corpus, cfg.training, tracker)
        return TrainedModel(variant, student, tracker)

    if teacher is None:
        raise ConfigError(f"{variant} needs a trained {TEACHER_FOR[variant]} teacher")
    student_cfg = dataclasses.replace(cfg.student, distill=True)
    student = StudentModel.build(corpus.intents, cfg.encoders, student_cfg, teacher)
    student, tracker = student_train(student, teacher, corpus, cfg.training, tracker)
    return TrainedModel(variant, student, tracker)


@dataclass
class SeedResult:
    seed: int
    supervised_dev_acc: Optional[float]
    supervised_test_acc: Optional[float]
    zeroshot_unseen_acc: Optional[float]
    zeroshot_mix_acc: Optional[float]
    command_word_acc: float
    chance_acc: Optional[float]


@dataclass
class ExperimentReport:
    """One variant of the grid across all seeds"""

    variant: str
    seeds: List[int] = field(default_factory=list)
    per_seed: List[SeedResult] = field(default_factory=list)
    # extraction pipeline and trained model of every seed, kept for the ablations
    pipelines: Dict[int, ExtractionPipeline] = field(default_factory=dict, repr=False)
    models: Dict[int, TrainedModel] = field(default_factory=dict, repr=False)

    def mean(self, name: str) -> Optional[float]:
        values = [getattr(r, name) for r in self.per_seed]
        if not values or any(v is None for v in values):
            return None
        return float(np.mean(values))

    @property
    def supervised_dev_acc(self) -> Optional[float]:
        return self.mean("supervised_dev_acc")

    @property
    def zeroshot_unseen_acc(self) -> Optional[float]:
        return self.mean("zeroshot_unseen_acc")

    @property
    def zeroshot_mix_acc(self) -> Optional[float]:
        return self.mean("zeroshot_mix_acc")


def embed_corpus_bot(pipeline: ExtractionPipeline, bot: BotDefinition, spec: CorpusSpec) -> EmbeddingDatabase:
    """Database of `bot` rendered with the corpus synthesizer settings"""
    return embed_bot(pipeline, bot, spec.synth_seed, spec.frames_per_token, acoustic_rank=spec.acoustic_rank)


def command_word_benchmark(pipeline: ExtractionPipeline, generated: GeneratedCorpus, cfg: RunConfig,
                           queries_per_word: int = 5) -> float:
    """
    Zero-shot audio classification over single keywords

    The database holds one synthesized rendering per keyword of every intent;
    queries are noisy renderings of the same words.
    """
    spec = generated.spec
    words = sorted(w for kw in generated.keywords.values() for w in kw)
    bot = BotDefinition([(f"w{w:05d}", (w,)) for w in words], words)
    db = embed_corpus_bot(pipeline, bot, spec)
    rng = derive_rng(cfg.training.seed, "command-words")
    queries = []
    for w in words:
        for q in range(queries_per_word):
            noise = rng.normal(0.0, 1.0, size=(spec.frames_per_token, spec.frame_dim))
            queries.append(Utterance(id=f"w{w:05d}_{q}", frames=render_natural((w,), spec, noise,
                                                                              spec.audio_noise_sigma),
                                     tokens=(w,), intent=w, split="test"))
    return evaluate_zero_shot(db, queries, pipeline).accuracy


def chance_check(pipeline: ExtractionPipeline, db: EmbeddingDatabase, test: Sequence[Utterance],
                 seed: int = 0) -> float:
    """Accuracy against a copy of db with shuffled labels"""
    return evaluate_zero_shot(db.permuted(derive_rng(seed, "chance")), test, pipeline).accuracy


def chance_band(n_intents: int, n_test: int) -> tuple:
    """1/|intents| plus or minus three binomial standard deviations"""
    p = 1.0 / n_intents
    sigma = float(np.sqrt(p * (1.0 - p) / n_test))
    return p - 3.0 * sigma, p + 3.0 * sigma


def _zero_shot(pipeline: ExtractionPipeline, bot: BotDefinition, test: Sequence[Utterance],
               cfg: RunConfig) -> float:
    db = embed_corpus_bot(pipeline, bot, cfg.corpus)
    return evaluate_zero_shot(db, test, pipeline).accuracy


def _variant_layer(variant: str, cfg: RunConfig) -> str:
    # The untrained backbone has no heads to read from
    return "pooled" if variant == "frozen" else cfg.zeroshot.layer


def run_variant_grid(generated: GeneratedCorpus, cfg: RunConfig,
                     variants: Optional[Sequence[str]] = None) -> List[ExperimentReport]:
    """Train every requested variant per seed and evaluate it supervised and zero-shot"""
    variants = list(variants or cfg.experiment.variants)
    for v in variants:
        check_variant(v)
    k = cfg.zeroshot.bot_sentences_per_intent
    unseen_bot = generated.unseen_bot(k) if generated.unseen_intents else None
    mix_bot = generated.mix_bot(k) if generated.mix_intents else None
    reports = {v: ExperimentReport(v) for v in variants}

    for seed in cfg.experiment.seeds:
        run_cfg = seeded_config(cfg, seed)
        teachers: Dict[str, TrainedModel] = {}

        def teacher_for(name: str) -> TrainedModel:
            if name not in teachers:
                teachers[name] = train_model(name, generated.seen, run_cfg)
            return teachers[name]

        for variant in variants:
            logger.info("grid: variant=%s seed=%d", variant, seed)
            if variant in TEACHER_VARIANTS:
                trained = teacher_for(variant)
            elif variant in TEACHER_FOR:
                trained = train_model(variant, generated.seen, run_cfg,
                                      teacher_for(TEACHER_FOR[variant]).model)
            else:
                trained = train_model(variant, generated.seen, run_cfg)

            pipeline = trained.pipeline(_variant_layer(variant, cfg))
            unseen_acc = mix_acc = chance = None
            if unseen_bot is not None:
                unseen_db = embed_corpus_bot(pipeline, unseen_bot, cfg.corpus)
                unseen_acc = evaluate_zero_shot(unseen_db, generated.unseen_test(), pipeline).accuracy
                chance = chance_check(pipeline, unseen_db, generated.unseen_test(), seed)
            if mix_bot is not None:
                mix_acc = _zero_shot(pipeline, mix_bot, generated.mix_test(), cfg)

            result = SeedResult(
                seed=seed,
                supervised_dev_acc=trained.accuracy(generated.seen.split("dev")),
                supervised_test_acc=trained.accuracy(generated.seen.split("test")),
                zeroshot_unseen_acc=unseen_acc,
                zeroshot_mix_acc=mix_acc,
                command_word_acc=command_word_benchmark(pipeline, generated, run_cfg),
                chance_acc=chance,
            )
            reports[variant].seeds.append(seed)
            reports[variant].per_seed.append(result)
            reports[variant].pipelines[seed] = pipeline
            reports[variant].models[seed] = trained
            logger.info("grid: %s", result)

    return [reports[v] for v in variants]


def layer_ablation(trained: TrainedModel, bot: BotDefinition, test: Sequence[Utterance], cfg: RunConfig,
                   layers: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Zero-shot accuracy with embeddings read from each requested layer"""
    layers = list(layers or cfg.experiment.ablation_layers)
    rows = []
    for layer in layers:
        pipeline = trained.pipeline(ExtractionLayer(layer))
        rows.append({"layer": ExtractionLayer(layer).value, "accuracy": _zero_shot(pipeline, bot, test, cfg)})
    return pd.DataFrame(rows, columns=["layer", "accuracy"])


def sample_size_sweep(pipeline: ExtractionPipeline, bot_pool: BotDefinition, test: Sequence[Utterance],
                      sizes: Sequence[int], repeats: int, seed: int, cfg: RunConfig) -> pd.DataFrame:
    """
    Accuracy spread over random bots of K sentences per intent

    The pool is embedded once; every repeat evaluates the sub-database of the
    sampled sentences.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    for size in sizes:
        bot_pool.check_sample_size(size)
    pool_db = embed_corpus_bot(pipeline, bot_pool, cfg.corpus)
    rng = derive_rng(seed, "sample-sweep")
    rows = []
    for size in sizes:
        accs = []
        for _ in range(repeats):
            sample = bot_pool.sample(size, rng)
            db = pool_db.restrict(sid for sid, _ in sample.sentences)
            accs.append(evaluate_zero_shot(db, test, pipeline).accuracy)
        rows.append({"size": size, "mean": float(np.mean(accs)), "min": float(np.min(accs)),
                     "max": float(np.max(accs)), "spread": float(np.max(accs) - np.min(accs))})
        logger.info("sweep: size=%d mean=%.4f spread=%.4f", size, rows[-1]["mean"], rows[-1]["spread"])
    return pd.DataFrame(rows, columns=["size", "mean", "min", "max", "spread"])


def sweep_knee(table: pd.DataFrame, tolerance: float = 0.01) -> int:
    """Smallest size whose mean accuracy is within `tolerance` of the best mean"""
    best = table["mean"].max()
    return int(table.loc[table["mean"] >= best - tolerance, "size"].min())


def sweep_trend(table: pd.DataFrame, column: str = "spread") -> float:
    """Spearman rank correlation of bot size against `column`; nan when either side is constant"""
    if len(table) < 2 or table[column].nunique() < 2:
        return float("nan")
    rho, _ = stats.spearmanr(table["size"], table[column])
    return float(rho)


def sweep_checks(table: pd.DataFrame, min_rho: float = 0.6, min_sizes: int = 4) -> Dict[str, bool]:
    """
    Shape of a sample-size sweep

    The spread at the smallest size must exceed the spread at the largest, and
    mean accuracy must rise with size (Spearman rho >= `min_rho` over at least
    `min_sizes` sizes; a constant mean counts as non-decreasing).
    """
    ordered = table.sort_values("size")
    rho = sweep_trend(ordered, "mean")
    flat = ordered["mean"].nunique() == 1
    return {
        "sweep_spread_shrinks": bool(ordered["spread"].iloc[0] > ordered["spread"].iloc[-1]),
        "sweep_mean_rises": bool(len(ordered) >= min_sizes and (flat or rho >= min_rho)),
    }


def layer_checks(table: pd.DataFrame, chance: float) -> Dict[str, bool]:
    """Pooled >= projection >= feed-forward, every layer within [chance, 1]"""
    acc = dict(zip(table["layer"], table["accuracy"]))
    checks = {"layers_within_chance_and_one": all(chance <= a <= 1.0 for a in acc.values())}
    order = [layer.value for layer in ExtractionLayer if layer.value in acc]
    checks["layers_pooled_ge_projection_ge_feedforward"] = all(
        acc[a] >= acc[b] for a, b in zip(order, order[1:]))
    return checks


def synth_trained_upper_bound(bot: BotDefinition, test: Sequence[Utterance], cfg: RunConfig) -> float:
    """
    Supervised anchor: an audio-only classifier trained on synthesized renderings
    of the bot sentences, evaluated on natural test audio of the same intents
    """
    spec = cfg.corpus
    utterances = []
    for intent, positions in bot.per_intent().items():
        n_dev = max(1, len(positions) // 10)
        train_pos = positions[:-n_dev] if len(positions) > n_dev else positions
        dev_pos = positions[-n_dev:]
        for split, chosen in (("train", train_pos), ("dev", dev_pos)):
            for p in chosen:
                sid, tokens = bot.sentences[p]
                frames = synthesize_pseudo_audio(tokens, spec.synth_seed, spec.frames_per_token, spec.frame_dim,
                                                 spec.acoustic_rank)
                utterances.append(Utterance(id=f"{sid}-{split}", frames=frames, tokens=tokens,
                                            intent=intent, split=split))
    corpus = Corpus(utterances, bot.intents, spec.vocab_size)
    student_cfg = dataclasses.replace(cfg.student, distill=False)
    student = StudentModel.build(bot.intents, cfg.encoders, student_cfg)
    student, _ = student_train(student, None, corpus, cfg.training)
    accuracy = student_accuracy(student, test)
    logger.info("synthesized-audio supervised anchor: accuracy=%.4f", accuracy)
    return accuracy


def noise_sweep(pipelines: Dict[str, ExtractionPipeline], generated: GeneratedCorpus,
                sigmas: Sequence[float], cfg: RunConfig) -> pd.DataFrame:
    """
    Zero-shot unseen accuracy of each pipeline with the test audio re-rendered
    at every noise level; the per-utterance noise draw is fixed across levels
    """
    spec = generated.spec
    base = generated.unseen_test()
    noise = {u.id: derive_rng(spec.seed, "noise-sweep", u.id).normal(0.0, 1.0, size=u.frames.shape)
             for u in base}
    bot = generated.unseen_bot(cfg.zeroshot.bot_sentences_per_intent)
    rows = []
    for name, pipeline in pipelines.items():
        db = embed_corpus_bot(pipeline, bot, spec)
        for sigma in sigmas:
            test = [Utterance(id=u.id, frames=render_natural(u.tokens, spec, noise[u.id], sigma),
                              tokens=u.tokens, intent=u.intent, split=u.split) for u in base]
            rows.append({"variant": name, "sigma": float(sigma),
                         "accuracy": evaluate_zero_shot(db, test, pipeline).accuracy})
    return pd.DataFrame(rows, columns=["variant", "sigma", "accuracy"])


def _by_seed(reports: Sequence[ExperimentReport], variant: str, name: str) -> Dict[int, float]:
    for r in reports:
        if r.variant == variant:
            return {s.seed: getattr(s, name) for s in r.per_seed if getattr(s, name) is not None}
    return {}


def _per_seed(reports: Sequence[ExperimentReport], variants: Sequence[str], name: str) -> List[tuple]:
    """One tuple of `name` values per seed that every variant reports"""
    values = [_by_seed(reports, v, name) for v in variants]
    seeds = sorted(set.intersection(*(set(v) for v in values)))
    return [tuple(v[s] for v in values) for s in seeds]


def _majority(holds: Sequence[bool]) -> bool:
    """At least two thirds of the seeds"""
    return bool(holds) and 3 * sum(holds) >= 2 * len(holds)


def trend_checks(reports: Sequence[ExperimentReport], supervised_floor: float = 0.9,
                 tolerance: float = 0.02) -> Dict[str, bool]:
    """
    Named comparative orderings over whichever variants the grid contains

    Zero-shot orderings are judged seed by seed: the three-way orderings must
    hold in two thirds of the seeds and frozen must be strictly lowest in
    every seed. Supervised orderings compare seed means.
    """
    present = {r.variant: r for r in reports}
    checks = {}

    if {"stu-mm-cl", "audio-only"} <= set(present):
        rows = _per_seed(reports, ("stu-mm-cl", "audio-only"), "zeroshot_unseen_acc")
        checks["stu_mm_cl_beats_audio_only_unseen_majority"] = _majority([a > b for a, b in rows])

    if {"stu-mm-cl", "stu-mm", "audio-only"} <= set(present):
        for split in ("unseen", "mix"):
            rows = _per_seed(reports, ("stu-mm-cl", "stu-mm", "audio-only"), f"zeroshot_{split}_acc")
            checks[f"{split}_stu_mm_cl_ge_stu_mm_ge_audio_only_majority"] = _majority(
                [a >= b >= c for a, b, c in rows])

    if "frozen" in present and len(present) > 1:
        frozen = _by_seed(reports, "frozen", "zeroshot_unseen_acc")
        others = [_by_seed(reports, v, "zeroshot_unseen_acc") for v in present if v != "frozen"]
        seeds = [s for s in sorted(frozen) if any(s in o for o in others)]
        checks["frozen_lowest_unseen_every_seed"] = bool(seeds) and all(
            frozen[s] < o[s] for s in seeds for o in others if s in o)

    for teacher, student in (("mm-cl", "stu-mm-cl"), ("mm", "stu-mm")):
        if {teacher, student, "audio-only"} <= set(present):
            t, s, a = (present[v].supervised_dev_acc for v in (teacher, student, "audio-only"))
            name = f"supervised_{teacher}_ge_{student}_ge_audio_only".replace("-", "_")
            checks[name] = None not in (t, s, a) and t >= s >= a - tolerance

    teachers = [present[v].supervised_dev_acc for v in TEACHER_VARIANTS if v in present]
    if teachers:
        checks["supervised_teacher_above_floor"] = all(t is not None and t > supervised_floor for t in teachers)

    return checks


def grid_frame(reports: Sequence[ExperimentReport]) -> pd.DataFrame:
    rows = [dict(variant=r.variant, **dataclasses.asdict(s)) for r in reports for s in r.per_seed]
    columns = ["variant"] + [f.name for f in dataclasses.fields(SeedResult)]
    return pd.DataFrame(rows, columns=columns)


def summary_table(reports: Sequence[ExperimentReport]) -> str:
    headers = ["variant", "sup. dev", "sup. test", "zs unseen", "zs mix", "command words", "chance"]
    rows = []
    for r in reports:
        rows.append([r.variant] + [r.mean(name) for name in (
            "supervised_dev_acc", "supervised_test_acc", "zeroshot_unseen_acc",
            "zeroshot_mix_acc", "command_word_acc", "chance_acc")])
    return tabulate(rows, headers=headers, floatfmt=".4f", missingval="-")


def write_reports(reports: Sequence[ExperimentReport], out_dir: str,
                  tables: Optional[Dict[str, pd.DataFrame]] = None,
                  checks: Optional[Dict[str, bool]] = None) -> List[Path]:
    """grid.csv, one CSV per extra table, and a human-readable summary.txt with every named check"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    all_checks = dict(checks or {})
    if reports:
        grid_frame(reports).to_csv(out / "grid.csv", index=False)
        written.append(out / "grid.csv")
        lines += [summary_table(reports), ""]
        all_checks.update(trend_checks(reports))
    if all_checks:
        lines.append(tabulate(sorted(all_checks.items()), headers=["check", "holds"]))
        lines.append("")
    for name, table in (tables or {}).items():
        table.to_csv(out / f"{name}.csv", index=False)
        written.append(out / f"{name}.csv")
        lines += [name, tabulate(table, headers="keys", showindex=False, floatfmt=".4f"), ""]
    (out / "summary.txt").write_text("\n".join(lines), encoding="utf-8")
    written.append(out / "summary.txt")
    return written


def _ablation_model(generated: GeneratedCorpus, cfg: RunConfig) -> TrainedModel:
    """The ablation variant trained on the first seed"""
    variant = check_variant(cfg.experiment.ablation_variant)
    run_cfg = seeded_config(cfg, cfg.experiment.seeds[0])
    teacher = None
    if variant in TEACHER_FOR:
        teacher = train_model(TEACHER_FOR[variant], generated.seen, run_cfg).model
    return train_model(variant, generated.seen, run_cfg, teacher)


def run_layer_ablation(generated: GeneratedCorpus, cfg: RunConfig,
                       trained: Optional[TrainedModel] = None) -> pd.DataFrame:
    """
    Compare extraction layers on the unseen bot

    Uses `trained` when given (e.g. the grid's first-seed model), otherwise
    trains the ablation variant on the first seed.
    """
    if check_variant(cfg.experiment.ablation_variant) == "frozen":
        raise ConfigError("the layer ablation needs a trained variant with heads")
    trained = trained or _ablation_model(generated, cfg)
    bot = generated.unseen_bot(cfg.zeroshot.bot_sentences_per_intent)
    return layer_ablation(trained, bot, generated.unseen_test(), cfg)


def run_sample_sweep(generated: GeneratedCorpus, cfg: RunConfig,
                     trained: Optional[TrainedModel] = None) -> pd.DataFrame:
    """Sample-size sweep with the ablation variant's pipeline on the unseen bot pool"""
    variant = check_variant(cfg.experiment.ablation_variant)
    trained = trained or _ablation_model(generated, cfg)
    pool = generated.bot_pool.subset(generated.unseen_intents)
    return sample_size_sweep(trained.pipeline(_variant_layer(variant, cfg)), pool, generated.unseen_test(),
                             cfg.experiment.sweep_sizes, cfg.experiment.sweep_repeats,
                             cfg.experiment.seeds[0], cfg)
