"""
Configuration file for the zero-shot spoken intent pipeline
Manages all hyperparameters, corpus settings and paths
"""

import dataclasses
from dataclasses import dataclass, field
from typing import List, Tuple

import toml

from src.exceptions import ConfigError


@dataclass
class EncoderConfig:
    """Pseudo-backbone and projection-head dimensions"""

    d_raw_audio: int = 32
    d_hid: int = 64
    d_emb: int = 128  # projection output size

    audio_seed: int = 11
    text_seed: int = 13

    # Top layer of the audio backbone fine-tuned; false reproduces the frozen baseline
    layer2_trainable: bool = True

    audio_dropout: float = 0.2
    text_dropout: float = 0.2


@dataclass
class TeacherConfig:
    """Multimodal teacher (MM / MM-CL)"""

    fusion_dropout: float = 0.3
    tau: float = 0.007
    use_contrastive: bool = True
    normalize_before_sim: bool = True
    # Multiply similarities by tau as literally written instead of dividing
    tau_literal_multiply: bool = False
    head_seed: int = 101


@dataclass
class StudentConfig:
    """Audio-only student (Audio-only / Stu-MM / Stu-MM-CL)"""

    gamma: float = 10.0
    distill: bool = True
    init_from_teacher_backbone: bool = False
    head_seed: int = 202


@dataclass
class TrainingConfig:
    """Optimizer, scheduler and loop settings shared by teacher and student"""

    epochs: int = 30
    batch_size: int = 16
    seed: int = 0

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    # ReduceLROnPlateau on dev accuracy
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    min_lr: float = 1e-6

    early_stopping_patience: int = 10
    progress: bool = False


@dataclass
class ZeroShotConfig:
    """Embedding database and inference settings"""

    layer: str = "pooled"
    top_k: int = 5
    bot_sentences_per_intent: int = 30


@dataclass
class CorpusSpec:
    """Synthetic corpus: keyword-defined intents rendered as noisy pseudo-audio"""

    n_intents_seen: int = 6
    n_intents_unseen: int = 12
    vocab_size: int = 200
    keywords_per_intent: int = 4
    sentences_per_intent: int = 143
    sentence_length_range: Tuple[int, int] = (5, 9)
    audio_noise_sigma: float = 0.7
    frames_per_token: int = 3
    frame_dim: int = 32
    # Rank of the subspace shared by all token prototypes; >= frame_dim means full rank
    acoustic_rank: int = 8
    seed: int = 1234
    synth_seed: int = 7

    # Text-only developer sentences generated per intent for the bot pool
    bot_pool_per_intent: int = 60
    # Seen intents added to the unseen ones in the generalized (mix) setting
    mix_seen_intents: int = 6


@dataclass
class ExperimentConfig:
    """Variant grid and ablations"""

    variants: List[str] = field(default_factory=lambda: [
        "frozen", "audio-only", "mm", "mm-cl", "stu-mm", "stu-mm-cl"
    ])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    ablation_variant: str = "stu-mm-cl"
    ablation_layers: List[str] = field(default_factory=lambda: [
        "pooled", "projection", "feedforward"
    ])
    sweep_sizes: List[int] = field(default_factory=lambda: [5, 10, 20, 40])
    sweep_repeats: int = 10
    noise_levels: List[float] = field(default_factory=lambda: [0.0, 0.5, 1.5])


@dataclass
class PathsConfig:
    data_dir: str = "./data/corpus"
    output_dir: str = "./models"
    logging_dir: str = "./logs"
    reports_dir: str = "./reports"


@dataclass
class RunConfig:
    """Everything one run needs; each field is one TOML table"""

    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    zeroshot: ZeroShotConfig = field(default_factory=ZeroShotConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        checks = [
            (0.0 <= self.encoders.audio_dropout < 1.0, "encoders.audio_dropout must lie in [0, 1)"),
            (0.0 <= self.encoders.text_dropout < 1.0, "encoders.text_dropout must lie in [0, 1)"),
            (0.0 <= self.teacher.fusion_dropout < 1.0, "teacher.fusion_dropout must lie in [0, 1)"),
            (self.teacher.tau > 0.0, "teacher.tau must be positive"),
            (self.student.gamma >= 0.0, "student.gamma must be non-negative"),
            (0.0 < self.training.plateau_factor < 1.0, "training.plateau_factor must lie in (0, 1)"),
            (self.training.learning_rate >= 0.0, "training.learning_rate must be non-negative"),
            (self.training.epochs >= 0, "training.epochs must be non-negative"),
            (self.training.batch_size >= 1, "training.batch_size must be >= 1"),
            (min(self.encoders.d_raw_audio, self.encoders.d_hid, self.encoders.d_emb) >= 1,
             "encoder dimensions must be >= 1"),
            (self.corpus.frame_dim == self.encoders.d_raw_audio,
             "corpus.frame_dim must equal encoders.d_raw_audio"),
            (self.corpus.acoustic_rank >= 1, "corpus.acoustic_rank must be >= 1"),
            (self.zeroshot.layer in ("pooled", "projection", "feedforward"),
             f"unknown zeroshot.layer {self.zeroshot.layer!r}"),
            (self.zeroshot.top_k >= 1, "zeroshot.top_k must be >= 1"),
            (self.experiment.sweep_repeats >= 1, "experiment.sweep_repeats must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


def _section_from_dict(cls, section: str, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {unknown}")
    kwargs = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    sections = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    kwargs = {}
    for name, cls in sections.items():
        values = data.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _section_from_dict(cls, name, values)
    return RunConfig(**kwargs).validate()


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        section = dataclasses.asdict(getattr(cfg, f.name))
        out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
    return out


def load_config(path: str = None) -> RunConfig:
    """Load a TOML config file; missing keys take their defaults"""
    if path is None:
        return RunConfig().validate()
    try:
        data = toml.load(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except toml.TomlDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return toml.dumps(config_to_dict(cfg))


# Global config instance
config = RunConfig()
