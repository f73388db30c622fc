"""
Generalized zero-shot audio-to-intent classification
Bot sentences are synthesized, embedded once into a database and test audio is
matched to its most similar entry by cosine similarity
"""

import functools
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from src.encoders import AudioBackbone, ProjectionHead, Utterance, checksum_arrays
from src.exceptions import (
    ConfigError,
    CoverageError,
    DimensionError,
    EmptyInputError,
    FormatError,
    LabelIndexError,
    SpecError,
    StaleDatabaseError,
)
from src.numerics import derive_rng, l2_normalize_rows, linear_forward, relu_forward

logger = logging.getLogger(__name__)

EDB_MAGIC = "ZINTENT-EDB"
EDB_VERSION = "v1"


class ExtractionLayer(str, Enum):
    POOLED = "pooled"
    PROJECTION = "projection"
    FEEDFORWARD = "feedforward"


@dataclass
class ExtractionHeads:
    """Layers above the pooled backbone output that an embedding may be read from"""

    projection: ProjectionHead
    ff_w: Optional[np.ndarray] = None
    ff_b: Optional[np.ndarray] = None


@dataclass
class ExtractionPipeline:
    """Maps audio frames to a unit-norm retrieval embedding"""

    backbone: AudioBackbone
    layer: ExtractionLayer = ExtractionLayer.POOLED
    heads: Optional[ExtractionHeads] = None

    def __post_init__(self):
        try:
            self.layer = ExtractionLayer(self.layer)
        except ValueError:
            raise ConfigError(f"unknown extraction layer {self.layer!r}")
        if self.layer is ExtractionLayer.POOLED:
            return
        if self.heads is None:
            raise ConfigError(f"layer {self.layer.value!r} needs model heads")
        if self.heads.projection.w.shape[0] != self.backbone.d_hid:
            raise DimensionError(
                f"projection head input {self.heads.projection.w.shape[0]} "
                f"does not match backbone output {self.backbone.d_hid}"
            )
        if self.layer is ExtractionLayer.FEEDFORWARD and self.heads.ff_w is None:
            raise ConfigError("feedforward layer requested but the heads carry no feed-forward layer")

    @property
    def dim(self) -> int:
        if self.layer is ExtractionLayer.POOLED:
            return self.backbone.d_hid
        if self.layer is ExtractionLayer.PROJECTION:
            return self.heads.projection.d_out
        return self.heads.ff_w.shape[1]

    def embed_batch(self, frames_list: Sequence[np.ndarray]) -> np.ndarray:
        x, _ = self.backbone.forward(frames_list)
        if self.layer is not ExtractionLayer.POOLED:
            x = linear_forward(x, self.heads.projection.w, self.heads.projection.b)
        if self.layer is ExtractionLayer.FEEDFORWARD:
            x = relu_forward(linear_forward(x, self.heads.ff_w, self.heads.ff_b))
        unit, _ = l2_normalize_rows(x)
        return unit

    def embed(self, frames: np.ndarray) -> np.ndarray:
        return self.embed_batch([np.asarray(frames, dtype=np.float64)])[0]

    def fingerprint(self) -> str:
        named = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        if self.layer is not ExtractionLayer.POOLED:
            named["projection.w"] = self.heads.projection.w
            named["projection.b"] = self.heads.projection.b
        if self.layer is ExtractionLayer.FEEDFORWARD:
            named["ff.w"] = self.heads.ff_w
            named["ff.b"] = self.heads.ff_b
        return checksum_arrays(named, f"layer={self.layer.value}")[:32]


@functools.lru_cache(maxsize=64)
def _acoustic_basis(synth_seed: int, rank: int, frame_dim: int) -> np.ndarray:
    """Shared rank x frame_dim mixing matrix; unit variance per output entry"""
    basis = derive_rng(synth_seed, "acoustic-basis").normal(0.0, 1.0 / np.sqrt(rank), size=(rank, frame_dim))
    basis.setflags(write=False)
    return basis


@functools.lru_cache(maxsize=65536)
def _token_prototype(token: int, synth_seed: int, frames_per_token: int, frame_dim: int,
                     acoustic_rank: Optional[int] = None) -> np.ndarray:
    token_rng = np.random.default_rng([synth_seed, token])
    if acoustic_rank is None or acoustic_rank >= frame_dim:
        proto = token_rng.normal(0.0, 1.0, size=(frames_per_token, frame_dim))
    else:
        latent = token_rng.normal(0.0, 1.0, size=(frames_per_token, acoustic_rank))
        proto = latent @ _acoustic_basis(synth_seed, acoustic_rank, frame_dim)
    proto.setflags(write=False)
    return proto


def synthesize_pseudo_audio(tokens: Sequence[int], synth_seed: int, frames_per_token: int = 3,
                            frame_dim: int = 16, acoustic_rank: Optional[int] = None) -> np.ndarray:
    """
    Clean-channel stand-in for a speech synthesizer

    Each token emits `frames_per_token` frames of a seeded per-token prototype,
    so the same tokens and seed always give identical frames. With
    `acoustic_rank` below `frame_dim` every prototype lies in one shared
    subspace of that rank, which frame noise does not respect.
    """
    if len(tokens) == 0:
        raise EmptyInputError("cannot synthesize an empty sentence")
    if frames_per_token < 1:
        raise ConfigError(f"frames_per_token must be >= 1, got {frames_per_token}")
    if acoustic_rank is not None and acoustic_rank < 1:
        raise ConfigError(f"acoustic_rank must be >= 1, got {acoustic_rank}")
    if min(tokens) < 0:
        raise LabelIndexError("token ids must be non-negative")
    return np.vstack([_token_prototype(int(t), synth_seed, frames_per_token, frame_dim, acoustic_rank)
                      for t in tokens])


@dataclass
class BotDefinition:
    """Developer-provided text sentences with their intent labels"""

    sentences: List[Tuple[str, Tuple[int, ...]]]
    labels: List[int]
    intent_vocab: Set[int] = field(default_factory=set)

    def __post_init__(self):
        self.sentences = [(str(sid), tuple(int(t) for t in toks)) for sid, toks in self.sentences]
        self.labels = [int(l) for l in self.labels]
        if not self.intent_vocab:
            self.intent_vocab = set(self.labels)
        self.intent_vocab = {int(i) for i in self.intent_vocab}
        if not self.sentences:
            raise EmptyInputError("bot definition has no sentences")
        if len(self.sentences) != len(self.labels):
            raise DimensionError(f"{len(self.sentences)} sentences but {len(self.labels)} labels")
        stray = sorted(set(self.labels) - self.intent_vocab)
        if stray:
            raise LabelIndexError(f"labels {stray} are not in the bot's intent vocabulary")
        for sid, toks in self.sentences:
            if not toks:
                raise EmptyInputError(f"sentence {sid} has no tokens")

    @property
    def intents(self) -> List[int]:
        return sorted(self.intent_vocab)

    def __len__(self) -> int:
        return len(self.sentences)

    def subset(self, intents: Sequence[int]) -> "BotDefinition":
        keep = set(int(i) for i in intents)
        pairs = [(s, l) for s, l in zip(self.sentences, self.labels) if l in keep]
        return BotDefinition([s for s, _ in pairs], [l for _, l in pairs], keep)

    def per_intent(self) -> Dict[int, List[int]]:
        positions: Dict[int, List[int]] = {i: [] for i in self.intents}
        for pos, label in enumerate(self.labels):
            positions[label].append(pos)
        return positions

    def head(self, k: int) -> "BotDefinition":
        """First k sentences of every intent"""
        return self._take({i: pos[:k] for i, pos in self.check_sample_size(k).items()})

    def sample(self, k: int, rng: np.random.Generator) -> "BotDefinition":
        """k random sentences of every intent"""
        chosen = {i: sorted(rng.choice(pos, size=k, replace=False).tolist())
                  for i, pos in self.check_sample_size(k).items()}
        return self._take(chosen)

    def check_sample_size(self, k: int) -> Dict[int, List[int]]:
        positions = self.per_intent()
        short = sorted(i for i, pos in positions.items() if len(pos) < k)
        if k < 1 or short:
            raise SpecError(f"cannot take {k} sentences per intent; intents {short} have fewer")
        return positions

    def _take(self, chosen: Dict[int, List[int]]) -> "BotDefinition":
        picked = sorted(p for pos in chosen.values() for p in pos)
        return BotDefinition([self.sentences[p] for p in picked], [self.labels[p] for p in picked],
                             set(self.intent_vocab))


@dataclass(frozen=True)
class DbEntry:
    embedding: np.ndarray
    intent: int
    sentence_id: str


@dataclass
class EmbeddingDatabase:
    """Unit-norm embeddings of synthesized bot sentences with their intents"""

    dim: int
    entries: List[DbEntry]
    layer: ExtractionLayer
    fingerprint: str

    def __post_init__(self):
        self.layer = ExtractionLayer(self.layer)
        for e in self.entries:
            if e.embedding.shape != (self.dim,):
                raise DimensionError(f"entry {e.sentence_id} has shape {e.embedding.shape}, db dim is {self.dim}")
            if abs(np.linalg.norm(e.embedding) - 1.0) > 1e-9:
                raise DimensionError(f"entry {e.sentence_id} is not unit-norm")
        self._matrix = (np.vstack([e.embedding for e in self.entries])
                        if self.entries else np.zeros((0, self.dim)))
        self._ids = np.array([e.sentence_id for e in self.entries])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def intents(self) -> Set[int]:
        return {e.intent for e in self.entries}

    def restrict(self, sentence_ids) -> "EmbeddingDatabase":
        keep = set(sentence_ids)
        entries = [e for e in self.entries if e.sentence_id in keep]
        return EmbeddingDatabase(self.dim, entries, self.layer, self.fingerprint)

    def permuted(self, rng: np.random.Generator) -> "EmbeddingDatabase":
        labels = rng.permutation([e.intent for e in self.entries])
        entries = [DbEntry(e.embedding, int(l), e.sentence_id) for e, l in zip(self.entries, labels)]
        return EmbeddingDatabase(self.dim, entries, self.layer, self.fingerprint)

    def save(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"{EDB_MAGIC} {EDB_VERSION} dim={self.dim} layer={self.layer.value} "
                    f"fingerprint={self.fingerprint}\n")
            for e in self.entries:
                values = " ".join(format(float(x), ".17g") for x in e.embedding)
                f.write(f"{e.sentence_id}\t{e.intent}\t{values}\n")

    @classmethod
    def load(cls, path: str) -> "EmbeddingDatabase":
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.read().splitlines()
        except FileNotFoundError:
            raise FormatError(f"embedding database not found: {path}")
        if not lines:
            raise FormatError(f"{path} is empty")
        header = lines[0].split(" ")
        if len(header) != 5 or header[0] != EDB_MAGIC:
            raise FormatError(f"{path} is not an embedding database")
        if header[1] != EDB_VERSION:
            raise FormatError(f"unsupported embedding database version {header[1]!r}, expected {EDB_VERSION}")
        try:
            fields = dict(item.split("=", 1) for item in header[2:])
            dim = int(fields["dim"])
            entries = []
            for line in lines[1:]:
                sid, intent, values = line.split("\t")
                vec = np.array([float(v) for v in values.split(" ")], dtype=np.float64)
                entries.append(DbEntry(vec, int(intent), sid))
            return cls(dim, entries, ExtractionLayer(fields["layer"]), fields["fingerprint"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"malformed embedding database {path}: {e}")


@dataclass
class Prediction:
    intent: int
    best_sentence_id: str
    similarity: float
    top_k: List[Tuple[int, float]]


@dataclass
class ZeroShotResult:
    accuracy: float
    predictions: List[Prediction]
    confusion: pd.DataFrame


def embed_bot(pipeline: ExtractionPipeline, bot: BotDefinition, synth_seed: int,
              frames_per_token: int, chunk: int = 256,
              acoustic_rank: Optional[int] = None) -> EmbeddingDatabase:
    """Synthesize, embed and store every bot sentence, ordered by sentence id"""
    order = sorted(range(len(bot)), key=lambda p: bot.sentences[p][0])
    entries = []
    for start in range(0, len(order), chunk):
        positions = order[start:start + chunk]
        frames = [synthesize_pseudo_audio(bot.sentences[p][1], synth_seed, frames_per_token,
                                          pipeline.backbone.d_raw, acoustic_rank) for p in positions]
        for p, vec in zip(positions, pipeline.embed_batch(frames)):
            entries.append(DbEntry(vec, bot.labels[p], bot.sentences[p][0]))
    db = EmbeddingDatabase(pipeline.dim, entries, pipeline.layer, pipeline.fingerprint())
    logger.info("built embedding database: %d entries, %d intents, layer=%s",
                len(db), len(db.intents), db.layer.value)
    return db


def build_embedding_db(bot: BotDefinition, backbone: AudioBackbone, layer="pooled",
                       heads: Optional[ExtractionHeads] = None, synth_seed: int = 7,
                       frames_per_token: int = 3,
                       acoustic_rank: Optional[int] = None) -> EmbeddingDatabase:
    pipeline = ExtractionPipeline(backbone, layer, heads)
    return embed_bot(pipeline, bot, synth_seed, frames_per_token, acoustic_rank=acoustic_rank)


def _check_db(db: EmbeddingDatabase, pipeline: ExtractionPipeline):
    if len(db) == 0:
        raise ConfigError("embedding database is empty")
    if db.layer is not pipeline.layer or db.fingerprint != pipeline.fingerprint():
        raise StaleDatabaseError(
            f"database was built by pipeline {db.fingerprint} ({db.layer.value}), "
            f"query pipeline is {pipeline.fingerprint()} ({pipeline.layer.value})"
        )


def _rank(db: EmbeddingDatabase, sims: np.ndarray, k: int) -> Prediction:
    # Highest similarity first, lowest sentence id on exact ties
    order = np.lexsort((db._ids, -sims))
    top = order[:max(1, k)]
    best = int(top[0])
    return Prediction(
        intent=db.entries[best].intent,
        best_sentence_id=db.entries[best].sentence_id,
        similarity=float(np.clip(sims[best], -1.0, 1.0)),
        top_k=[(db.entries[i].intent, float(np.clip(sims[i], -1.0, 1.0))) for i in top],
    )


def classify_batch(db: EmbeddingDatabase, pipeline: ExtractionPipeline,
                   frames_list: Sequence[np.ndarray], k: int = 5, chunk: int = 256) -> List[Prediction]:
    _check_db(db, pipeline)
    predictions = []
    for start in range(0, len(frames_list), chunk):
        queries = pipeline.embed_batch(frames_list[start:start + chunk])
        for sims in queries @ db.matrix.T:
            predictions.append(_rank(db, sims, k))
    return predictions


def classify_zero_shot(db: EmbeddingDatabase, frames: np.ndarray, backbone: AudioBackbone,
                       layer="pooled", heads: Optional[ExtractionHeads] = None,
                       k: int = 5) -> Prediction:
    """Intent of the database entry most cosine-similar to the query audio"""
    pipeline = ExtractionPipeline(backbone, layer, heads)
    return classify_batch(db, pipeline, [np.asarray(frames, dtype=np.float64)], k)[0]


def evaluate_zero_shot(db: EmbeddingDatabase, test: Sequence[Utterance],
                       pipeline: ExtractionPipeline) -> ZeroShotResult:
    """Top-1 accuracy and confusion table over a labelled test set"""
    if not test:
        raise EmptyInputError("zero-shot evaluation on an empty test set")
    missing = {u.intent for u in test} - db.intents
    if missing:
        raise CoverageError(missing)
    predictions = classify_batch(db, pipeline, [u.frames for u in test], k=1)
    truth = [u.intent for u in test]
    predicted = [p.intent for p in predictions]
    accuracy = float(np.mean([t == p for t, p in zip(truth, predicted)]))
    labels = sorted(db.intents)
    confusion = (pd.crosstab(pd.Series(truth, name="true"), pd.Series(predicted, name="predicted"))
                 .reindex(index=labels, columns=labels, fill_value=0))
    return ZeroShotResult(accuracy=accuracy, predictions=predictions, confusion=confusion)
