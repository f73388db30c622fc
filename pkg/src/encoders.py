"""
Pseudo-backbones and projection heads
Seeded frozen feature maps stand in for the pretrained audio and text encoders
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import DimensionError, EmptyInputError, LabelIndexError
from src.numerics import (
    derive_rng,
    dropout_backward,
    dropout_forward,
    he_init,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    segment_mean_pool,
    segment_mean_pool_backward,
)

SPLITS = ("train", "dev", "test")


def checksum_arrays(named: Dict[str, np.ndarray], extra: str = "") -> str:
    """sha256 over names, shapes and little-endian float64 bytes"""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    h.update(extra.encode("utf-8"))
    return h.hexdigest()


@dataclass
class Utterance:
    """Paired sample: pseudo-audio frames, transcript tokens and intent"""

    id: str
    frames: np.ndarray
    tokens: Tuple[int, ...]
    intent: int
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.tokens = tuple(int(t) for t in self.tokens)
        if self.frames.ndim != 2 or self.frames.shape[0] == 0:
            raise EmptyInputError(f"utterance {self.id} has no frames")
        if not self.tokens:
            raise EmptyInputError(f"utterance {self.id} has no tokens")


@dataclass
class Corpus:
    """Utterances plus the intent vocabulary their classifier predicts over"""

    utterances: List[Utterance]
    intents: List[int]
    vocab_size: int

    def __post_init__(self):
        self.intents = [int(i) for i in self.intents]
        self._index = {intent: k for k, intent in enumerate(self.intents)}
        stray = sorted({u.intent for u in self.utterances} - set(self._index))
        if stray:
            raise LabelIndexError(f"utterance intents {stray} not in corpus vocabulary")

    def split(self, name: str) -> List[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def label_index(self, intent: int) -> int:
        try:
            return self._index[intent]
        except KeyError:
            raise LabelIndexError(f"intent {intent} not in corpus vocabulary")

    def labels(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return np.array([self.label_index(u.intent) for u in utterances], dtype=np.int64)

    def get(self, utterance_id: str) -> Utterance:
        for u in self.utterances:
            if u.id == utterance_id:
                return u
        raise KeyError(utterance_id)


@dataclass
class AudioBackbone:
    """Two-layer per-frame ReLU MLP followed by mean pooling over time"""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    layer2_trainable: bool = True
    seed: int = 0

    @classmethod
    def from_seed(cls, seed: int, d_raw: int, d_hid: int,
                  layer2_trainable: bool = True) -> "AudioBackbone":
        rng = derive_rng(seed, "audio-backbone")
        return cls(
            w1=he_init(rng, d_raw, d_hid),
            b1=rng.normal(0.0, 0.1, size=(1, d_hid)),
            w2=he_init(rng, d_hid, d_hid),
            b2=rng.normal(0.0, 0.1, size=(1, d_hid)),
            layer2_trainable=layer2_trainable,
            seed=seed,
        )

    @property
    def d_raw(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hid(self) -> int:
        return self.w2.shape[1]

    def forward(self, frames_list: Sequence[np.ndarray]):
        if not frames_list:
            raise EmptyInputError("empty batch of utterances")
        lengths = [np.shape(f)[0] for f in frames_list]
        if min(lengths) == 0:
            raise EmptyInputError("utterance with zero frames")
        stacked = np.vstack(frames_list)
        h1 = relu_forward(linear_forward(stacked, self.w1, self.b1))
        z2 = linear_forward(h1, self.w2, self.b2)
        h2 = relu_forward(z2)
        pooled, pool_op = segment_mean_pool(h2, lengths)
        return pooled, (h1, z2, pool_op)

    def backward(self, cache, grad_pooled: np.ndarray) -> Dict[str, np.ndarray]:
        if not self.layer2_trainable:
            return {}
        h1, z2, pool_op = cache
        grad_h2 = segment_mean_pool_backward(pool_op, grad_pooled)
        grad_z2 = relu_backward(z2, grad_h2)
        _, grad_w2, grad_b2 = linear_backward(h1, self.w2, grad_z2)
        return {"w2": grad_w2, "b2": grad_b2}

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        return {"w2": self.w2, "b2": self.b2} if self.layer2_trainable else {}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def frozen_checksum(self) -> str:
        frozen = {"w1": self.w1, "b1": self.b1}
        if not self.layer2_trainable:
            frozen.update(w2=self.w2, b2=self.b2)
        return checksum_arrays(frozen)

    def checksum(self) -> str:
        return checksum_arrays(self.state_dict(), f"trainable={self.layer2_trainable}")

    def copy(self) -> "AudioBackbone":
        return AudioBackbone(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                             self.layer2_trainable, self.seed)


@dataclass
class TextBackbone:
    """Frozen token table plus one ReLU mixing layer, mean-pooled over tokens"""

    token_table: np.ndarray
    w: np.ndarray
    b: np.ndarray
    seed: int = 0

    @classmethod
    def from_seed(cls, seed: int, vocab_size: int, d_hid: int) -> "TextBackbone":
        rng = derive_rng(seed, "text-backbone")
        return cls(
            token_table=rng.normal(0.0, 1.0, size=(vocab_size, d_hid)),
            w=he_init(rng, d_hid, d_hid),
            b=rng.normal(0.0, 0.1, size=(1, d_hid)),
            seed=seed,
        )

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    def forward(self, tokens_list: Sequence[Sequence[int]]) -> np.ndarray:
        if not tokens_list:
            raise EmptyInputError("empty batch of transcripts")
        ids = []
        lengths = []
        for tokens in tokens_list:
            if len(tokens) == 0:
                raise EmptyInputError("transcript with zero tokens")
            ids.extend(tokens)
            lengths.append(len(tokens))
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise LabelIndexError(f"token ids must lie in [0, {self.vocab_size})")
        mixed = relu_forward(linear_forward(self.token_table[ids], self.w, self.b))
        pooled, _ = segment_mean_pool(mixed, lengths)
        return pooled

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {"token_table": self.token_table, "w": self.w, "b": self.b}

    def checksum(self) -> str:
        return checksum_arrays(self.state_dict())


@dataclass
class ProjectionHead:
    """Linear projection to the shared embedding size, with dropout at train time"""

    w: np.ndarray
    b: np.ndarray
    dropout_rate: float = 0.2

    @classmethod
    def from_rng(cls, rng: np.random.Generator, d_in: int, d_out: int,
                 dropout_rate: float) -> "ProjectionHead":
        return cls(w=he_init(rng, d_in, d_out), b=np.zeros((1, d_out)), dropout_rate=dropout_rate)

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator], training: bool):
        out = linear_forward(x, self.w, self.b)
        out, mask = dropout_forward(out, self.dropout_rate, rng, training)
        return out, (np.asarray(x, dtype=np.float64), mask)

    def backward(self, cache, grad_out: np.ndarray):
        x, mask = cache
        grad_lin = dropout_backward(grad_out, mask)
        grad_x, grad_w, grad_b = linear_backward(x, self.w, grad_lin)
        return grad_x, {"w": grad_w, "b": grad_b}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.w.copy(), self.b.copy(), self.dropout_rate)


def encode_audio(backbone: AudioBackbone, frames: np.ndarray) -> np.ndarray:
    """Mean-pooled backbone features of one utterance (1 x d_hid)"""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("encode_audio needs at least one frame")
    if frames.shape[1] != backbone.d_raw:
        raise DimensionError(f"frames {frames.shape} do not fit backbone input {backbone.d_raw}")
    pooled, _ = backbone.forward([frames])
    return pooled


def encode_text(backbone: TextBackbone, tokens: Sequence[int]) -> np.ndarray:
    """Mean-pooled text features of one transcript (1 x d_hid)"""
    return backbone.forward([list(tokens)])


def _project(head: ProjectionHead, pooled: np.ndarray, rng, training: bool) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[0] != 1 or pooled.shape[1] != head.w.shape[0]:
        raise DimensionError(f"pooled {pooled.shape} does not fit head input {head.w.shape[0]}")
    out, _ = head.forward(pooled, rng, training)
    return out


def project_audio(head: ProjectionHead, pooled: np.ndarray, rng=None, training: bool = False) -> np.ndarray:
    return _project(head, pooled, rng, training)


def project_text(head: ProjectionHead, pooled: np.ndarray, rng=None, training: bool = False) -> np.ndarray:
    return _project(head, pooled, rng, training)
