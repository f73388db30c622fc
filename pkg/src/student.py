"""
Audio-only student model
Classifies intents from audio alone while matching the teacher's joint embedding
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import EncoderConfig, StudentConfig, TrainingConfig
from src.encoders import AudioBackbone, Corpus, ProjectionHead, Utterance, checksum_arrays
from src.exceptions import ConfigError, DimensionError, EmptyInputError
from src.numerics import (
    AdamState,
    PlateauScheduler,
    adam_step,
    derive_rng,
    he_init,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    scheduler_step,
    softmax_cross_entropy,
)
from src.teacher import TeacherModel, teacher_outputs
from src.utils import MetricsTracker
from src.zeroshot import ExtractionHeads

logger = logging.getLogger(__name__)


@dataclass
class StudentModel:
    audio_backbone: AudioBackbone
    audio_head: ProjectionHead
    ff_w: np.ndarray
    ff_b: np.ndarray
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    intents: List[int]
    gamma: float = 10.0
    distill: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.ff_w.shape != (self.audio_head.d_out, self.audio_head.d_out):
            raise DimensionError(f"feed-forward {self.ff_w.shape} must map the embedding size to itself")
        if self.classifier_w.shape[1] != len(self.intents):
            raise DimensionError(
                f"classifier outputs {self.classifier_w.shape[1]} for {len(self.intents)} intents"
            )
        self._index = {intent: k for k, intent in enumerate(self.intents)}

    @classmethod
    def build(cls, intents: Sequence[int], encoders: EncoderConfig = None,
              student: StudentConfig = None,
              teacher: Optional[TeacherModel] = None) -> "StudentModel":
        encoders = encoders or EncoderConfig()
        student = student or StudentConfig()
        if not intents:
            raise ConfigError("student needs at least one intent")
        if student.init_from_teacher_backbone and teacher is None:
            logger.info("no teacher to copy the audio backbone from; using the seeded backbone")
        if student.init_from_teacher_backbone and teacher is not None:
            backbone = teacher.audio_backbone.copy()
            backbone.layer2_trainable = encoders.layer2_trainable
        else:
            backbone = AudioBackbone.from_seed(encoders.audio_seed, encoders.d_raw_audio,
                                               encoders.d_hid, encoders.layer2_trainable)
        rng = derive_rng(student.head_seed, "student-heads")
        d_emb = encoders.d_emb
        return cls(
            audio_backbone=backbone,
            audio_head=ProjectionHead.from_rng(rng, backbone.d_hid, d_emb, encoders.audio_dropout),
            ff_w=he_init(rng, d_emb, d_emb),
            ff_b=np.zeros((1, d_emb)),
            classifier_w=he_init(rng, d_emb, len(intents)),
            classifier_b=np.zeros((1, len(intents))),
            intents=list(intents),
            gamma=student.gamma,
            distill=student.distill,
        )

    def label_index(self, intent: int) -> int:
        if intent not in self._index:
            raise ConfigError(f"intent {intent} is not in the student's intent space")
        return self._index[intent]

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        params = {f"audio_backbone.{k}": v for k, v in self.audio_backbone.trainable_parameters().items()}
        params.update({f"audio_head.{k}": v for k, v in self.audio_head.parameters().items()})
        params.update({
            "ff.w": self.ff_w,
            "ff.b": self.ff_b,
            "classifier.w": self.classifier_w,
            "classifier.b": self.classifier_b,
        })
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"audio_backbone.{k}": v for k, v in self.audio_backbone.state_dict().items()}
        state.update({f"audio_head.{k}": v for k, v in self.audio_head.parameters().items()})
        state.update({
            "ff.w": self.ff_w,
            "ff.b": self.ff_b,
            "classifier.w": self.classifier_w,
            "classifier.b": self.classifier_b,
        })
        return state

    def hyperparameters(self) -> dict:
        return {
            "intents": list(self.intents),
            "gamma": self.gamma,
            "distill": self.distill,
            "audio_dropout": self.audio_head.dropout_rate,
            "layer2_trainable": self.audio_backbone.layer2_trainable,
            "audio_seed": self.audio_backbone.seed,
        }

    @classmethod
    def from_state(cls, hyper: dict, state: Dict[str, np.ndarray]) -> "StudentModel":
        return cls(
            audio_backbone=AudioBackbone(state["audio_backbone.w1"], state["audio_backbone.b1"],
                                         state["audio_backbone.w2"], state["audio_backbone.b2"],
                                         hyper["layer2_trainable"], hyper["audio_seed"]),
            audio_head=ProjectionHead(state["audio_head.w"], state["audio_head.b"], hyper["audio_dropout"]),
            ff_w=state["ff.w"],
            ff_b=state["ff.b"],
            classifier_w=state["classifier.w"],
            classifier_b=state["classifier.b"],
            intents=hyper["intents"],
            gamma=hyper["gamma"],
            distill=hyper["distill"],
        )

    def checksum(self) -> str:
        return checksum_arrays(self.state_dict(), repr(sorted(self.hyperparameters().items())))

    def extraction_heads(self) -> ExtractionHeads:
        return ExtractionHeads(projection=self.audio_head, ff_w=self.ff_w, ff_b=self.ff_b)


@dataclass
class StudentLoss:
    intent: float
    student: float
    total: float


def _forward(model: StudentModel, frames_list: Sequence[np.ndarray], rng, training: bool):
    pooled, backbone_cache = model.audio_backbone.forward(frames_list)
    E_p, head_cache = model.audio_head.forward(pooled, rng, training)
    z = linear_forward(E_p, model.ff_w, model.ff_b)
    E_s = relu_forward(z)
    logits = linear_forward(E_s, model.classifier_w, model.classifier_b)
    return E_s, logits, (backbone_cache, head_cache, E_p, z)


def student_forward(model: StudentModel, frames: np.ndarray, rng=None,
                    training: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward one utterance

    Returns:
        (E_s, logits) each with a single row
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError("student_forward needs at least one frame")
    E_s, logits, _ = _forward(model, [frames], rng, training)
    return E_s, logits


def loss_student(E_at: np.ndarray, E_s: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Squared Euclidean distance between teacher and student embeddings, mean over rows

    Returns:
        (loss, grad_E_s)
    """
    E_at = np.asarray(E_at, dtype=np.float64)
    E_s = np.asarray(E_s, dtype=np.float64)
    if E_at.shape != E_s.shape:
        raise DimensionError(f"teacher embeddings {E_at.shape} vs student embeddings {E_s.shape}")
    n = E_s.shape[0]
    if n == 0:
        raise EmptyInputError("distillation loss over an empty batch")
    diff = E_s - E_at
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def loss_total(l_intent: float, l_student: float, gamma: float, distill: bool = True) -> float:
    if gamma < 0:
        raise ConfigError(f"gamma must be non-negative, got {gamma}")
    if not distill:
        return l_intent
    return l_intent + gamma * l_student


def loss_and_grads(model: StudentModel, batch: Sequence[Utterance], targets: Optional[np.ndarray],
                   rng=None, training: bool = True) -> Tuple[StudentLoss, Dict[str, np.ndarray]]:
    """Combined loss and analytic gradients; targets are the teacher's E_at rows or None"""
    E_s, logits, (backbone_cache, head_cache, E_p, z) = _forward(
        model, [u.frames for u in batch], rng, training)
    labels = [model.label_index(u.intent) for u in batch]

    l_intent, g_logits = softmax_cross_entropy(logits, labels)
    grads = {}
    g_E_s, grads["classifier.w"], grads["classifier.b"] = linear_backward(E_s, model.classifier_w, g_logits)

    l_student = 0.0
    use_targets = targets is not None and model.distill
    if use_targets:
        l_student, g_dist = loss_student(targets, E_s)
        g_E_s = g_E_s + model.gamma * g_dist
    total = loss_total(l_intent, l_student, model.gamma, use_targets)

    g_z = relu_backward(z, g_E_s)
    g_E_p, grads["ff.w"], grads["ff.b"] = linear_backward(E_p, model.ff_w, g_z)
    g_pooled, head_grads = model.audio_head.backward(head_cache, g_E_p)
    grads.update({f"audio_head.{k}": v for k, v in head_grads.items()})
    backbone_grads = model.audio_backbone.backward(backbone_cache, g_pooled)
    grads.update({f"audio_backbone.{k}": v for k, v in backbone_grads.items()})

    return StudentLoss(intent=l_intent, student=l_student, total=total), grads


def _batches(items: Sequence, batch_size: int):
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


def student_outputs(model: StudentModel, utterances: Sequence[Utterance],
                    batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode (E_s, logits) for a whole split"""
    parts = [_forward(model, [u.frames for u in chunk], None, False)
             for chunk in _batches(list(utterances), batch_size)]
    return np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts])


def student_accuracy(model: StudentModel, utterances: Sequence[Utterance]) -> float:
    if not utterances:
        raise EmptyInputError("accuracy over an empty split")
    _, logits = student_outputs(model, utterances)
    labels = np.array([model.label_index(u.intent) for u in utterances])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_embed_distance(model: StudentModel, utterances: Sequence[Utterance],
                        targets: np.ndarray) -> float:
    E_s, _ = student_outputs(model, utterances)
    return loss_student(targets, E_s)[0]


def student_train(student: StudentModel, teacher: Optional[TeacherModel], corpus: Corpus,
                  config: TrainingConfig = None,
                  tracker: Optional[MetricsTracker] = None) -> Tuple[StudentModel, MetricsTracker]:
    """
    Train the student on intent cross-entropy plus gamma times the embedding distance

    The teacher runs in eval mode and is never updated. Without distillation
    (or without a teacher) this trains the audio-only baseline. The returned
    parameters are those of the best epoch: highest dev accuracy, ties broken
    by lower dev loss.

    Returns:
        (student, tracker) with one metrics row per epoch, epoch 0 before any update
    """
    config = config or TrainingConfig()
    tracker = MetricsTracker() if tracker is None else tracker
    train = corpus.split("train")
    dev = corpus.split("dev")
    if not train or not dev:
        raise ConfigError("student training needs non-empty train and dev splits")
    if teacher is not None and list(teacher.intents) != list(student.intents):
        raise ConfigError(
            f"teacher intents {teacher.intents} do not match student intents {student.intents}"
        )
    if student.distill and teacher is None:
        raise ConfigError("distillation is enabled but no teacher was given")
    for intent in corpus.intents:
        student.label_index(intent)

    all_targets = teacher_outputs(teacher, train).E_at if teacher is not None else None
    dev_targets = teacher_outputs(teacher, dev).E_at if teacher is not None else None

    def batch_targets(indices):
        return None if all_targets is None else all_targets[indices]

    def dev_loss():
        losses = [loss_and_grads(student, dev[i:i + config.batch_size],
                                 None if dev_targets is None else dev_targets[i:i + config.batch_size],
                                 None, training=False)[0].total
                  for i in range(0, len(dev), config.batch_size)]
        return float(np.mean(losses))

    params = student.trainable_parameters()
    adam = AdamState(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    sched = PlateauScheduler(current_lr=config.learning_rate, patience=config.plateau_patience,
                             factor=config.plateau_factor, min_lr=config.min_lr)
    rng = derive_rng(config.seed, "student-train")

    def distance():
        if all_targets is None:
            return float("nan")
        return mean_embed_distance(student, train, all_targets)

    start = [loss_and_grads(student, train[i:i + config.batch_size],
                            batch_targets(np.arange(i, min(i + config.batch_size, len(train)))),
                            None, training=False)[0]
             for i in range(0, len(train), config.batch_size)]
    dev_acc, dev_total = student_accuracy(student, dev), dev_loss()
    tracker.add_row(
        epoch=0,
        intent_loss=float(np.mean([l.intent for l in start])),
        student_loss=float(np.mean([l.student for l in start])),
        total_loss=float(np.mean([l.total for l in start])),
        dev_accuracy=dev_acc,
        dev_loss=dev_total,
        mean_embed_distance=distance(),
        lr=sched.current_lr,
    )
    best_acc, best_loss, since_best = dev_acc, dev_total, 0
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        lr = sched.current_lr
        epoch_losses = []
        index_batches = list(_batches(order, config.batch_size))
        for indices in tqdm(index_batches, desc=f"student epoch {epoch}",
                            disable=not config.progress, leave=False):
            batch = [train[i] for i in indices]
            losses, grads = loss_and_grads(student, batch, batch_targets(indices), rng, training=True)
            adam.lr = lr
            adam_step(params, grads, adam)
            epoch_losses.append(losses)

        dev_acc, dev_total = student_accuracy(student, dev), dev_loss()
        row = tracker.add_row(
            epoch=epoch,
            intent_loss=float(np.mean([l.intent for l in epoch_losses])),
            student_loss=float(np.mean([l.student for l in epoch_losses])),
            total_loss=float(np.mean([l.total for l in epoch_losses])),
            dev_accuracy=dev_acc,
            dev_loss=dev_total,
            mean_embed_distance=distance(),
            lr=lr,
        )
        logger.info("student %s", tracker.format_row(row))
        scheduler_step(sched, dev_acc)

        if dev_acc > best_acc or (dev_acc == best_acc and dev_total < best_loss):
            best_acc, best_loss, since_best = dev_acc, dev_total, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            since_best += 1
            if since_best >= config.early_stopping_patience:
                logger.info("student early stop at epoch %d (best dev accuracy %.4f)", epoch, best_acc)
                break

    for name, value in best_params.items():
        params[name][...] = value
    return student, tracker
