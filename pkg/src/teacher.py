"""
Multimodal teacher model
Audio and text embeddings are fused for intent classification and, in the
MM-CL variant, aligned with a symmetric contrastive loss
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import EncoderConfig, TeacherConfig, TrainingConfig
from src.encoders import (
    AudioBackbone,
    Corpus,
    ProjectionHead,
    TextBackbone,
    Utterance,
    checksum_arrays,
)
from src.exceptions import ConfigError, DimensionError, EmptyInputError
from src.numerics import (
    AdamState,
    PlateauScheduler,
    adam_step,
    derive_rng,
    dropout_backward,
    dropout_forward,
    he_init,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    scheduler_step,
    softmax_cross_entropy,
)
from src.utils import MetricsTracker
from src.zeroshot import ExtractionHeads

logger = logging.getLogger(__name__)


@dataclass
class TeacherModel:
    """Frozen text backbone, partially trainable audio backbone, trainable heads"""

    audio_backbone: AudioBackbone
    text_backbone: TextBackbone
    audio_head: ProjectionHead
    text_head: ProjectionHead
    fusion_w: np.ndarray
    fusion_b: np.ndarray
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    intents: List[int]
    fusion_dropout: float = 0.3
    tau: float = 0.007
    use_contrastive: bool = True
    normalize_before_sim: bool = True
    tau_literal_multiply: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        d_emb = self.audio_head.d_out
        if self.text_head.d_out != d_emb or self.fusion_w.shape[0] != 2 * d_emb:
            raise DimensionError(
                f"fusion input {self.fusion_w.shape[0]} must be twice the embedding size {d_emb}"
            )
        if self.classifier_w.shape[1] != len(self.intents):
            raise DimensionError(
                f"classifier outputs {self.classifier_w.shape[1]} for {len(self.intents)} intents"
            )
        self._index = {intent: k for k, intent in enumerate(self.intents)}

    @classmethod
    def build(cls, intents: Sequence[int], vocab_size: int,
              encoders: EncoderConfig = None, teacher: TeacherConfig = None) -> "TeacherModel":
        encoders = encoders or EncoderConfig()
        teacher = teacher or TeacherConfig()
        if not intents:
            raise ConfigError("teacher needs at least one seen intent")
        rng = derive_rng(teacher.head_seed, "teacher-heads")
        d_hid, d_emb = encoders.d_hid, encoders.d_emb
        return cls(
            audio_backbone=AudioBackbone.from_seed(encoders.audio_seed, encoders.d_raw_audio, d_hid,
                                                   encoders.layer2_trainable),
            text_backbone=TextBackbone.from_seed(encoders.text_seed, vocab_size, d_hid),
            audio_head=ProjectionHead.from_rng(rng, d_hid, d_emb, encoders.audio_dropout),
            text_head=ProjectionHead.from_rng(rng, d_hid, d_emb, encoders.text_dropout),
            fusion_w=he_init(rng, 2 * d_emb, d_emb),
            fusion_b=np.zeros((1, d_emb)),
            classifier_w=he_init(rng, d_emb, len(intents)),
            classifier_b=np.zeros((1, len(intents))),
            intents=list(intents),
            fusion_dropout=teacher.fusion_dropout,
            tau=teacher.tau,
            use_contrastive=teacher.use_contrastive,
            normalize_before_sim=teacher.normalize_before_sim,
            tau_literal_multiply=teacher.tau_literal_multiply,
        )

    def label_index(self, intent: int) -> int:
        if intent not in self._index:
            raise ConfigError(f"intent {intent} is not in the teacher's intent space")
        return self._index[intent]

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        params = {f"audio_backbone.{k}": v for k, v in self.audio_backbone.trainable_parameters().items()}
        params.update({f"audio_head.{k}": v for k, v in self.audio_head.parameters().items()})
        params.update({f"text_head.{k}": v for k, v in self.text_head.parameters().items()})
        params.update({
            "fusion.w": self.fusion_w,
            "fusion.b": self.fusion_b,
            "classifier.w": self.classifier_w,
            "classifier.b": self.classifier_b,
        })
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"audio_backbone.{k}": v for k, v in self.audio_backbone.state_dict().items()}
        state.update({f"text_backbone.{k}": v for k, v in self.text_backbone.state_dict().items()})
        state.update({f"audio_head.{k}": v for k, v in self.audio_head.parameters().items()})
        state.update({f"text_head.{k}": v for k, v in self.text_head.parameters().items()})
        state.update({
            "fusion.w": self.fusion_w,
            "fusion.b": self.fusion_b,
            "classifier.w": self.classifier_w,
            "classifier.b": self.classifier_b,
        })
        return state

    def hyperparameters(self) -> dict:
        return {
            "intents": list(self.intents),
            "fusion_dropout": self.fusion_dropout,
            "tau": self.tau,
            "use_contrastive": self.use_contrastive,
            "normalize_before_sim": self.normalize_before_sim,
            "tau_literal_multiply": self.tau_literal_multiply,
            "audio_dropout": self.audio_head.dropout_rate,
            "text_dropout": self.text_head.dropout_rate,
            "layer2_trainable": self.audio_backbone.layer2_trainable,
            "audio_seed": self.audio_backbone.seed,
            "text_seed": self.text_backbone.seed,
        }

    @classmethod
    def from_state(cls, hyper: dict, state: Dict[str, np.ndarray]) -> "TeacherModel":
        return cls(
            audio_backbone=AudioBackbone(state["audio_backbone.w1"], state["audio_backbone.b1"],
                                         state["audio_backbone.w2"], state["audio_backbone.b2"],
                                         hyper["layer2_trainable"], hyper["audio_seed"]),
            text_backbone=TextBackbone(state["text_backbone.token_table"], state["text_backbone.w"],
                                       state["text_backbone.b"], hyper["text_seed"]),
            audio_head=ProjectionHead(state["audio_head.w"], state["audio_head.b"], hyper["audio_dropout"]),
            text_head=ProjectionHead(state["text_head.w"], state["text_head.b"], hyper["text_dropout"]),
            fusion_w=state["fusion.w"],
            fusion_b=state["fusion.b"],
            classifier_w=state["classifier.w"],
            classifier_b=state["classifier.b"],
            intents=hyper["intents"],
            fusion_dropout=hyper["fusion_dropout"],
            tau=hyper["tau"],
            use_contrastive=hyper["use_contrastive"],
            normalize_before_sim=hyper["normalize_before_sim"],
            tau_literal_multiply=hyper["tau_literal_multiply"],
        )

    def checksum(self) -> str:
        return checksum_arrays(self.state_dict(), repr(sorted(self.hyperparameters().items())))

    def extraction_heads(self) -> ExtractionHeads:
        """The teacher has no feed-forward layer above its audio projection"""
        return ExtractionHeads(projection=self.audio_head)


@dataclass
class TeacherBatchOutput:
    E_a: np.ndarray
    E_t: np.ndarray
    E_at: np.ndarray
    logits: np.ndarray
    C: Optional[np.ndarray] = None


@dataclass
class TeacherLoss:
    total: float
    ic: float
    cl: float


def _fuse_forward(model: TeacherModel, E_a, E_t, rng, training: bool):
    if E_a.shape[0] != E_t.shape[0]:
        raise DimensionError(f"batch mismatch: audio {E_a.shape[0]} rows, text {E_t.shape[0]} rows")
    concat = np.hstack([E_a, E_t])
    z = linear_forward(concat, model.fusion_w, model.fusion_b)
    E_at, mask = dropout_forward(relu_forward(z), model.fusion_dropout, rng, training)
    return E_at, (concat, z, mask)


def fuse(model: TeacherModel, E_a: np.ndarray, E_t: np.ndarray, rng=None,
         training: bool = False) -> np.ndarray:
    """Concatenate, project, ReLU, dropout"""
    E_at, _ = _fuse_forward(model, E_a, E_t, rng, training)
    return E_at


def classify(model: TeacherModel, E_at: np.ndarray) -> np.ndarray:
    """Pre-softmax intent logits"""
    return linear_forward(E_at, model.classifier_w, model.classifier_b)


def loss_ic(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    return softmax_cross_entropy(logits, labels)


def similarity_scale(tau: float, literal_multiply: bool = False) -> float:
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return tau if literal_multiply else 1.0 / tau


def similarity_matrix(E_a: np.ndarray, E_t: np.ndarray, tau: float,
                      literal_multiply: bool = False) -> np.ndarray:
    """C[i][j] = scale(tau) * <E_a[i], E_t[j]>"""
    if E_a.shape != E_t.shape:
        raise DimensionError(f"audio embeddings {E_a.shape} vs text embeddings {E_t.shape}")
    return similarity_scale(tau, literal_multiply) * (E_a @ E_t.T)


def loss_cl(C: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Symmetric contrastive loss over a batch similarity matrix

    Cross-entropy of the rows (audio axis) and of the columns (text axis),
    each against the diagonal, averaged.

    Returns:
        (loss, grad_C)
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {C.shape}")
    if C.shape[0] == 0:
        raise EmptyInputError("empty similarity matrix")
    targets = np.arange(C.shape[0])
    l_audio, g_audio = softmax_cross_entropy(C, targets)
    l_text, g_text = softmax_cross_entropy(C.T, targets)
    return 0.5 * (l_audio + l_text), 0.5 * (g_audio + g_text.T)


def loss_mm(l_ic: float, l_cl: float, use_contrastive: bool = True) -> float:
    if use_contrastive:
        return 0.5 * (l_ic + l_cl)
    return l_ic


def _forward(model: TeacherModel, batch: Sequence[Utterance], rng, training: bool):
    if not batch:
        raise EmptyInputError("teacher forward on an empty batch")
    pooled_a, audio_cache = model.audio_backbone.forward([u.frames for u in batch])
    pooled_t = model.text_backbone.forward([u.tokens for u in batch])
    E_a, audio_head_cache = model.audio_head.forward(pooled_a, rng, training)
    E_t, text_head_cache = model.text_head.forward(pooled_t, rng, training)
    E_at, fuse_cache = _fuse_forward(model, E_a, E_t, rng, training)
    logits = classify(model, E_at)

    C, sim_cache = None, None
    if model.use_contrastive:
        if model.normalize_before_sim:
            A, a_norms = l2_normalize_rows(E_a)
            T, t_norms = l2_normalize_rows(E_t)
        else:
            A, a_norms, T, t_norms = E_a, None, E_t, None
        C = similarity_matrix(A, T, model.tau, model.tau_literal_multiply)
        sim_cache = (A, a_norms, T, t_norms)

    out = TeacherBatchOutput(E_a=E_a, E_t=E_t, E_at=E_at, logits=logits, C=C)
    cache = {
        "audio": audio_cache,
        "audio_head": audio_head_cache,
        "text_head": text_head_cache,
        "fuse": fuse_cache,
        "sim": sim_cache,
    }
    return out, cache


def teacher_forward(model: TeacherModel, batch: Sequence[Utterance], rng=None,
                    training: bool = False) -> TeacherBatchOutput:
    out, _ = _forward(model, batch, rng, training)
    return out


def loss_and_grads(model: TeacherModel, batch: Sequence[Utterance], rng=None,
                   training: bool = True) -> Tuple[TeacherLoss, Dict[str, np.ndarray]]:
    """Combined loss and analytic gradients for every trainable parameter"""
    out, cache = _forward(model, batch, rng, training)
    labels = [model.label_index(u.intent) for u in batch]

    l_ic, g_logits = loss_ic(out.logits, labels)
    l_cl, g_C = loss_cl(out.C) if model.use_contrastive else (float("nan"), None)
    total = loss_mm(l_ic, l_cl, model.use_contrastive)
    w_ic = 0.5 if model.use_contrastive else 1.0

    grads = {}
    g_E_at, grads["classifier.w"], grads["classifier.b"] = linear_backward(
        out.E_at, model.classifier_w, w_ic * g_logits)

    concat, z, fuse_mask = cache["fuse"]
    g_z = relu_backward(z, dropout_backward(g_E_at, fuse_mask))
    g_concat, grads["fusion.w"], grads["fusion.b"] = linear_backward(concat, model.fusion_w, g_z)
    d_emb = out.E_a.shape[1]
    g_E_a = g_concat[:, :d_emb].copy()
    g_E_t = g_concat[:, d_emb:].copy()

    if model.use_contrastive:
        A, a_norms, T, t_norms = cache["sim"]
        scale = similarity_scale(model.tau, model.tau_literal_multiply)
        g_C = 0.5 * g_C
        g_A = scale * (g_C @ T)
        g_T = scale * (g_C.T @ A)
        if model.normalize_before_sim:
            g_A = l2_normalize_rows_backward(A, a_norms, g_A)
            g_T = l2_normalize_rows_backward(T, t_norms, g_T)
        g_E_a += g_A
        g_E_t += g_T

    g_pooled_a, head_grads = model.audio_head.backward(cache["audio_head"], g_E_a)
    grads.update({f"audio_head.{k}": v for k, v in head_grads.items()})
    _, head_grads = model.text_head.backward(cache["text_head"], g_E_t)
    grads.update({f"text_head.{k}": v for k, v in head_grads.items()})
    backbone_grads = model.audio_backbone.backward(cache["audio"], g_pooled_a)
    grads.update({f"audio_backbone.{k}": v for k, v in backbone_grads.items()})

    return TeacherLoss(total=total, ic=l_ic, cl=l_cl), grads


def _batches(items: Sequence, batch_size: int):
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


def teacher_outputs(model: TeacherModel, utterances: Sequence[Utterance],
                    batch_size: int = 64) -> TeacherBatchOutput:
    """Eval-mode outputs for a whole split, computed in chunks"""
    parts = [teacher_forward(model, chunk) for chunk in _batches(list(utterances), batch_size)]
    return TeacherBatchOutput(
        E_a=np.vstack([p.E_a for p in parts]),
        E_t=np.vstack([p.E_t for p in parts]),
        E_at=np.vstack([p.E_at for p in parts]),
        logits=np.vstack([p.logits for p in parts]),
    )


def teacher_accuracy(model: TeacherModel, utterances: Sequence[Utterance]) -> float:
    if not utterances:
        raise EmptyInputError("accuracy over an empty split")
    logits = teacher_outputs(model, utterances).logits
    labels = np.array([model.label_index(u.intent) for u in utterances])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_pair_cosine(model: TeacherModel, utterances: Sequence[Utterance]) -> float:
    """Mean cosine of each audio embedding with its own transcript; zero rows count as 0"""
    out = teacher_outputs(model, utterances)
    norms = np.linalg.norm(out.E_a, axis=1) * np.linalg.norm(out.E_t, axis=1)
    dots = np.sum(out.E_a * out.E_t, axis=1)
    cosines = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return float(np.mean(cosines))


def _eval_losses(model: TeacherModel, utterances: List[Utterance], batch_size: int) -> TeacherLoss:
    """Eval-mode losses averaged over chunks"""
    losses = [loss_and_grads(model, chunk, None, training=False)[0]
              for chunk in _batches(utterances, batch_size)]
    return TeacherLoss(
        total=float(np.mean([l.total for l in losses])),
        ic=float(np.mean([l.ic for l in losses])),
        cl=float(np.mean([l.cl for l in losses])),
    )


def teacher_train(model: TeacherModel, corpus: Corpus, config: TrainingConfig = None,
                  tracker: Optional[MetricsTracker] = None) -> Tuple[TeacherModel, MetricsTracker]:
    """
    Train the teacher with Adam and a plateau scheduler on dev accuracy

    Gradients reach the trainable audio layer, both heads, fusion and classifier;
    the text backbone is never updated. The returned parameters are those of
    the best epoch: highest dev accuracy, ties broken by lower dev loss.

    Returns:
        (model, tracker) with one metrics row per epoch, epoch 0 before any update
    """
    config = config or TrainingConfig()
    tracker = MetricsTracker() if tracker is None else tracker
    train = corpus.split("train")
    dev = corpus.split("dev")
    if not train or not dev:
        raise ConfigError("teacher training needs non-empty train and dev splits")
    for intent in corpus.intents:
        model.label_index(intent)

    params = model.trainable_parameters()
    adam = AdamState(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    sched = PlateauScheduler(current_lr=config.learning_rate, patience=config.plateau_patience,
                             factor=config.plateau_factor, min_lr=config.min_lr)
    rng = derive_rng(config.seed, "teacher-train")

    start = _eval_losses(model, train, config.batch_size)
    dev_acc = teacher_accuracy(model, dev)
    dev_loss = _eval_losses(model, dev, config.batch_size).total
    tracker.add_row(epoch=0, train_loss=start.total, ic_loss=start.ic, cl_loss=start.cl,
                    dev_accuracy=dev_acc, dev_loss=dev_loss, lr=sched.current_lr,
                    mean_pair_cosine=mean_pair_cosine(model, train))
    best_acc, best_loss, since_best = dev_acc, dev_loss, 0
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        epoch_losses = []
        lr = sched.current_lr
        batches = list(_batches([train[i] for i in order], config.batch_size))
        for batch in tqdm(batches, desc=f"teacher epoch {epoch}", disable=not config.progress, leave=False):
            losses, grads = loss_and_grads(model, batch, rng, training=True)
            adam.lr = lr
            adam_step(params, grads, adam)
            epoch_losses.append(losses)

        dev_acc = teacher_accuracy(model, dev)
        dev_loss = _eval_losses(model, dev, config.batch_size).total
        row = tracker.add_row(
            epoch=epoch,
            train_loss=float(np.mean([l.total for l in epoch_losses])),
            ic_loss=float(np.mean([l.ic for l in epoch_losses])),
            cl_loss=float(np.mean([l.cl for l in epoch_losses])),
            dev_accuracy=dev_acc,
            dev_loss=dev_loss,
            lr=lr,
            mean_pair_cosine=mean_pair_cosine(model, train),
        )
        logger.info("teacher %s", tracker.format_row(row))
        scheduler_step(sched, dev_acc)

        if dev_acc > best_acc or (dev_acc == best_acc and dev_loss < best_loss):
            best_acc, best_loss, since_best = dev_acc, dev_loss, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            since_best += 1
            if since_best >= config.early_stopping_patience:
                logger.info("teacher early stop at epoch %d (best dev accuracy %.4f)", epoch, best_acc)
                break

    for name, value in best_params.items():
        params[name][...] = value
    return model, tracker
