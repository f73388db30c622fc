"""
Unit tests for the multimodal teacher
"""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from config import CorpusSpec, EncoderConfig, TeacherConfig, TrainingConfig
from src.data_generation import generate_corpus
from src.exceptions import ConfigError, DimensionError
from src.numerics import max_relative_error, numerical_gradient
from src.teacher import (
    TeacherModel,
    classify,
    fuse,
    loss_and_grads,
    loss_cl,
    loss_ic,
    loss_mm,
    similarity_matrix,
    teacher_forward,
    teacher_train,
)

SMALL_ENCODERS = EncoderConfig(d_raw_audio=8, d_hid=16, d_emb=12)


@pytest.fixture(scope="module")
def corpus():
    spec = CorpusSpec(n_intents_seen=3, n_intents_unseen=2, vocab_size=60, keywords_per_intent=3,
                      sentences_per_intent=20, frame_dim=8, bot_pool_per_intent=10, mix_seen_intents=2)
    return generate_corpus(spec).seen


def build_teacher(corpus, **overrides):
    return TeacherModel.build(corpus.intents, corpus.vocab_size, SMALL_ENCODERS, TeacherConfig(**overrides))


def test_fuse_zero_weights_gives_zeros(corpus):
    model = build_teacher(corpus)
    model.fusion_w[...] = 0.0
    model.fusion_b[...] = 0.0
    E = np.random.default_rng(0).normal(size=(3, 12))
    assert np.array_equal(fuse(model, E, E), np.zeros((3, 12)))


def test_fuse_saturates_on_negative_bias(corpus):
    model = build_teacher(corpus)
    model.fusion_b[...] = -1e6
    E = np.random.default_rng(1).normal(size=(2, 12))
    assert np.array_equal(fuse(model, E, E), np.zeros((2, 12)))


def test_fuse_matches_oracle_and_checks_rows(corpus):
    model = build_teacher(corpus)
    rng = np.random.default_rng(2)
    E_a, E_t = rng.normal(size=(4, 12)), rng.normal(size=(4, 12))
    expected = np.maximum(np.hstack([E_a, E_t]) @ model.fusion_w + model.fusion_b, 0.0)
    assert np.allclose(fuse(model, E_a, E_t), expected)
    with pytest.raises(DimensionError):
        fuse(model, E_a, E_t[:3])


def test_classify_zero_input_gives_bias(corpus):
    model = build_teacher(corpus)
    model.classifier_b[...] = np.array([[0.5, -1.0, 2.0]])
    logits = classify(model, np.zeros((2, 12)))
    assert np.array_equal(logits, np.repeat(model.classifier_b, 2, axis=0))


def test_argmax_invariant_to_row_shift(corpus):
    model = build_teacher(corpus)
    logits = classify(model, np.random.default_rng(3).normal(size=(5, 12)))
    assert np.array_equal(np.argmax(logits, axis=1), np.argmax(logits + 7.5, axis=1))


def test_loss_ic_uniform():
    loss, _ = loss_ic(np.zeros((3, 6)), [0, 1, 2])
    assert loss == pytest.approx(1.791759, abs=1e-6)


def test_similarity_matrix_cases():
    e = np.eye(3)
    assert np.allclose(similarity_matrix(e, e, 0.007), np.eye(3) / 0.007)
    assert np.allclose(similarity_matrix(e, e, 0.5, literal_multiply=True), 0.5 * np.eye(3))
    rng = np.random.default_rng(4)
    a, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    C = similarity_matrix(a, t, 0.007)
    assert C[1, 2] == pytest.approx(np.dot(a[1], t[2]) / 0.007)
    with pytest.raises(DimensionError):
        similarity_matrix(a, t[:, :4], 0.007)
    with pytest.raises(ConfigError):
        similarity_matrix(a, t, 0.0)


def test_loss_cl_limits():
    assert loss_cl(np.array([[3.0]]))[0] == pytest.approx(0.0)
    assert loss_cl(np.zeros((4, 4)))[0] == pytest.approx(np.log(4))
    assert loss_cl(100.0 * np.eye(4))[0] < 1e-12
    with pytest.raises(DimensionError):
        loss_cl(np.zeros((2, 3)))


def test_loss_cl_symmetric_and_prefers_diagonal():
    rng = np.random.default_rng(5)
    C = rng.normal(size=(4, 4))
    assert loss_cl(C)[0] == pytest.approx(loss_cl(C.T)[0], abs=1e-12)
    diagonal = 5.0 * np.eye(4) + 0.1 * rng.normal(size=(4, 4))
    shuffled = diagonal[[1, 2, 3, 0]]
    assert loss_cl(diagonal)[0] < loss_cl(shuffled)[0]


def test_loss_cl_gradient():
    C = np.random.default_rng(6).normal(size=(3, 3))
    _, grad = loss_cl(C)
    assert max_relative_error(grad, numerical_gradient(lambda: loss_cl(C)[0], C)) < 1e-6


def test_loss_mm():
    assert loss_mm(2.0, 4.0) == 3.0
    assert loss_mm(2.0, 4.0, use_contrastive=False) == 2.0


def test_forward_shapes_and_duplicates(corpus):
    model = build_teacher(corpus)
    u = corpus.split("train")[0]
    single = teacher_forward(model, [u])
    assert single.E_at.shape == (1, 12) and single.logits.shape == (1, 3) and single.C.shape == (1, 1)
    pair = teacher_forward(model, [u, u])
    assert np.array_equal(pair.E_at[0], pair.E_at[1])
    assert np.array_equal(pair.logits[0], pair.logits[1])


def test_plain_fusion_skips_the_similarity_matrix(corpus):
    model = build_teacher(corpus, use_contrastive=False)
    model.text_head.w[...] = 0.0
    model.text_head.b[...] = 0.0
    batch = corpus.split("train")[:4]
    out = teacher_forward(model, batch)
    assert out.C is None
    assert not out.E_t.any()
    losses, grads = loss_and_grads(model, batch, None, training=False)
    assert np.isnan(losses.cl)
    assert losses.total == losses.ic
    assert set(grads) == set(model.trainable_parameters())
    _, tracker = teacher_train(model, corpus, TrainingConfig(epochs=1, batch_size=8))
    assert np.isnan(tracker.rows[-1]["cl_loss"])


@pytest.mark.parametrize("use_contrastive,normalize", [(True, True), (True, False), (False, True)])
def test_loss_and_grads_match_finite_differences(corpus, use_contrastive, normalize):
    model = build_teacher(corpus, use_contrastive=use_contrastive, normalize_before_sim=normalize, tau=0.5)
    batch = corpus.split("train")[:4]
    _, grads = loss_and_grads(model, batch, None, training=False)
    params = model.trainable_parameters()
    assert set(grads) == set(params)

    def f():
        return loss_and_grads(model, batch, None, training=False)[0].total

    for name, value in params.items():
        assert max_relative_error(grads[name], numerical_gradient(f, value)) < 1e-4, name


def test_zero_epochs_leaves_model_unchanged(corpus):
    model = build_teacher(corpus)
    before = model.checksum()
    _, tracker = teacher_train(model, corpus, TrainingConfig(epochs=0))
    assert model.checksum() == before
    assert [r["epoch"] for r in tracker.rows] == [0]


def test_zero_learning_rate_keeps_parameters_and_dev_accuracy(corpus):
    model = build_teacher(corpus)
    before = model.checksum()
    _, tracker = teacher_train(model, corpus, TrainingConfig(epochs=3, batch_size=8, learning_rate=0.0))
    assert model.checksum() == before
    assert len(set(tracker.column("dev_accuracy"))) == 1


def test_training_reduces_loss_and_aligns_modalities(corpus):
    model = build_teacher(corpus)
    text_before = model.text_backbone.checksum()
    frozen_before = model.audio_backbone.frozen_checksum()
    config = TrainingConfig(epochs=15, batch_size=8, learning_rate=5e-3, early_stopping_patience=100)
    _, tracker = teacher_train(model, corpus, config)

    assert model.text_backbone.checksum() == text_before
    assert model.audio_backbone.frozen_checksum() == frozen_before
    losses = tracker.column("train_loss")
    assert losses[-1] < losses[0]
    cosines = tracker.column("mean_pair_cosine")
    assert cosines[-1] > cosines[0]
    assert list(tracker.to_frame().columns) == [
        "epoch", "train_loss", "ic_loss", "cl_loss", "dev_accuracy", "dev_loss", "lr", "mean_pair_cosine"
    ]


def test_training_needs_dev_split(corpus):
    from src.encoders import Corpus

    train_only = Corpus(corpus.split("train"), corpus.intents, corpus.vocab_size)
    with pytest.raises(ConfigError):
        teacher_train(build_teacher(corpus), train_only, TrainingConfig(epochs=1))
