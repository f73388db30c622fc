"""
Unit tests for the pseudo-backbones and projection heads
"""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.encoders import (
    AudioBackbone,
    Corpus,
    ProjectionHead,
    TextBackbone,
    Utterance,
    encode_audio,
    encode_text,
    project_audio,
    project_text,
)
from src.exceptions import DimensionError, EmptyInputError, LabelIndexError
from src.numerics import max_relative_error, numerical_gradient


@pytest.fixture
def audio():
    return AudioBackbone.from_seed(11, d_raw=8, d_hid=16)


@pytest.fixture
def text():
    return TextBackbone.from_seed(13, vocab_size=30, d_hid=16)


@pytest.fixture
def frames():
    return np.random.default_rng(0).normal(size=(7, 8))


def _relu(x):
    return np.maximum(x, 0.0)


def test_encode_audio_matches_oracle(audio, frames):
    h = _relu(_relu(frames @ audio.w1 + audio.b1) @ audio.w2 + audio.b2)
    assert np.allclose(encode_audio(audio, frames), h.mean(axis=0, keepdims=True), atol=1e-12)


def test_encode_audio_duplicate_frame(audio, frames):
    one = encode_audio(audio, frames[:1])
    two = encode_audio(audio, np.vstack([frames[:1], frames[:1]]))
    assert np.allclose(one, two, atol=1e-12)


def test_encode_audio_zero_frame_is_bias_path(audio):
    expected = _relu(_relu(audio.b1) @ audio.w2 + audio.b2)
    assert np.allclose(encode_audio(audio, np.zeros((1, 8))), expected)


def test_encode_audio_order_invariant(audio, frames):
    perm = np.random.default_rng(1).permutation(len(frames))
    assert np.allclose(encode_audio(audio, frames), encode_audio(audio, frames[perm]), atol=1e-12)


def test_encode_audio_errors(audio):
    with pytest.raises(EmptyInputError):
        encode_audio(audio, np.zeros((0, 8)))
    with pytest.raises(DimensionError):
        encode_audio(audio, np.zeros((3, 5)))


def test_encode_text_matches_oracle(text):
    tokens = [3, 7, 7, 21]
    mixed = _relu(text.token_table[tokens] @ text.w + text.b)
    assert np.allclose(encode_text(text, tokens), mixed.mean(axis=0, keepdims=True), atol=1e-12)


def test_encode_text_repetition_and_order(text):
    assert np.allclose(encode_text(text, [5]), encode_text(text, [5, 5, 5]))
    assert np.allclose(encode_text(text, [1, 2, 3]), encode_text(text, [3, 1, 2]), atol=1e-12)


def test_encode_text_errors(text):
    with pytest.raises(LabelIndexError):
        encode_text(text, [30])
    with pytest.raises(EmptyInputError):
        encode_text(text, [])


def test_backbones_are_pure_functions_of_seed(frames):
    a = AudioBackbone.from_seed(11, 8, 16)
    b = AudioBackbone.from_seed(11, 8, 16)
    assert a.checksum() == b.checksum()
    assert np.array_equal(encode_audio(a, frames), encode_audio(b, frames))
    assert AudioBackbone.from_seed(12, 8, 16).checksum() != a.checksum()


def test_projection_identity_and_bias():
    head = ProjectionHead(np.eye(16), np.zeros((1, 16)))
    pooled = np.random.default_rng(2).normal(size=(1, 16))
    assert np.array_equal(project_audio(head, pooled), pooled)
    assert np.array_equal(project_text(head, pooled), pooled)

    biased = ProjectionHead(np.ones((16, 4)), np.arange(4.0).reshape(1, 4))
    assert np.array_equal(project_audio(biased, np.zeros((1, 16))), biased.b)


def test_projection_matches_linear_oracle():
    rng = np.random.default_rng(3)
    head = ProjectionHead.from_rng(rng, 16, 12, dropout_rate=0.2)
    pooled = rng.normal(size=(1, 16))
    assert np.allclose(project_text(head, pooled), pooled @ head.w + head.b)


def test_projection_shape_mismatch():
    head = ProjectionHead(np.ones((16, 4)), np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        project_audio(head, np.zeros((1, 8)))
    with pytest.raises(DimensionError):
        project_audio(head, np.zeros((2, 16)))


def test_audio_backward_matches_finite_differences(audio):
    rng = np.random.default_rng(4)
    batch = [rng.normal(size=(n, 8)) for n in (3, 5)]
    g = rng.normal(size=(2, 16))
    pooled, cache = audio.forward(batch)
    grads = audio.backward(cache, g)

    def f():
        return float(np.sum(audio.forward(batch)[0] * g))

    assert max_relative_error(grads["w2"], numerical_gradient(f, audio.w2)) < 1e-5
    assert max_relative_error(grads["b2"], numerical_gradient(f, audio.b2)) < 1e-5


def test_frozen_backbone_has_no_gradients(frames):
    frozen = AudioBackbone.from_seed(11, 8, 16, layer2_trainable=False)
    _, cache = frozen.forward([frames])
    assert frozen.backward(cache, np.ones((1, 16))) == {}
    assert frozen.trainable_parameters() == {}


def test_projection_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    head = ProjectionHead.from_rng(rng, 6, 4, dropout_rate=0.0)
    x = rng.normal(size=(3, 6))
    g = rng.normal(size=(3, 4))
    _, cache = head.forward(x, None, training=False)
    gx, grads = head.backward(cache, g)

    def f():
        return float(np.sum(head.forward(x, None, False)[0] * g))

    assert max_relative_error(grads["w"], numerical_gradient(f, head.w)) < 1e-6
    assert max_relative_error(gx, numerical_gradient(f, x)) < 1e-6


def test_utterance_validation():
    with pytest.raises(EmptyInputError):
        Utterance(id="a", frames=np.zeros((0, 4)), tokens=[1], intent=0)
    with pytest.raises(EmptyInputError):
        Utterance(id="a", frames=np.zeros((2, 4)), tokens=[], intent=0)


def test_corpus_label_index_and_splits():
    utts = [Utterance(id=f"u{i}", frames=np.ones((1, 2)), tokens=[i], intent=i % 2 + 5,
                      split="train" if i < 3 else "dev") for i in range(4)]
    corpus = Corpus(utts, [5, 6], vocab_size=10)
    assert [u.id for u in corpus.split("dev")] == ["u3"]
    assert corpus.labels(utts).tolist() == [0, 1, 0, 1]
    with pytest.raises(LabelIndexError):
        corpus.label_index(7)
    with pytest.raises(LabelIndexError):
        Corpus(utts, [5], vocab_size=10)
