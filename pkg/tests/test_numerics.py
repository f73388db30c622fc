"""
Unit tests for the numerics module
"""

import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest

from src.exceptions import (
    ConfigError,
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    LabelIndexError,
    NonFiniteError,
)
from src.numerics import (
    AdamState,
    PlateauScheduler,
    adam_step,
    cosine_similarity,
    derive_rng,
    dropout_backward,
    dropout_forward,
    l2_normalize,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    linear_backward,
    linear_forward,
    matmul,
    max_relative_error,
    mean_pool,
    numerical_gradient,
    relu_backward,
    relu_forward,
    scheduler_step,
    segment_mean_pool,
    segment_mean_pool_backward,
    softmax,
    softmax_cross_entropy,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_linear_forward_matches_loop(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(1, 2))
    out = linear_forward(x, w, b)
    for i in range(3):
        for j in range(2):
            expected = sum(x[i, k] * w[k, j] for k in range(4)) + b[0, j]
            assert out[i, j] == pytest.approx(expected, abs=1e-12)


def test_linear_forward_shape_errors(rng):
    with pytest.raises(DimensionError):
        linear_forward(rng.normal(size=(3, 4)), rng.normal(size=(5, 2)), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        linear_forward(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), np.zeros((1, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        linear_forward(np.array([[np.inf]]), np.ones((1, 1)), np.zeros((1, 1)))


def test_linear_backward_matches_finite_differences(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(1, 2))
    g = rng.normal(size=(3, 2))

    def f():
        return float(np.sum(linear_forward(x, w, b) * g))

    gx, gw, gb = linear_backward(x, w, g)
    assert max_relative_error(gx, numerical_gradient(f, x)) < 1e-6
    assert max_relative_error(gw, numerical_gradient(f, w)) < 1e-6
    assert max_relative_error(gb, numerical_gradient(f, b)) < 1e-6


def test_relu_backward_masks_non_positive():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert np.array_equal(relu_forward(x), np.array([[0.0, 0.0, 2.0]]))
    assert np.array_equal(relu_backward(x, np.ones((1, 3))), np.array([[0.0, 0.0, 1.0]]))


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.normal(size=(5, 7)) * 50)
    assert np.allclose(p.sum(axis=1), 1.0)


def test_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((4, 6)), [0, 1, 2, 5])
    assert loss == pytest.approx(np.log(6), abs=1e-12)


def test_cross_entropy_confident_and_stable():
    logits = np.array([[1000.0, 0.0, 0.0]])
    loss, grad = softmax_cross_entropy(logits, [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(4, 6))
    labels = [0, 3, 5, 1]
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = numerical_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert max_relative_error(grad, numeric) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelIndexError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(LabelIndexError):
        softmax_cross_entropy(np.zeros((1, 3)), [-1])


def test_mean_pool_of_empty_raises():
    with pytest.raises(EmptyInputError):
        mean_pool(np.zeros((0, 3)))


def test_segment_mean_pool_matches_per_segment_mean(rng):
    frames = rng.normal(size=(6, 3))
    pooled, pool_op = segment_mean_pool(frames, [2, 1, 3])
    assert np.allclose(pooled[0], frames[:2].mean(axis=0))
    assert np.allclose(pooled[1], frames[2])
    assert np.allclose(pooled[2], frames[3:].mean(axis=0))

    g = rng.normal(size=(3, 3))
    numeric = numerical_gradient(lambda: float(np.sum(segment_mean_pool(frames, [2, 1, 3])[0] * g)), frames)
    assert max_relative_error(segment_mean_pool_backward(pool_op, g), numeric) < 1e-6


def test_segment_mean_pool_rejects_bad_lengths(rng):
    with pytest.raises(EmptyInputError):
        segment_mean_pool(rng.normal(size=(3, 2)), [3, 0])
    with pytest.raises(DimensionError):
        segment_mean_pool(rng.normal(size=(3, 2)), [2, 2])


def test_l2_normalize():
    assert np.allclose(l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    with pytest.raises(DegenerateVectorError):
        l2_normalize(np.zeros((1, 3)))
    with pytest.raises(DegenerateVectorError):
        l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_l2_normalize_rows_backward(rng):
    x = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    y, norms = l2_normalize_rows(x)
    numeric = numerical_gradient(lambda: float(np.sum(l2_normalize_rows(x)[0] * g)), x)
    assert max_relative_error(l2_normalize_rows_backward(y, norms, g), numeric) < 1e-6


def test_cosine_similarity():
    assert cosine_similarity([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)
    assert cosine_similarity([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(-1.0)
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 1.0])


def test_dropout_eval_is_identity(rng):
    x = rng.normal(size=(4, 5))
    out, mask = dropout_forward(x, 0.3, None, training=False)
    assert np.array_equal(out, x)
    assert np.array_equal(mask, np.ones_like(x))


def test_dropout_training_scales_kept_units():
    x = np.ones((200, 50))
    out, mask = dropout_forward(x, 0.2, np.random.default_rng(1), training=True)
    kept = out[out > 0]
    assert np.allclose(kept, 1.0 / 0.8)
    assert abs(out.mean() - 1.0) < 0.05
    assert np.array_equal(dropout_backward(np.ones_like(x), mask), mask)


def test_dropout_rate_zero_consumes_no_randomness():
    a = np.random.default_rng(5)
    b = np.random.default_rng(5)
    dropout_forward(np.ones((3, 3)), 0.0, a, training=True)
    assert a.random() == b.random()


def test_dropout_rate_one_rejected():
    with pytest.raises(ConfigError):
        dropout_forward(np.ones((2, 2)), 1.0, np.random.default_rng(0), training=True)


def test_adam_first_step_moves_by_lr(rng):
    w = rng.normal(size=(3, 2))
    start = w.copy()
    g = rng.normal(size=(3, 2))
    state = AdamState(lr=0.01)
    adam_step({"w": w}, {"w": g}, state)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert np.allclose(start - w, 0.01 * g / (np.abs(g) + 1e-8))
    assert state.step_count == 1


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros((2, 2))}, {"w": np.zeros((2, 3))}, AdamState())
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros((2, 2))}, {"v": np.zeros((2, 2))}, AdamState())


def test_adam_zero_lr_leaves_parameters():
    w = np.ones((2, 2))
    adam_step({"w": w}, {"w": np.full((2, 2), 3.0)}, AdamState(lr=0.0))
    assert np.array_equal(w, np.ones((2, 2)))


def test_plateau_scheduler_reduces_after_patience():
    sched = PlateauScheduler(current_lr=1e-3, patience=3, factor=0.5, min_lr=1e-6)
    scheduler_step(sched, 0.5)
    for _ in range(3):
        scheduler_step(sched, 0.4)
    assert sched.current_lr == 1e-3
    scheduler_step(sched, 0.4)
    assert sched.current_lr == pytest.approx(5e-4)
    assert sched.epochs_since_improve == 0
    scheduler_step(sched, 0.6)
    assert sched.best_metric == 0.6


def test_plateau_scheduler_respects_min_lr():
    sched = PlateauScheduler(current_lr=2e-6, patience=0, factor=0.1, min_lr=1e-6)
    scheduler_step(sched, 0.1)
    scheduler_step(sched, 0.1)
    assert sched.current_lr == 1e-6


def test_plateau_scheduler_bad_factor():
    with pytest.raises(ConfigError):
        PlateauScheduler(factor=1.5)


def test_derive_rng_streams():
    assert derive_rng(3, "a").random() == derive_rng(3, "a").random()
    assert derive_rng(3, "a").random() != derive_rng(3, "b").random()
    assert derive_rng(3, "a").random() != derive_rng(4, "a").random()


def test_matmul_matches_naive_loops(rng):
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 4))
    expected = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.allclose(matmul(a, b), expected, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        matmul(a, a)


def test_cosine_similarity_value_and_scale_invariance():
    u, v = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    assert cosine_similarity(u, v) == pytest.approx(0.974631846, abs=1e-9)
    for alpha, beta in [(2.5, 0.01), (1e3, 7.0), (0.5, 0.5)]:
        assert cosine_similarity(alpha * u, beta * v) == pytest.approx(cosine_similarity(u, v), abs=1e-12)
    assert cosine_similarity(-u, v) == pytest.approx(-0.974631846, abs=1e-9)


def test_adam_three_steps_by_hand():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = np.array([[1.0]])
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)

    # step 1, g = 0.1
    m, v = 0.1 * 0.1, 0.001 * 0.1 ** 2
    expected = 1.0 - lr * (m / (1 - b1)) / ((v / (1 - b2)) ** 0.5 + eps)
    adam_step({"p": p}, {"p": np.array([[0.1]])}, state)
    assert p[0, 0] == pytest.approx(expected, rel=1e-12)

    # step 2, g = -0.2
    m, v = b1 * m + (1 - b1) * -0.2, b2 * v + (1 - b2) * 0.04
    expected -= lr * (m / (1 - b1 ** 2)) / ((v / (1 - b2 ** 2)) ** 0.5 + eps)
    adam_step({"p": p}, {"p": np.array([[-0.2]])}, state)
    assert p[0, 0] == pytest.approx(expected, rel=1e-12)

    # step 3, g = 0.3
    m, v = b1 * m + (1 - b1) * 0.3, b2 * v + (1 - b2) * 0.09
    expected -= lr * (m / (1 - b1 ** 3)) / ((v / (1 - b2 ** 3)) ** 0.5 + eps)
    adam_step({"p": p}, {"p": np.array([[0.3]])}, state)
    assert p[0, 0] == pytest.approx(expected, rel=1e-12)

    assert p[0, 0] == pytest.approx(0.9902286, abs=1e-6)
    assert state.step_count == 3
    assert state.first_moment["p"][0, 0] == pytest.approx(0.0201, rel=1e-12)
    assert state.second_moment["p"][0, 0] == pytest.approx(1.3994001e-4, rel=1e-9)


def test_plateau_scheduler_ten_epoch_trace():
    sched = PlateauScheduler(current_lr=1.0, patience=2, factor=0.5, min_lr=1e-6)
    metrics = [0.5, 0.6, 0.6, 0.6, 0.6, 0.7, 0.7, 0.7, 0.7, 0.7]
    lrs, waits = [], []
    for metric in metrics:
        scheduler_step(sched, metric)
        lrs.append(sched.current_lr)
        waits.append(sched.epochs_since_improve)
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.25, 0.25]
    assert waits == [0, 0, 1, 2, 0, 0, 1, 2, 0, 1]
    assert sched.best_metric == 0.7
