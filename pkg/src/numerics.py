"""
Dense numerics for the intent models
Matrices are 2-D float64 numpy arrays; every layer comes with its analytic backward
"""

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from src.exceptions import (
    ConfigError,
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    LabelIndexError,
    NonFiniteError,
)

Matrix = np.ndarray


def _as_matrix(x, name: str = "x") -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_finite(out: Matrix, op: str) -> Matrix:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def derive_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for a named sub-stream of `seed`"""
    keys = [int(seed)]
    for s in stream:
        keys.append(s if isinstance(s, int) else zlib.crc32(str(s).encode("utf-8")))
    return np.random.default_rng(keys)


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def linear_forward(x: Matrix, w: Matrix, b: Matrix) -> Matrix:
    """xw + b with b broadcast over rows"""
    x = _as_matrix(x, "x")
    w = _as_matrix(w, "w")
    b = _as_matrix(b, "b")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"input {x.shape} does not fit weight {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"bias {b.shape} does not fit weight {w.shape}")
    return _check_finite(x @ w + b, "linear_forward")


def linear_backward(x: Matrix, w: Matrix, grad_out: Matrix) -> Tuple[Matrix, Matrix, Matrix]:
    """
    Gradients of a linear layer

    Returns:
        (grad_x, grad_w, grad_b) shaped like x, w and the 1 x out bias
    """
    x = _as_matrix(x, "x")
    w = _as_matrix(w, "w")
    grad_out = _as_matrix(grad_out, "grad_out")
    if x.shape[1] != w.shape[0] or grad_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"grad {grad_out.shape} inconsistent with input {x.shape} and weight {w.shape}"
        )
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0, keepdims=True)
    return grad_x, grad_w, grad_b


def relu_forward(x: Matrix) -> Matrix:
    return np.maximum(_as_matrix(x), 0.0)


def relu_backward(x: Matrix, grad_out: Matrix) -> Matrix:
    x = _as_matrix(x)
    grad_out = _as_matrix(grad_out, "grad_out")
    if x.shape != grad_out.shape:
        raise DimensionError(f"relu input {x.shape} vs grad {grad_out.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def softmax(logits: Matrix) -> Matrix:
    logits = _as_matrix(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Matrix, labels: Sequence[int]) -> Tuple[float, Matrix]:
    """
    Mean cross-entropy of row-wise softmax against integer labels

    Returns:
        (loss, grad_logits) with grad = (softmax - onehot) / N
    """
    logits = _as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n == 0:
        raise EmptyInputError("cross-entropy over an empty batch")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelIndexError(f"labels must lie in [0, {k}), got {labels.tolist()}")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, _check_finite(grad, "softmax_cross_entropy")


def mean_pool(frames: Matrix) -> Matrix:
    frames = _as_matrix(frames, "frames")
    if frames.shape[0] == 0:
        raise EmptyInputError("cannot pool zero frames")
    return frames.mean(axis=0, keepdims=True)


def segment_mean_pool(frames: Matrix, lengths: Sequence[int]) -> Tuple[Matrix, Matrix]:
    """
    Mean-pool consecutive segments of a stacked frame matrix

    Returns:
        (pooled, pool_op) where pooled = pool_op @ frames
    """
    frames = _as_matrix(frames, "frames")
    lengths = [int(n) for n in lengths]
    if any(n <= 0 for n in lengths):
        raise EmptyInputError("every segment needs at least one frame")
    if sum(lengths) != frames.shape[0]:
        raise DimensionError(f"segment lengths sum to {sum(lengths)}, frames have {frames.shape[0]} rows")
    pool_op = np.zeros((len(lengths), frames.shape[0]))
    start = 0
    for i, n in enumerate(lengths):
        pool_op[i, start:start + n] = 1.0 / n
        start += n
    return pool_op @ frames, pool_op


def segment_mean_pool_backward(pool_op: Matrix, grad_pooled: Matrix) -> Matrix:
    return pool_op.T @ grad_pooled


def l2_normalize(v: Matrix) -> Matrix:
    v = _as_matrix(v, "v")
    if v.shape[0] != 1:
        raise DimensionError(f"expected a row vector, got {v.shape}")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(x: Matrix) -> Tuple[Matrix, Matrix]:
    x = _as_matrix(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cannot normalize a zero row")
    return x / norms, norms


def l2_normalize_rows_backward(y: Matrix, norms: Matrix, grad_y: Matrix) -> Matrix:
    """Backward of y = x / |x| given the forward outputs"""
    proj = np.sum(y * grad_y, axis=1, keepdims=True)
    return (grad_y - y * proj) / norms


def cosine_similarity(u: Matrix, v: Matrix) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine of {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity with a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def dropout_forward(x: Matrix, rate: float, rng: np.random.Generator,
                    training: bool) -> Tuple[Matrix, Matrix]:
    """
    Inverted dropout

    Returns:
        (output, mask) where mask already carries the 1/(1-rate) scale,
        so backward is grad * mask
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_matrix(x)
    if not training or rate == 0.0:
        return x.copy(), np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: Matrix, mask: Matrix) -> Matrix:
    return grad_out * mask


@dataclass
class AdamState:
    """Adam moments per named parameter"""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, Matrix] = field(default_factory=dict)
    second_moment: Dict[str, Matrix] = field(default_factory=dict)


def adam_step(params: Dict[str, Matrix], grads: Dict[str, Matrix],
              state: AdamState) -> Tuple[Dict[str, Matrix], AdamState]:
    """One bias-corrected Adam update, applied to the parameter arrays in place"""
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise DimensionError(f"{name}: parameter {params[name].shape} vs gradient {g.shape}")

    state.step_count += 1
    t = state.step_count
    for name, g in grads.items():
        m = state.first_moment.setdefault(name, np.zeros_like(g))
        v = state.second_moment.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        _check_finite(params[name], "adam_step")
    return params, state


@dataclass
class PlateauScheduler:
    """Reduce the learning rate when a maximized metric stops improving"""

    current_lr: float = 1e-4
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-6
    best_metric: float = float("-inf")
    epochs_since_improve: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")


def scheduler_step(sched: PlateauScheduler, dev_metric: float) -> PlateauScheduler:
    if dev_metric > sched.best_metric:
        sched.best_metric = dev_metric
        sched.epochs_since_improve = 0
        return sched
    sched.epochs_since_improve += 1
    if sched.epochs_since_improve > sched.patience:
        sched.current_lr = max(sched.current_lr * sched.factor, sched.min_lr)
        sched.epochs_since_improve = 0
    return sched


def numerical_gradient(f: Callable[[], float], x: Matrix, h: float = 1e-6) -> Matrix:
    """Central differences of f() with respect to the entries of x, perturbed in place"""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = f()
        x[idx] = orig - h
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: Matrix, numeric: Matrix, floor: float = 1e-5) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
