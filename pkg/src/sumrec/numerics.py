"""Dense float64 primitives shared by the encoder, ranker and trainer.

Arrays are plain ``numpy.ndarray`` objects. Functions validate shapes and
reject non-finite inputs at the boundary; everything inside the model runs
in 64-bit floats.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

DTYPE = np.float64
ZERO_NORM = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


def as_array(x, name: str = "value") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite entries in {name}")
    return arr


def check_shape(arr: np.ndarray, shape: tuple, name: str = "value") -> None:
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")


def affine(W, x, b) -> np.ndarray:
    """Return ``W @ x + b`` with shape validation."""
    W = as_array(W, "W")
    x = as_array(x, "x")
    b = as_array(b, "b")
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ShapeError("affine expects a matrix, a vector and a vector")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"affine: W{W.shape} x{x.shape} b{b.shape} do not conform")
    return W @ x + b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def softmax_scaled(w, beta: float = 1.0, axis: int = -1) -> np.ndarray:
    """Softmax of ``beta * w`` along ``axis`` with max subtraction."""
    w = np.asarray(w, dtype=DTYPE)
    if w.size == 0 or w.shape[axis] == 0:
        raise ShapeError("softmax over an empty vector")
    if not beta > 0:
        raise ValueError("beta must be positive")
    s = beta * w
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_scaled_backward(z: np.ndarray, dz: np.ndarray, beta: float) -> np.ndarray:
    """Gradient wrt the logits given the softmax output ``z`` and upstream ``dz``."""
    return beta * z * (dz - (dz * z).sum(axis=-1, keepdims=True))


def cosine(a, b) -> float:
    a = as_array(a, "a")
    b = as_array(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cosine: dimension mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine of two (B, D) arrays.

    Returns ``(cos, na, nb, valid)``; rows where either norm is below the
    zero-norm threshold get cosine 0 and ``valid`` False.
    """
    na = np.sqrt((a * a).sum(-1))
    nb = np.sqrt((b * b).sum(-1))
    valid = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    denom = np.where(valid, na * nb, 1.0)
    cos = np.where(valid, (a * b).sum(-1) / denom, 0.0)
    return cos, na, nb, valid


def cosine_rows_backward(a, b, cos, na, nb, valid, dcos):
    """Gradients of row-wise cosine wrt ``a`` and ``b``."""
    sa = np.where(valid, na, 1.0)[:, None]
    sb = np.where(valid, nb, 1.0)[:, None]
    g = np.where(valid, dcos, 0.0)[:, None]
    da = g * (b / (sa * sb) - cos[:, None] * a / (sa * sa))
    db = g * (a / (sa * sb) - cos[:, None] * b / (sb * sb))
    return da, db


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    step: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[[], float],
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic ``grads`` to central differences of ``f``.

    ``f`` takes no arguments and reads the arrays in ``params``, which are
    perturbed in place and restored. When ``max_coords`` is set, at most that
    many coordinates per tensor are sampled.
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(step=h)
    for name, arr in params.items():
        g = np.asarray(grads[name])
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, rel_error(float(g.reshape(-1)[i]), numeric, floor))
        report.max_rel_error[name] = worst
    return report
