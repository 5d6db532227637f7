"""Two-layer user-item scorer and the point-wise training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable

import numpy as np

from .numerics import ShapeError, as_array, relu, sigmoid

CLIP = 1e-7


@dataclass
class RankerParams:
    W1: np.ndarray  # H x 2D
    b1: np.ndarray
    W2: np.ndarray  # 1 x H
    b2: np.ndarray  # scalar (0-d)

    @property
    def D(self) -> int:
        return self.W1.shape[1] // 2

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, hidden: int = 64) -> "RankerParams":
        return cls(
            W1=rng.normal(0.0, np.sqrt(2.0 / (2 * D)), (hidden, 2 * D)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, np.sqrt(1.0 / hidden), (1, hidden)),
            b2=np.array(0.0),
        )

    @classmethod
    def zeros(cls, D: int, hidden: int = 64) -> "RankerParams":
        return cls(np.zeros((hidden, 2 * D)), np.zeros(hidden), np.zeros((1, hidden)), np.array(0.0))

    def tensors(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def forward(rp: RankerParams, U: np.ndarray, V: np.ndarray):
    """Batched scorer. ``U`` and ``V`` are (N, D); returns (yhat, logit, cache)."""
    inp = np.concatenate([U, V], axis=-1)
    a1 = inp @ rp.W1.T + rp.b1
    h1 = np.maximum(a1, 0.0)
    logit = h1 @ rp.W2[0] + rp.b2
    return sigmoid(logit), logit, {"inp": inp, "a1": a1, "h1": h1}


def backward(rp: RankerParams, cache, dlogit: np.ndarray, grads: Dict[str, np.ndarray]):
    """Accumulate parameter grads; return (dU, dV)."""
    h1, a1, inp = cache["h1"], cache["a1"], cache["inp"]
    grads["W2"] += (dlogit @ h1)[None, :]
    grads["b2"] += dlogit.sum()
    da1 = dlogit[:, None] * rp.W2[0][None, :] * (a1 > 0)
    grads["W1"] += da1.T @ inp
    grads["b1"] += da1.sum(0)
    dinp = da1 @ rp.W1
    D = rp.D
    return dinp[:, :D], dinp[:, D:]


def score(rp: RankerParams, u, v) -> float:
    """Preference score in (0, 1) for user vector ``u`` and item ``v``."""
    u = as_array(u, "u")
    v = as_array(v, "v")
    if u.shape != (rp.D,) or v.shape != (rp.D,):
        raise ShapeError(f"score expects two vectors of dimension {rp.D}, got {u.shape} and {v.shape}")
    yhat, _, _ = forward(rp, u[None], v[None])
    return float(yhat[0])


def bce(yhat, labels) -> np.ndarray:
    """Per-instance binary cross-entropy with clipped predictions."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(np.asarray(yhat, dtype=np.float64), CLIP, 1.0 - CLIP)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


def l2_penalty(tensors: Iterable[np.ndarray]) -> float:
    return float(sum(float(np.sum(t * t)) for t in tensors))


def loss(predictions, labels, lam: float = 0.0, all_params: Iterable[np.ndarray] = ()) -> float:
    """Mean clipped BCE plus ``lam`` times the squared L2 norm of ``all_params``."""
    data = float(np.mean(bce(predictions, labels)))
    if lam:
        data += lam * l2_penalty(all_params)
    return data


def dloss_dlogit(yhat: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Gradient of the mean clipped BCE wrt the logits (zero where clipping is active)."""
    inside = (yhat > CLIP) & (yhat < 1.0 - CLIP)
    return np.where(inside, (yhat - labels) / n, 0.0)
