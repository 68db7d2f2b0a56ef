"""Linear soft-margin SVM trained by seeded stochastic subgradient descent."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ModelFormatError, TrainingError

MODEL_MAGIC = "VIFSVM"
MODEL_VERSION = "v1"


@dataclass(frozen=True)
class SvmModel:
    weights: np.ndarray
    bias: float
    feature_dim: int
    training_meta: Optional[Tuple[float, int, int]] = None  # (C, epochs, seed)

    def __post_init__(self):
        if len(self.weights) != self.feature_dim:
            raise ValueError(f"{len(self.weights)} weights for feature_dim {self.feature_dim}")
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


def _check_data(features, labels) -> Tuple[np.ndarray, np.ndarray]:
    if len(features) != len(labels):
        raise TrainingError(f"{len(features)} features but {len(labels)} labels")
    if len(features) == 0:
        raise TrainingError("no training data")
    dims = {len(f) for f in features}
    if len(dims) != 1:
        raise TrainingError(f"features have mixed dimensions {sorted(dims)}")
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite feature value")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise TrainingError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both classes")
    return X, y


def train(features: Sequence[Sequence[float]], labels: Sequence[int], C: float = 1.0,
          epochs: int = 200, seed: int = 0) -> SvmModel:
    """Minimize ``0.5*(|w|^2 + b^2) + C * sum(hinge)`` with Pegasos steps ``1 / (lambda * t)``.

    ``lambda = 1 / (C * n)``.  The bias is learned as the weight of a constant
    feature, so it is regularized together with ``w``.  Samples are visited in
    a seeded random order each epoch and the returned parameters average the
    iterates over the last 10% of steps.
    """
    X, y = _check_data(features, labels)
    if C <= 0 or epochs <= 0:
        raise TrainingError("C and epochs must be positive")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    total = epochs * n
    tail_start = total - max(1, total // 10)
    w = np.zeros(d + 1)
    w_sum = np.zeros(d + 1)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            violated = y[i] * float(Xa[i] @ w) < 1.0
            w *= 1.0 - eta * lam
            if violated:
                w += (eta * y[i]) * Xa[i]
            if t > tail_start:
                w_sum += w
    avg = w_sum / (total - tail_start)
    return SvmModel(avg[:d], float(avg[d]), d, (float(C), int(epochs), int(seed)))


def hinge_loss(model: SvmModel, features, labels) -> float:
    """Mean hinge loss over a data set."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(0.0, 1.0 - y * model.decision(X))))


def predict(model: SvmModel, feature: Sequence[float]) -> Tuple[int, float]:
    """``(label, margin)``; a margin of exactly 0 is labeled -1."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise ValueError(f"feature has shape {x.shape}, model expects ({model.feature_dim},)")
    margin = float(x @ model.weights + model.bias)
    return (1 if margin > 0 else -1), margin


def save_model(model: SvmModel, path: str | os.PathLike) -> None:
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION} {model.feature_dim}",
        f"{model.bias:.17g}",
        " ".join(f"{w:.17g}" for w in model.weights),
    ]
    if model.training_meta is not None:
        c, epochs, seed = model.training_meta
        lines.append(f"meta {c:.17g} {epochs} {seed}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_model(path: str | os.PathLike) -> SvmModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3:
        raise ModelFormatError(f"{path}: truncated model file ({len(lines)} lines)")
    header = lines[0].split()
    if len(header) != 3 or header[0] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad header {lines[0]!r}")
    if header[1] != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {header[1]!r}")
    try:
        dim = int(header[2])
        bias = float(lines[1])
        weights = np.array([float(tok) for tok in lines[2].split()])
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    if len(weights) != dim:
        raise ModelFormatError(f"{path}: header declares {dim} weights, found {len(weights)}")
    meta = None
    if len(lines) > 3 and lines[3].startswith("meta "):
        parts = lines[3].split()
        try:
            meta = (float(parts[1]), int(parts[2]), int(parts[3]))
        except (IndexError, ValueError):
            raise ModelFormatError(f"{path}: malformed meta line") from None
    try:
        return SvmModel(weights, bias, dim, meta)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
