"""Loss models, gradients, and the local mini-batch SGD update.

Two strongly convex problems are provided so convergence behavior can be
checked against closed forms at desk scale:

* quadratic-per-sample, ``f(w, z) = 0.5 * ||w - z||^2`` -- smoothness and
  strong convexity constants are exactly 1 and the optimum is the sample mean;
* l2-regularized logistic regression -- strong convexity equals the
  regularization weight and smoothness is bounded by the regularization plus
  the top eigenvalue of the empirical feature second-moment matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "LossKind",
    "LossModel",
    "WeightVector",
    "ClientDataset",
    "OptimumInfo",
    "SolverError",
    "loss",
    "grad",
    "local_train",
    "solve_optimum",
    "global_loss",
    "pooled_dataset",
    "estimate_smoothness",
    "load_dataset_csv",
]


class LossKind(Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


class SolverError(RuntimeError):
    """The optimum solver failed to reach its gradient tolerance."""


@dataclass(frozen=True)
class LossModel:
    kind: LossKind
    regularization: float = 0.0

    def __post_init__(self) -> None:
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")
        if self.kind is LossKind.QUADRATIC and self.regularization != 0.0:
            # keeps the quadratic model's constants mu = L = 1 exact
            raise ValueError("quadratic model does not take regularization")


@dataclass
class WeightVector:
    """Flat parameter vector with layer boundaries for per-layer quantization."""

    values: np.ndarray
    layers: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("weights must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite weight value")
        d = self.values.size
        if self.layers is None:
            self.layers = ((0, d),)
        else:
            self.layers = tuple((int(a), int(b)) for a, b in self.layers)
            cursor = 0
            for start, stop in self.layers:
                if start != cursor or stop <= start:
                    raise ValueError(f"layer ranges must partition [0, {d})")
                cursor = stop
            if cursor != d:
                raise ValueError(f"layer ranges must partition [0, {d})")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def copy(self) -> "WeightVector":
        return WeightVector(self.values.copy(), self.layers)

    def with_values(self, values: np.ndarray) -> "WeightVector":
        return WeightVector(np.asarray(values, dtype=np.float64), self.layers)


@dataclass
class ClientDataset:
    """One client's local samples; labels are present for classification."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels must align with samples")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class OptimumInfo:
    w_star: np.ndarray
    f_star: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss(model: LossModel, w: np.ndarray, features: np.ndarray,
         labels: np.ndarray | None = None) -> float:
    """Average per-sample loss plus the l2 penalty."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise ValueError("empty sample set")
    w = np.asarray(w, dtype=np.float64)
    if model.kind is LossKind.QUADRATIC:
        diffs = w[None, :] - features
        return 0.5 * float(np.mean(np.sum(diffs * diffs, axis=1)))
    if labels is None:
        raise ValueError("logistic loss requires labels")
    z = features @ w
    ce = np.logaddexp(0.0, z) - labels * z
    penalty = 0.5 * model.regularization * float(w @ w)
    return float(np.mean(ce)) + penalty


def grad(model: LossModel, w: np.ndarray, features: np.ndarray,
         labels: np.ndarray | None = None) -> np.ndarray:
    """Exact gradient of the batch-average loss."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    w = np.asarray(w, dtype=np.float64)
    if model.kind is LossKind.QUADRATIC:
        return w - features.mean(axis=0)
    if labels is None:
        raise ValueError("logistic gradient requires labels")
    z = features @ w
    residual = _sigmoid(z) - labels
    return features.T @ residual / features.shape[0] + model.regularization * w


def local_train(
    w: np.ndarray,
    model: LossModel,
    data: ClientDataset,
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run ``steps`` sequential mini-batch SGD steps from ``w``.

    Each step draws a fresh uniform batch without replacement within the
    step (so a full-size batch is exact full-batch descent).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 1 <= batch_size <= data.size:
        raise ValueError("batch size must be in [1, dataset size]")
    w = np.asarray(w, dtype=np.float64).copy()
    for _ in range(steps):
        idx = rng.choice(data.size, size=batch_size, replace=False)
        batch_labels = data.labels[idx] if data.labels is not None else None
        w -= lr * grad(model, w, data.features[idx], batch_labels)
    return w


def pooled_dataset(datasets: list[ClientDataset]) -> ClientDataset:
    """Concatenate all clients' samples in client order."""
    features = np.concatenate([ds.features for ds in datasets], axis=0)
    if datasets[0].labels is not None:
        labels = np.concatenate([ds.labels for ds in datasets], axis=0)
    else:
        labels = None
    return ClientDataset(features, labels)


def global_loss(model: LossModel, w: np.ndarray, datasets: list[ClientDataset]) -> float:
    """Size-weighted average of the client losses (the pooled-sample loss)."""
    pooled = pooled_dataset(datasets)
    return loss(model, w, pooled.features, pooled.labels)


def estimate_smoothness(model: LossModel, datasets: list[ClientDataset],
                        tol: float = 1e-8, max_iters: int = 10_000) -> float:
    """Smoothness bound: regularization plus the top eigenvalue of the
    empirical feature second-moment matrix, found by power iteration."""
    if model.kind is LossKind.QUADRATIC:
        return 1.0
    pooled = pooled_dataset(datasets)
    x = pooled.features
    gram = x.T @ x / x.shape[0]
    v = np.ones(gram.shape[0]) / math.sqrt(gram.shape[0])
    eig = 0.0
    for _ in range(max_iters):
        nxt = gram @ v
        norm = float(np.linalg.norm(nxt))
        if norm == 0.0:
            eig = 0.0
            break
        v = nxt / norm
        if abs(norm - eig) <= tol * max(1.0, norm):
            eig = norm
            break
        eig = norm
    return model.regularization + eig


def solve_optimum(model: LossModel, datasets: list[ClientDataset],
                  grad_tol: float = 1e-9, max_iters: int = 500_000) -> OptimumInfo:
    """Global optimum of the pooled objective.

    Quadratic uses the closed form (mean of all samples); logistic runs
    full-batch gradient descent at step 1/L until the gradient norm is
    within tolerance.
    """
    pooled = pooled_dataset(datasets)
    if model.kind is LossKind.QUADRATIC:
        w_star = pooled.features.mean(axis=0)
        return OptimumInfo(w_star, loss(model, w_star, pooled.features))
    if model.regularization <= 0:
        raise ValueError("logistic solve requires positive regularization")
    smooth = estimate_smoothness(model, datasets)
    lr = 1.0 / smooth
    w = np.zeros(pooled.features.shape[1])
    for _ in range(max_iters):
        g = grad(model, w, pooled.features, pooled.labels)
        if float(np.linalg.norm(g)) <= grad_tol:
            return OptimumInfo(w, loss(model, w, pooled.features, pooled.labels))
        w -= lr * g
    raise SolverError(
        f"gradient norm above {grad_tol} after {max_iters} iterations"
    )


def load_dataset_csv(path: str, labeled: bool) -> ClientDataset:
    """Read a dataset CSV: header row, one sample per line; when labeled,
    the last column is a {0,1} label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            next(reader)  # header
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        rows = [[float(cell) for cell in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no samples")
    table = np.asarray(rows, dtype=np.float64)
    if labeled:
        labels = table[:, -1]
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise ValueError(f"{path}: labels must be 0 or 1")
        return ClientDataset(table[:, :-1], labels.astype(np.int64))
    return ClientDataset(table, None)
