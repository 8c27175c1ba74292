"""Multiclass linear classifier with closed-form per-sample gradients.

The bias is stored as the last column of the weight matrix so that a
per-sample gradient is a single ``C x (d+1)`` array and can be clipped as
one flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Raised when model and input dimensions disagree."""


class Sample(NamedTuple):
    features: np.ndarray
    label: int
    sensitive: int


@dataclass(frozen=True)
class Dataset:
    """Column-oriented tabular dataset.

    ``x`` has shape (n, d); ``y`` holds class indices in ``[0, n_classes)``
    and ``z`` holds sensitive-group indices in ``[0, n_groups)``.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    n_classes: int = 2
    n_groups: int = 2

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 0)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        z = np.asarray(self.z, dtype=np.int64).reshape(-1)
        if not (len(x) == len(y) == len(z)):
            raise ShapeError(f"row counts differ: x={len(x)}, y={len(y)}, z={len(z)}")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if len(z) and (z.min() < 0 or z.max() >= self.n_groups):
            raise ValueError(f"sensitive values must lie in [0, {self.n_groups})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), int(self.z[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.z[idx], self.n_classes, self.n_groups)

    @classmethod
    def from_samples(cls, samples, n_classes: int = 2, n_groups: int = 2) -> "Dataset":
        samples = list(samples)
        x = np.array([np.asarray(s.features, dtype=np.float64) for s in samples])
        y = np.array([s.label for s in samples], dtype=np.int64)
        z = np.array([s.sensitive for s in samples], dtype=np.int64)
        return cls(x, y, z, n_classes, n_groups)

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = list(parts)
        first = parts[0]
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.z for p in parts]),
            first.n_classes,
            first.n_groups,
        )


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray  # (C, d+1), last column is the bias

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] < 1:
            raise ShapeError(f"weights must be C x (d+1) with C >= 2, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "LinearModel":
        return cls(np.zeros((n_classes, dim + 1)))

    @classmethod
    def init(cls, n_classes: int, dim: int, seed: int) -> "LinearModel":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-0.01, 0.01, size=(n_classes, dim + 1)))

    def with_weights(self, weights: np.ndarray) -> "LinearModel":
        return LinearModel(weights)


def _augment(model: LinearModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise ShapeError(f"feature dimension {x.shape[1]} != model dimension {model.dim}")
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _features(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.x
    if isinstance(data, Sample):
        return np.asarray(data.features, dtype=np.float64)
    return np.asarray(data, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: LinearModel, data) -> np.ndarray:
    """Raw class scores, shape (n, C)."""
    return _augment(model, _features(data)) @ model.weights.T


def forward(model: LinearModel, data) -> np.ndarray:
    """Class probabilities.

    Accepts a :class:`Sample`, a single feature vector, a (n, d) matrix or a
    :class:`Dataset`. A single sample yields a length-C vector, anything
    batched yields (n, C).
    """
    single = isinstance(data, Sample) or np.ndim(_features(data)) == 1
    p = softmax(logits(model, data))
    return p[0] if single else p


def predict(model: LinearModel, data):
    """Argmax class; ``np.argmax`` already resolves ties to the smaller index."""
    single = isinstance(data, Sample) or np.ndim(_features(data)) == 1
    pred = np.argmax(logits(model, data), axis=1)
    return int(pred[0]) if single else pred


def _labels(data, y):
    if y is not None:
        return np.atleast_1d(np.asarray(y, dtype=np.int64))
    if isinstance(data, Dataset):
        return data.y
    if isinstance(data, Sample):
        return np.array([data.label])
    raise ValueError("labels required when passing raw features")


def per_sample_loss_grads(model: LinearModel, data, y=None) -> np.ndarray:
    """Cross-entropy gradient for every sample, shape (n, C, d+1).

    For one sample this is ``(softmax(Wx) - onehot(y)) outer [x; 1]``.
    """
    xa = _augment(model, _features(data))
    labels = _labels(data, y)
    p = softmax(xa @ model.weights.T)
    p[np.arange(len(labels)), labels] -= 1.0
    return p[:, :, None] * xa[:, None, :]


def per_sample_loss_grad(model: LinearModel, sample: Sample) -> np.ndarray:
    return per_sample_loss_grads(model, sample)[0]


def per_sample_losses(model: LinearModel, data, y=None) -> np.ndarray:
    z = logits(model, data)
    labels = _labels(data, y)
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    return lse - z[np.arange(len(labels)), labels]


def per_sample_prob_grads(model: LinearModel, x: np.ndarray, cls: int) -> np.ndarray:
    """Gradient of ``p_i(cls)`` w.r.t. the weights for every row of ``x``.

    ``d p_c / d W_k = p_c (1[k=c] - p_k) [x; 1]``, shape (n, C, d+1).
    """
    xa = _augment(model, x)
    p = softmax(xa @ model.weights.T)
    coef = -p * p[:, [cls]]
    coef[:, cls] += p[:, cls]
    return coef[:, :, None] * xa[:, None, :]


def accuracy(model: LinearModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, dataset.x) == dataset.y))
