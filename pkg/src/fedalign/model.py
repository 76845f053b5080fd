"""Feed-forward ReLU classifier stored as one flat parameter vector.

Layout of the flat vector: for each layer in order, the weight matrix
(``fan_in x fan_out``, row-major) followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        check_layer_sizes(self.layer_sizes)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.layer_sizes),):
            raise ValueError(
                f"expected {param_count(self.layer_sizes)} parameters, got {self.params.shape}")

    @property
    def dim(self) -> int:
        return self.params.size

    def with_params(self, params) -> "MlpModel":
        return MlpModel(self.layer_sizes, np.array(params, dtype=np.float64))

    def layers(self, params=None):
        """(W, b) views into ``params`` (default: this model's own vector)."""
        return unflatten(self.layer_sizes, self.params if params is None else params)

    def last_layer_slice(self) -> slice:
        fan_in, fan_out = self.layer_sizes[-2], self.layer_sizes[-1]
        return slice(self.dim - (fan_in * fan_out + fan_out), self.dim)


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 2
    lr: float = 0.1
    batch_size: int = 8
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def check_layer_sizes(sizes: Sequence[int]) -> None:
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"need at least two positive layer sizes, got {list(sizes)}")


def param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def unflatten(sizes: Sequence[int], flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views; writes go through to ``flat``."""
    out, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = flat[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((w, flat[pos:pos + b]))
        pos += b
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])


def init_model(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    check_layer_sizes(layer_sizes)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D4C50]))
    parts = []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(a)
        parts.append(rng.uniform(-bound, bound, size=a * b + b))
    return MlpModel(tuple(layer_sizes), np.concatenate(parts))


def _forward(layers, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(model: MlpModel, x: np.ndarray, y: np.ndarray,
                  params: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient (flat)."""
    params = model.params if params is None else params
    layers = model.layers(params)
    acts = _forward(layers, x)
    probs = softmax(acts[-1])
    n = x.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(probs[rows, y], 1e-300))))

    grad = np.empty_like(params)
    grad_layers = unflatten(model.layer_sizes, grad)
    delta = probs
    delta[rows, y] -= 1.0
    delta /= n
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[i]
        gw[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0)
    return loss, grad


def predict(model: MlpModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels (ties to the lower class) and class probabilities."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.layer_sizes[0]:
        raise ValueError(f"expected {model.layer_sizes[0]} features, got {x.shape[1]}")
    probs = softmax(_forward(model.layers(), x)[-1])
    return probs.argmax(axis=1), probs


def local_train(model: MlpModel, data, cfg: TrainConfig,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Mini-batch SGD on ``data`` starting from ``model``; returns the parameter change.

    ``data`` needs ``features`` and ``labels`` arrays. Batch order comes from
    ``rng`` when given, else from ``cfg.seed``. ``model`` is left untouched.
    """
    features, labels = data.features, data.labels
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if features.shape[1] != model.layer_sizes[0]:
        raise ValueError("feature dimension does not match the input layer")
    params = model.params.copy()
    velocity = np.zeros_like(params) if cfg.momentum else None
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grad = loss_and_grad(model, features[batch], labels[batch], params)
            if velocity is not None:
                velocity *= cfg.momentum
                velocity += grad
                grad = velocity
            params -= cfg.lr * grad
    return params - model.params
