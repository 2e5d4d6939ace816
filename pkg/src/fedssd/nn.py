"""Small ReLU multilayer perceptron with analytic gradients and SGD-momentum.

Parameters are immutable value objects; every function here is pure, so the
same ``ModelParams`` can be shared between a frozen teacher and any number of
concurrently training students.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedssd.errors import ShapeError

# Lower clamp applied to the true-class probability before taking its log.
LOG_CLAMP = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelParams:
    """Dense layers ``(W, b)`` with ``W`` of shape ``(fan_out, fan_in)``.

    Hidden layers use ReLU, the last layer is linear and produces logits.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("ModelParams needs at least one layer")
        frozen = []
        prev_out = None
        for idx, (w, b) in enumerate(self.layers):
            w = _frozen(w)
            b = _frozen(b)
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(
                    f"layer {idx}: weight {w.shape} and bias {b.shape} do not match"
                )
            if prev_out is not None and w.shape[1] != prev_out:
                raise ShapeError(
                    f"layer {idx}: fan_in {w.shape[1]} != previous fan_out {prev_out}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {idx}: non-finite parameters")
            prev_out = w.shape[0]
            frozen.append((w, b))
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(w.shape for w, _ in self.layers)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer, ``W`` (row-major) then ``b``."""
        parts = []
        for w, b in self.layers:
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        layers = []
        pos = 0
        for w, b in self.layers:
            w_new = vec[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b_new = vec[pos : pos + b.size]
            pos += b.size
            layers.append((w_new, b_new))
        return ModelParams(tuple(layers))

    def check_same_shape(self, other: ModelParams) -> None:
        if self.shapes != other.shapes:
            raise ShapeError(f"parameter shapes differ: {self.shapes} vs {other.shapes}")

    def zeros_like(self) -> ModelParams:
        return ModelParams(tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers))

    def equals(self, other: ModelParams) -> bool:
        """Bitwise equality of every parameter."""
        if self.shapes != other.shapes:
            return False
        return self.flat().tobytes() == other.flat().tobytes()


def init_mlp(
    n_inputs: int,
    n_classes: int,
    hidden: Sequence[int] = (64, 32),
    seed: int | np.random.Generator = 0,
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if n_inputs < 1 or n_classes < 2:
        raise ValueError("need n_inputs >= 1 and n_classes >= 2")
    rng = np.random.default_rng(seed)
    dims = [n_inputs, *hidden, n_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(tuple(layers))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} input rows but labels have shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise TypeError("labels must be integers")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self) -> int:
        return self.labels.shape[0]


def _forward(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Returns the activations of every layer, input first, logits last."""
    if x.shape[1] != params.n_inputs:
        raise ShapeError(
            f"layer 0: input width {x.shape[1]} != fan_in {params.n_inputs}"
        )
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for idx, (w, b) in enumerate(params.layers):
        h = h @ w.T + b
        if idx < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward_logits(params: ModelParams, batch: Batch | np.ndarray) -> np.ndarray:
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
    return _forward(params, x)[-1]


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("softmax input contains NaN")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Batch mean of ``-log p_true``; ``p_true`` is clamped at ``LOG_CLAMP``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[1])
    p_true = probs[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(p_true, LOG_CLAMP))))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to the logits."""
    labels = _check_labels(labels, probs.shape[1])
    n = labels.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    # the clamp is flat below LOG_CLAMP
    g[probs[np.arange(n), labels] < LOG_CLAMP] = 0.0
    return g / n


def backprop(
    params: ModelParams, acts: list[np.ndarray], grad_logits: np.ndarray
) -> ModelParams:
    """Chain ``d loss / d logits`` back through the layers recorded in ``acts``."""
    grads = []
    delta = grad_logits
    for idx in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[idx]
        h_in = acts[idx]
        grads.append((delta.T @ h_in, delta.sum(axis=0)))
        if idx > 0:
            delta = (delta @ w) * (h_in > 0.0)
    return ModelParams(tuple(reversed(grads)))


@dataclass(frozen=True)
class OptimizerState:
    velocity: ModelParams
    learning_rate: float = 0.01
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, params: ModelParams, learning_rate: float = 0.01, momentum: float = 0.9):
        return cls(params.zeros_like(), learning_rate, momentum)


def sgd_step(
    params: ModelParams, grads: ModelParams, state: OptimizerState
) -> tuple[ModelParams, OptimizerState]:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``w <- w - lr * v``."""
    params.check_same_shape(grads)
    params.check_same_shape(state.velocity)
    new_v = []
    new_w = []
    for (w, b), (gw, gb), (vw, vb) in zip(params.layers, grads.layers, state.velocity.layers):
        vw2 = state.momentum * vw + gw
        vb2 = state.momentum * vb + gb
        new_v.append((vw2, vb2))
        new_w.append((w - state.learning_rate * vw2, b - state.learning_rate * vb2))
    velocity = ModelParams(tuple(new_v))
    return ModelParams(tuple(new_w)), OptimizerState(
        velocity, state.learning_rate, state.momentum
    )


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(forward_logits(params, x), axis=1)


__all__ = [
    "LOG_CLAMP",
    "Batch",
    "ModelParams",
    "OptimizerState",
    "backprop",
    "cross_entropy",
    "cross_entropy_grad",
    "forward_logits",
    "init_mlp",
    "log_softmax",
    "predict",
    "sgd_step",
    "softmax_probs",
]

