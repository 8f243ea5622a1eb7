"""Minimal dense neural-network engine with exact manual backpropagation.

All tensors are float32 numpy arrays. Models are plain stacks of dense
layers with ReLU activations between them and a softmax read-out; that is
enough to host both the federated main-task classifiers and the ownership
detector. Gradients are computed analytically (cross-entropy through
softmax) for parameters *and* for the input batch, because the fingerprint
generator needs input gradients.

Everything here is a pure function over value-semantic arrays: no hidden
state, no global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

# Floor used when taking logs of probabilities so finite inputs can never
# produce NaN/Inf.
_PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up with a model."""


class LabelError(ValueError):
    """Raised when a label matrix is not row-stochastic one-hot."""


@dataclass
class ModelParams:
    """Ordered dense-layer parameters.

    Attributes:
        layers: list of (weight, bias) pairs; weight has shape
            (fan_in, fan_out), bias has shape (fan_out,).
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def architecture(self) -> tuple[int, ...]:
        """Layer-size descriptor (d0, d1, ..., dk)."""
        sizes = [self.layers[0][0].shape[0]]
        sizes.extend(w.shape[1] for w, _ in self.layers)
        return tuple(sizes)

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers]
        )

    def flat(self) -> np.ndarray:
        """All parameters concatenated into one float32 vector."""
        parts = []
        for w, b in self.layers:
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def validate(self) -> None:
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i > 0 and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i - 1} out={self.layers[i - 1][0].shape[1]} "
                    f"!= layer {i} in={w.shape[0]}"
                )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        if len(self.layers) != len(other.layers):
            return False
        return all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


@dataclass
class MlpModel:
    """Feed-forward classifier: dense/ReLU hidden layers, softmax output."""

    params: ModelParams

    @property
    def input_width(self) -> int:
        return self.params.architecture[0]

    @property
    def class_count(self) -> int:
        return self.params.architecture[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.params.copy())


def init_params(architecture: tuple[int, ...], rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform initialization: U(+-sqrt(6/(fan_in+fan_out)))."""
    if len(architecture) < 2:
        raise ValueError("architecture needs at least input and output widths")
    layers = []
    for fan_in, fan_out in zip(architecture[:-1], architecture[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(DTYPE)
        b = np.zeros(fan_out, dtype=DTYPE)
        layers.append((w, b))
    return ModelParams(layers)


def init_model(architecture: tuple[int, ...], rng: np.random.Generator) -> MlpModel:
    return MlpModel(init_params(architecture, rng))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max-subtraction for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=DTYPE)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch.

    Args:
        model: the classifier.
        batch: (rows, input_width) float array.

    Returns:
        (rows, class_count) float32 logits.

    Raises:
        ShapeError: batch inner dimension does not match the model input.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 2 or batch.shape[1] != model.input_width:
        raise ShapeError(
            f"batch shape {batch.shape} incompatible with input width "
            f"{model.input_width}"
        )
    h = batch
    last = len(model.params.layers) - 1
    for i, (w, b) in enumerate(model.params.layers):
        h = h @ w + b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h


def predict_proba(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Softmax class distributions for a batch."""
    return softmax(forward(model, batch))


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    out = np.zeros((len(labels), class_count), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_one_hot(labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise LabelError(f"labels must be 2-D, got shape {labels.shape}")
    is_binary = np.all((labels == 0.0) | (labels == 1.0))
    rows_sum_one = np.all(labels.sum(axis=1) == 1.0)
    if not (is_binary and rows_sum_one):
        raise LabelError("labels must be one-hot rows")


def backward(
    model: MlpModel, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, ModelParams, np.ndarray]:
    """Cross-entropy loss plus exact gradients.

    Args:
        model: the classifier.
        batch: (rows, input_width) inputs.
        labels: (rows, class_count) one-hot targets.

    Returns:
        (loss, parameter gradients shaped like the model, input gradients).
        Loss is the mean cross-entropy over the batch.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    _check_one_hot(labels)
    if labels.shape != (batch.shape[0], model.class_count):
        raise ShapeError(
            f"labels shape {labels.shape} incompatible with batch "
            f"{batch.shape} and {model.class_count} classes"
        )

    # Forward pass, keeping pre- and post-activation values per layer.
    acts = [batch]
    last = len(model.params.layers) - 1
    h = batch
    for i, (w, b) in enumerate(model.params.layers):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
        acts.append(h)

    probs = softmax(acts[-1])
    rows = batch.shape[0]
    picked = np.maximum((probs * labels).sum(axis=1), _PROB_FLOOR)
    loss = float(-np.log(picked).mean())

    # Softmax + cross-entropy gives dL/dlogits = (p - y) / rows exactly.
    delta = (probs - labels) / DTYPE(rows)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.params.layers)
    for i in range(last, -1, -1):
        w, _ = model.params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0.0)
        else:
            delta = delta @ w.T
    return loss, ModelParams(grads), delta


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float,
    velocity: ModelParams,
    weight_decay: float = 0.0,
) -> ModelParams:
    """Heavy-ball SGD update, in place on params and velocity.

    v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
    The weight-decay knob is separate from momentum; both default to the
    plain update.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if len(params.layers) != len(grads.layers) or len(params.layers) != len(
        velocity.layers
    ):
        raise ShapeError("params/grads/velocity layer counts differ")
    lr = DTYPE(lr)
    momentum = DTYPE(momentum)
    weight_decay = DTYPE(weight_decay)
    for (w, b), (gw, gb), (vw, vb) in zip(
        params.layers, grads.layers, velocity.layers
    ):
        if w.shape != gw.shape or w.shape != vw.shape:
            raise ShapeError("weight/grad/velocity shape mismatch")
        if weight_decay != 0.0:
            gw = gw + weight_decay * w
        vw *= momentum
        vw += gw
        vb *= momentum
        vb += gb
        w -= lr * vw
        b -= lr * vb
    return params


def accuracy(model: MlpModel, samples: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax logit equals the integer label."""
    preds = forward(model, samples).argmax(axis=1)
    return float((preds == labels).mean())


@dataclass
class SgdTrainer:
    """Seeded minibatch SGD over a fixed sample/label set.

    Owns the momentum velocity so repeated `epoch` calls continue the same
    optimizer trajectory.
    """

    model: MlpModel
    lr: float
    momentum: float = 0.0
    batch_size: int = 32
    weight_decay: float = 0.0
    velocity: ModelParams = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.velocity is None:
            self.velocity = self.model.params.zeros_like()

    def epoch(
        self, samples: np.ndarray, labels: np.ndarray, rng: np.random.Generator
    ) -> float:
        """One shuffled pass; returns the mean minibatch loss."""
        n = len(samples)
        order = rng.permutation(n)
        targets = one_hot(labels, self.model.class_count)
        losses = []
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            loss, grads, _ = backward(self.model, samples[idx], targets[idx])
            sgd_step(
                self.model.params,
                grads,
                self.lr,
                self.momentum,
                self.velocity,
                self.weight_decay,
            )
            losses.append(loss)
        return float(np.mean(losses))
