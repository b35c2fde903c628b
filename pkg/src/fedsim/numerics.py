"""Dense MLP classifier, cross-entropy loss and minibatch SGD on numpy.

All randomness goes through an explicit ``numpy.random.Generator`` so that
every stochastic call is a pure function of its inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when array or vector dimensions do not line up."""


class LabelError(ValueError):
    """Raised when a class label is outside ``[0, num_classes)``."""


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (1024, 256)
    num_classes: int = 31
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum((d_in + 1) * d_out for d_in, d_out in self.layer_dims)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 3

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class MlpModel:
    """Fully connected classifier: ReLU + dropout on hidden layers, softmax head.

    ``weights[i]`` has shape ``(d_in, d_out)``; ``biases[i]`` has shape ``(d_out,)``.
    """

    config: MlpConfig
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.config.layer_dims) or len(self.biases) != len(self.weights):
            raise ShapeError("parameter list length does not match config layer count")
        for (d_in, d_out), w, b in zip(self.config.layer_dims, self.weights, self.biases):
            if w.shape != (d_in, d_out) or b.shape != (d_out,):
                raise ShapeError(f"layer expects W{(d_in, d_out)} b{(d_out,)}, got W{w.shape} b{b.shape}")

    @property
    def num_params(self) -> int:
        return self.config.num_params


def init_model(config: MlpConfig) -> MlpModel:
    """Glorot-uniform weights and zero biases, drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for d_in, d_out in config.layer_dims:
        limit = np.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpModel(config, weights, biases)


def zeros_model(config: MlpConfig) -> MlpModel:
    return MlpModel(
        config,
        [np.zeros((d_in, d_out)) for d_in, d_out in config.layer_dims],
        [np.zeros(d_out) for _, d_out in config.layer_dims],
    )


def flatten(model: MlpModel) -> np.ndarray:
    """Concatenate parameters layer by layer: W (row-major) then b."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts).astype(np.float64, copy=True)


def unflatten(vec: np.ndarray, config: MlpConfig) -> MlpModel:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != config.num_params:
        raise ShapeError(f"weight vector has shape {vec.shape}, config expects ({config.num_params},)")
    weights, biases = [], []
    pos = 0
    for d_in, d_out in config.layer_dims:
        n = d_in * d_out
        weights.append(vec[pos:pos + n].reshape(d_in, d_out).copy())
        pos += n
        biases.append(vec[pos:pos + d_out].copy())
        pos += d_out
    return MlpModel(config, weights, biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.config.input_dim:
        raise ShapeError(f"batch has shape {batch.shape}, model expects (n, {model.config.input_dim})")
    return batch


def _forward_pass(model, batch, training, rng):
    # Returns logits plus the per-layer cache backprop needs.
    p = model.config.dropout_rate
    use_dropout = training and p > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with dropout requires an rng")
    h = batch
    cache = []
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        if i == n_layers - 1:
            cache.append((h, None, None))
            return z, cache
        a = np.maximum(z, 0.0)
        mask = None
        if use_dropout:
            # Inverted dropout: rescale kept units so evaluation needs no correction.
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        cache.append((h, z, mask))
        h = a
    raise AssertionError("unreachable")


def logits(model: MlpModel, batch: np.ndarray, training: bool = False,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Pre-softmax scores of the output layer."""
    batch = _check_batch(model, batch)
    out, _ = _forward_pass(model, batch, training, rng)
    return out


def forward(model: MlpModel, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities, one row per sample.

    Dropout masks are drawn from ``rng`` only when ``training`` is set.
    """
    return softmax(logits(model, batch, training, rng))


def predict(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties toward the lowest class index.
    return np.argmax(logits(model, batch), axis=1)


def _check_labels(model: MlpModel, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= model.config.num_classes):
        raise LabelError(f"labels must lie in [0, {model.config.num_classes})")
    return labels.astype(np.int64)


def loss_and_grad(model: MlpModel, batch: np.ndarray, labels,
                  rng: np.random.Generator | None = None,
                  training: bool = True) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient as a flat vector.

    The gradient is laid out exactly like :func:`flatten`.
    """
    batch = _check_batch(model, batch)
    n = batch.shape[0]
    labels = _check_labels(model, labels, n)
    if n == 0:
        raise ShapeError("empty batch")
    z, cache = _forward_pass(model, batch, training, rng)

    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    delta = np.exp(log_probs)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        h_in = cache[i][0]
        grads_w[i] = h_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        _, z_prev, mask_prev = cache[i - 1]
        if mask_prev is not None:
            delta = delta * mask_prev
        delta = delta * (z_prev > 0.0)

    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return loss, np.concatenate(parts)


def sgd_epoch(model: MlpModel, features: np.ndarray, labels, cfg: SgdConfig,
              rng: np.random.Generator) -> MlpModel:
    """One shuffled pass over ``(features, labels)``; returns a new model.

    The last short batch is kept and its gradient is the mean over its size.
    """
    features = _check_batch(model, features)
    n = features.shape[0]
    if n == 0:
        raise ShapeError("cannot run an SGD epoch on an empty dataset")
    labels = _check_labels(model, labels, n)
    w = flatten(model)
    # Layer arrays are views into w, so the in-place step updates the model too.
    current = _views(w, model.config)
    order = rng.permutation(n)
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        _, grad = loss_and_grad(current, features[idx], labels[idx], rng)
        w -= cfg.learning_rate * grad
    return current


def _views(vec: np.ndarray, config: MlpConfig) -> MlpModel:
    weights, biases = [], []
    pos = 0
    for d_in, d_out in config.layer_dims:
        n = d_in * d_out
        weights.append(vec[pos:pos + n].reshape(d_in, d_out))
        pos += n
        biases.append(vec[pos:pos + d_out])
        pos += d_out
    return MlpModel(config, weights, biases)
