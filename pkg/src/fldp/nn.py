"""Minimal dense classifiers with explicit backprop and plain SGD.

Float64 end to end: gradient checks against finite differences and the
bitwise-determinism guarantees of the testbed are not attainable at float32
precision. All functions are pure; parameter vectors are immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Forward pass produced non-finite values (training diverged)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelArch:
    """Layer widths of a ReLU MLP with a softmax cross-entropy head.

    ``layer_widths = (in, hidden..., out)``; two entries give multinomial
    logistic regression. The output width is the number of classes.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output layers")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive, got {self.layer_widths}")
        if self.layer_widths[-1] < 2:
            raise ValueError("output width (number of classes) must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.loss != "softmax_cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    def tensor_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Shapes of the flattened parameter layout: (W1, b1, W2, b2, ...)."""
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            shapes.append((fan_in, fan_out))
            shapes.append((fan_out,))
        return tuple(shapes)

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes())


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter/gradient/update vector plus shape metadata."""

    values: np.ndarray
    shapes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(s)) for s in self.shapes)
        if v.size != expected:
            raise ValueError(f"flat size {v.size} does not match shapes (want {expected})")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))

    def __len__(self) -> int:
        return self.values.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def tensors(self) -> list[np.ndarray]:
        """Read-only per-layer views in (W1, b1, W2, b2, ...) order."""
        out, offset = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.values[offset : offset + size].reshape(shape))
            offset += size
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def _check_same_shape(self, other: "ParamVector"):
        if self.shapes != other.shapes:
            raise ValueError(f"shape mismatch: {self.shapes} vs {other.shapes}")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_shape(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_shape(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, arch: ModelArch) -> "ParamVector":
        return cls(np.zeros(arch.param_count()), arch.tensor_shapes())


@dataclass(frozen=True, eq=False)
class Batch:
    """A non-empty matrix of examples: features (n, d) and labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("features must be a non-empty (n, d) matrix")
        if y.shape[0] != x.shape[0]:
            raise ValueError("features and labels disagree on batch size")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))

    def __len__(self) -> int:
        return self.features.shape[0]


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Batch):
        return data.features, data.labels
    if hasattr(data, "features") and hasattr(data, "labels"):
        return np.asarray(data.features, dtype=np.float64), np.asarray(data.labels)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def init_model(arch: ModelArch, rng: np.random.Generator) -> ParamVector:
    """Fan-in-scaled uniform weights, zero biases. Deterministic per stream."""
    chunks = []
    for shape in arch.tensor_shapes():
        if len(shape) == 2:
            limit = 1.0 / np.sqrt(shape[0])
            chunks.append(rng.uniform(-limit, limit, size=shape).ravel())
        else:
            chunks.append(np.zeros(shape))
    return ParamVector(np.concatenate(chunks), arch.tensor_shapes())


def _forward(params: ParamVector, arch: ModelArch, x: np.ndarray):
    """Returns (logits, activations) where activations[l] feeds layer l."""
    tensors = params.tensors()
    activations = [x]
    h = x
    n_layers = len(arch.layer_widths) - 1
    # Overflow surfaces as the typed DivergenceError below, not a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in range(n_layers):
            w, b = tensors[2 * layer], tensors[2 * layer + 1]
            z = h @ w + b
            if layer < n_layers - 1:
                h = np.maximum(z, 0.0)
                activations.append(h)
            else:
                h = z
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite activations in forward pass")
    return h, activations


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backward(params, arch, activations, dlogits) -> np.ndarray:
    """Batch backprop; dlogits already carries any 1/n factor. Returns flat grad."""
    tensors = params.tensors()
    n_layers = len(arch.layer_widths) - 1
    grads: list[np.ndarray] = [np.empty(0)] * (2 * n_layers)
    delta = dlogits
    for layer in range(n_layers - 1, -1, -1):
        a_in = activations[layer]
        grads[2 * layer] = (a_in.T @ delta).ravel()
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            w = tensors[2 * layer]
            delta = (delta @ w.T) * (activations[layer] > 0.0)
    return np.concatenate(grads)


def loss_and_grad(model: ParamVector, arch: ModelArch, batch: Batch) -> tuple[float, ParamVector]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the model."""
    x, y = _as_xy(batch)
    n = x.shape[0]
    logits, activations = _forward(model, arch, x)
    logp = _log_probs(logits)
    loss = float(-logp[np.arange(n), y].mean())
    dlogits = softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad = ParamVector(_backward(model, arch, activations, dlogits), model.shapes)
    return loss, grad


def per_example_grad_matrix(model: ParamVector, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(n, P) matrix of per-example gradients of the (unaveraged) loss."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    n = x.shape[0]
    tensors = model.tensors()
    logits, activations = _forward(model, arch, x)
    delta = softmax(logits)
    delta[np.arange(n), y] -= 1.0
    n_layers = len(arch.layer_widths) - 1
    pieces: list[np.ndarray] = [np.empty(0)] * (2 * n_layers)
    for layer in range(n_layers - 1, -1, -1):
        a_in = activations[layer]
        pieces[2 * layer] = np.einsum("ni,nj->nij", a_in, delta).reshape(n, -1)
        pieces[2 * layer + 1] = delta
        if layer > 0:
            w = tensors[2 * layer]
            delta = (delta @ w.T) * (activations[layer] > 0.0)
    return np.concatenate(pieces, axis=1)


def per_example_grads(model: ParamVector, arch: ModelArch, batch: Batch) -> list[ParamVector]:
    """One gradient per example; their mean equals the batch gradient."""
    x, y = _as_xy(batch)
    mat = per_example_grad_matrix(model, arch, x, y)
    return [ParamVector(row, model.shapes) for row in mat]


def sgd_step(model: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """Elementwise theta - lr * g."""
    model._check_same_shape(grad)
    return model.with_values(model.values - lr * grad.values)


def evaluate(model: ParamVector, arch: ModelArch, dataset) -> tuple[float, float]:
    """(argmax accuracy, mean cross-entropy) over a non-empty dataset."""
    x, y = _as_xy(dataset)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits, _ = _forward(model, arch, x)
    logp = _log_probs(logits)
    pred = logits.argmax(axis=1)
    accuracy = float((pred == y).mean())
    mean_loss = float(-logp[np.arange(x.shape[0]), y].mean())
    return accuracy, mean_loss


def predict(model: ParamVector, arch: ModelArch, x: np.ndarray) -> np.ndarray:
    logits, _ = _forward(model, arch, np.asarray(x, dtype=np.float64))
    return logits.argmax(axis=1)
