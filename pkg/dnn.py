"""Feed-forward keyword DNN: ReLU hidden layers, softmax output, SGD trainer and weight file I/O."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

import config
from dsp_frontend import StackedInput

logger = logging.getLogger(__name__)


class InvalidStateError(RuntimeError):
    """Network parameters are unusable (e.g. contain NaN)."""


class TrainingDivergedError(RuntimeError):
    """Training loss became NaN or infinite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ParamsFormatError(ValueError):
    """Malformed weight file."""

    def __init__(self, message: str, offset: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.layer = layer


@dataclass(frozen=True)
class Topology:
    input_dim: int
    hidden_layers: int = config.HIDDEN_LAYERS
    hidden_nodes: int = config.HIDDEN_NODES
    n_labels: int = config.N_LABELS

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_nodes", "n_labels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"Topology.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_labels < 2:
            raise ValueError(f"Topology needs at least 2 labels, got {self.n_labels}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(rows, cols) = (outputs, inputs) per layer, input side first."""
        sizes = [self.input_dim] + [self.hidden_nodes] * self.hidden_layers + [self.n_labels]
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_layers": self.hidden_layers,
                "hidden_nodes": self.hidden_nodes, "n_labels": self.n_labels}


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray  # (rows, cols)
    bias: np.ndarray     # (rows,)

    def __post_init__(self):
        weights = np.atleast_2d(np.array(self.weights, dtype=np.float64))
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if weights.shape[0] != bias.shape[0]:
            raise ValueError(f"Layer has {weights.shape[0]} rows but {bias.shape[0]} biases")
        weights.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)


@dataclass(frozen=True, eq=False)
class NetworkParams:
    topology: Topology
    layers: tuple[Layer, ...]
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    loss_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        shapes = [layer.weights.shape for layer in layers]
        if shapes != self.topology.layer_shapes:
            raise ValueError(f"Layer shapes {shapes} do not match topology {self.topology.layer_shapes}")
        object.__setattr__(self, "layers", layers)
        if (self.input_mean is None) != (self.input_scale is None):
            raise ValueError("input_mean and input_scale must be given together")
        if self.input_mean is not None:
            mean = np.array(self.input_mean, dtype=np.float64).reshape(-1)
            scale = np.array(self.input_scale, dtype=np.float64).reshape(-1)
            if mean.shape != (self.topology.input_dim,) or scale.shape != mean.shape:
                raise ValueError("Input normalisation vectors must have input_dim entries")
            if np.any(scale <= 0):
                raise ValueError("Input scale must be positive")
            object.__setattr__(self, "input_mean", mean)
            object.__setattr__(self, "input_scale", scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkParams) or self.topology != other.topology:
            return False
        same_layers = all(np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                          for a, b in zip(self.layers, other.layers))
        if self.input_mean is None or other.input_mean is None:
            return same_layers and self.input_mean is None and other.input_mean is None
        return (same_layers and np.array_equal(self.input_mean, other.input_mean)
                and np.array_equal(self.input_scale, other.input_scale))

    __hash__ = None

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.bias)) for l in self.layers)

    def with_output_bias_shift(self, c: float) -> "NetworkParams":
        last = self.layers[-1]
        layers = self.layers[:-1] + (Layer(last.weights, last.bias + c),)
        return NetworkParams(self.topology, layers, self.input_mean, self.input_scale)


@dataclass(frozen=True, eq=False)
class PosteriorFrame:
    probs: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if np.any(probs < 0) or np.any(probs > 1) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"Posterior at frame {self.frame_index} is not a distribution")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    inputs: np.ndarray  # (N, input_dim)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] != labels.shape[0]:
            raise ValueError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and labels.min() < 0:
            raise ValueError("Labels must be non-negative")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[StackedInput, int]]) -> "TrainingSet":
        return cls(np.vstack([x.values for x, _ in pairs]), [label for _, label in pairs])


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def init_params(topology: Topology, seed: int | np.random.Generator = config.SEED) -> NetworkParams:
    """He-style uniform init (limit sqrt(6 / fan_in)), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for rows, cols in topology.layer_shapes:
        limit = np.sqrt(6.0 / cols)
        layers.append(Layer(rng.uniform(-limit, limit, size=(rows, cols)), np.zeros(rows)))
    return NetworkParams(topology, tuple(layers))


def _normalise(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    if params.input_mean is None:
        return X
    return (X - params.input_mean) / params.input_scale


def _forward_cache(weights, biases, X):
    """Returns (activations, pre-activations, logits); activations[0] is the input."""
    activations = [X]
    pre = []
    h = X
    for W, b in zip(weights[:-1], biases[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    logits = h @ weights[-1].T + biases[-1]
    return activations, pre, logits


def _as_batch(params: NetworkParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.topology.input_dim:
        raise ValueError(f"Input dimension {X.shape[1]} does not match network input {params.topology.input_dim}")
    if not params.is_finite():
        raise InvalidStateError("Network parameters contain NaN or infinite values")
    return X


def logits_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    X = _normalise(params, _as_batch(params, X))
    _, _, logits = _forward_cache([l.weights for l in params.layers], [l.bias for l in params.layers], X)
    return logits


def forward_batch(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    """Posteriors for every row of X, shape (N, n_labels)."""
    return softmax(logits_batch(params, X), axis=1)


def forward(params: NetworkParams, x: StackedInput | np.ndarray) -> PosteriorFrame:
    """
    Posterior over labels for one stacked input.

    Args:
        params: Network weights and biases
        x: StackedInput (or a plain vector) of dimension input_dim

    Returns:
        PosteriorFrame stamped with the input's center frame index
    """
    values = x.values if isinstance(x, StackedInput) else np.asarray(x, dtype=np.float64).reshape(-1)
    if values.shape[0] != params.topology.input_dim:
        raise ValueError(f"Input dimension {values.shape[0]} does not match network input {params.topology.input_dim}")
    index = x.center_frame_index if isinstance(x, StackedInput) else 0
    return PosteriorFrame(forward_batch(params, values.reshape(1, -1))[0], index)


def cross_entropy(params: NetworkParams, X: np.ndarray, labels: np.ndarray) -> float:
    logits = logits_batch(params, X)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(log_softmax(logits, axis=1)[np.arange(len(labels)), labels]))


def frame_accuracy(params: NetworkParams, X: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 1.0
    return float(np.mean(np.argmax(logits_batch(params, X), axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _gradients(weights, biases, X, labels):
    """Gradient of the mean cross-entropy with respect to every weight and bias."""
    activations, pre, logits = _forward_cache(weights, biases, X)
    delta = softmax(logits, axis=1)
    delta[np.arange(len(labels)), labels] -= 1.0
    delta /= len(labels)

    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        grads_w[layer] = delta.T @ activations[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer]) * (pre[layer - 1] > 0)
    return grads_w, grads_b


def backprop_gradients(params: NetworkParams, X, labels) -> list[Layer]:
    """Backpropagated gradient of the mean cross-entropy, one Layer of (dW, db) per layer."""
    X = _normalise(params, _as_batch(params, X))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grads_w, grads_b = _gradients([l.weights for l in params.layers], [l.bias for l in params.layers], X, labels)
    return [Layer(gw, gb) for gw, gb in zip(grads_w, grads_b)]


def numerical_gradients(params: NetworkParams, X, labels, epsilon: float = 1e-5) -> list[Layer]:
    """Central finite differences of the mean cross-entropy on every parameter."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    weights = [l.weights.copy() for l in params.layers]
    biases = [l.bias.copy() for l in params.layers]

    def loss() -> float:
        probe = NetworkParams(params.topology, tuple(Layer(w, b) for w, b in zip(weights, biases)),
                              params.input_mean, params.input_scale)
        return cross_entropy(probe, X, labels)

    grads = []
    for W, b in zip(weights, biases):
        gw = np.zeros_like(W)
        gb = np.zeros_like(b)
        for target, grad in ((W, gw), (b, gb)):
            flat = target.reshape(-1)
            out = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + epsilon
                up = loss()
                flat[i] = original - epsilon
                down = loss()
                flat[i] = original
                out[i] = (up - down) / (2.0 * epsilon)
        grads.append(Layer(gw, gb))
    return grads


def gradient_check(params: NetworkParams, x: StackedInput | np.ndarray, label: int, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    values = x.values if isinstance(x, StackedInput) else np.asarray(x, dtype=np.float64).reshape(-1)
    analytic = backprop_gradients(params, values, [label])
    numeric = numerical_gradients(params, values, [label], epsilon)
    worst = 0.0
    for a_layer, n_layer in zip(analytic, numeric):
        for a, n in ((a_layer.weights, n_layer.weights), (a_layer.bias, n_layer.bias)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_sgd(topology: Topology, data: TrainingSet, epochs: int = config.EPOCHS,
              learning_rate: float = config.LEARNING_RATE, batch_size: int = config.BATCH_SIZE,
              seed: int = config.SEED, normalize: bool = False) -> NetworkParams:
    """
    Mini-batch SGD on the mean cross-entropy.

    Args:
        topology: Network shape; input_dim must match the training inputs
        data: Stacked inputs with frame labels
        epochs: Passes over the data (0 returns the initialization)
        learning_rate: Step size; 0 leaves the parameters untouched
        batch_size: Mini-batch size
        seed: Seeds initialization and per-epoch shuffling
        normalize: Estimate per-dimension mean / scale on the data and store them with the weights

    Returns:
        NetworkParams with the per-epoch training loss in `loss_history`
    """
    if len(data) == 0:
        raise ValueError("Training set is empty")
    if learning_rate < 0:
        raise ValueError(f"learning_rate must be >= 0, got {learning_rate}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if data.inputs.shape[1] != topology.input_dim:
        raise ValueError(f"Training inputs have dim {data.inputs.shape[1]}, topology expects {topology.input_dim}")
    if data.labels.max() >= topology.n_labels:
        raise ValueError(f"Label {data.labels.max()} out of range for {topology.n_labels} labels")

    rng = np.random.default_rng(seed)
    initial = init_params(topology, rng)
    mean = scale = None
    if normalize:
        mean = data.inputs.mean(axis=0)
        scale = data.inputs.std(axis=0)
        scale = np.where(scale > 1e-8, scale, 1.0)
    X = data.inputs if mean is None else (data.inputs - mean) / scale
    y = data.labels

    weights = [l.weights.copy() for l in initial.layers]
    biases = [l.bias.copy() for l in initial.layers]
    history: list[float] = []
    n = len(y)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            grads_w, grads_b = _gradients(weights, biases, X[batch], y[batch])
            for layer in range(len(weights)):
                weights[layer] -= learning_rate * grads_w[layer]
                biases[layer] -= learning_rate * grads_b[layer]

        with np.errstate(all="ignore"):
            _, _, logits = _forward_cache(weights, biases, X)
            loss = float(-np.mean(log_softmax(logits, axis=1)[np.arange(n), y]))
        if not np.isfinite(loss):
            logger.error(f"Training diverged at epoch {epoch} (loss {loss})")
            raise TrainingDivergedError(f"Training diverged at epoch {epoch}: loss is {loss}", epoch)
        history.append(loss)
        logger.info(f"Epoch {epoch}/{epochs}: loss {loss:.5f}")

    layers = tuple(Layer(w, b) for w, b in zip(weights, biases))
    return NetworkParams(topology, layers, mean, scale, tuple(history))


# ---------------------------------------------------------------------------
# Weight file
# ---------------------------------------------------------------------------

def _numbers(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(values)) + "]"


def save_params(params: NetworkParams) -> bytes:
    """Serialise to the JSON weight format with 17 significant digits per float."""
    if not params.is_finite():
        raise InvalidStateError("Refusing to save non-finite network parameters")
    layers = []
    for layer in params.layers:
        rows, cols = layer.weights.shape
        layers.append(f'{{"rows":{rows},"cols":{cols},"weights":{_numbers(layer.weights)},'
                      f'"bias":{_numbers(layer.bias)}}}')
    parts = [f'"topology":{json.dumps(params.topology.to_dict())}', f'"layers":[{",".join(layers)}]']
    if params.input_mean is not None:
        parts.append(f'"input_norm":{{"mean":{_numbers(params.input_mean)},"scale":{_numbers(params.input_scale)}}}')
    return ("{" + ",".join(parts) + "}\n").encode("utf-8")


def _byte_offset(text: str, pattern: str, occurrence: int = 0) -> int:
    """Byte offset of the `occurrence`-th match of `pattern`, or 0 when absent."""
    matches = list(re.finditer(pattern, text))
    if occurrence >= len(matches):
        return 0
    return len(text[:matches[occurrence].start()].encode("utf-8"))


def load_params(data: bytes) -> NetworkParams:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParamsFormatError(f"Weight file is not UTF-8 (byte {e.start})", offset=e.start) from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise ParamsFormatError(f"Malformed weight file at byte {offset}: {e.msg}", offset=offset) from e
    if not isinstance(payload, dict):
        raise ParamsFormatError(f"Weight file must hold a JSON object at byte 0, got {type(payload).__name__}",
                                offset=0)

    try:
        topology = Topology(**payload["topology"])
    except (KeyError, TypeError, ValueError) as e:
        offset = _byte_offset(text, r'"topology"')
        raise ParamsFormatError(f"Invalid topology at byte {offset}: {e}", offset=offset) from e
    layers_offset = _byte_offset(text, r'"layers"')
    raw_layers = payload.get("layers")
    if not isinstance(raw_layers, list):
        raise ParamsFormatError(f"Expected a list of layers at byte {layers_offset}, got {type(raw_layers).__name__}",
                                offset=layers_offset)

    expected = topology.layer_shapes
    if len(raw_layers) != len(expected):
        raise ParamsFormatError(
            f"Topology implies {len(expected)} layers, file has {len(raw_layers)} (byte {layers_offset})",
            offset=layers_offset,
        )

    layers = []
    for i, (raw, shape) in enumerate(zip(raw_layers, expected)):
        offset = _byte_offset(text, r'\{\s*"rows"', i) or layers_offset
        try:
            rows, cols = int(raw["rows"]), int(raw["cols"])
            weights = np.asarray(raw["weights"], dtype=np.float64)
            bias = np.asarray(raw["bias"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise ParamsFormatError(f"Layer {i} at byte {offset}: {e}", offset=offset, layer=i) from e
        if (rows, cols) != shape:
            raise ParamsFormatError(f"Layer {i} at byte {offset}: declared {rows}x{cols}, "
                                    f"topology needs {shape[0]}x{shape[1]}", offset=offset, layer=i)
        if weights.size != rows * cols or bias.size != rows:
            raise ParamsFormatError(
                f"Layer {i} at byte {offset}: declared {rows}x{cols} but has {weights.size} weights "
                f"and {bias.size} biases", offset=offset, layer=i
            )
        layers.append(Layer(weights.reshape(rows, cols), bias))

    mean = scale = None
    if "input_norm" in payload:
        offset = _byte_offset(text, r'"input_norm"')
        try:
            mean = payload["input_norm"]["mean"]
            scale = payload["input_norm"]["scale"]
        except (KeyError, TypeError) as e:
            raise ParamsFormatError(f"Invalid input_norm block at byte {offset}: {e}", offset=offset) from e
    try:
        return NetworkParams(topology, tuple(layers), mean, scale)
    except ValueError as e:
        offset = _byte_offset(text, r'"input_norm"')
        raise ParamsFormatError(f"{e} (byte {offset})", offset=offset) from e


def save_network(params: NetworkParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_params(params))
    logger.info(f"Saved network ({params.topology.hidden_layers}x{params.topology.hidden_nodes}) to {path}")
    return path


def load_network(path) -> NetworkParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Weight file not found: {path}")
    return load_params(path.read_bytes())
