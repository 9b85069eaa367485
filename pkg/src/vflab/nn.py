"""Dense feed-forward networks with backprop, in 64-bit numpy.

Plain mini-batch SGD on softmax cross-entropy.  The same engine serves as the
centralized baseline and as the bottom/top pieces of the split network, so
forward() hands back every intermediate activation and backward() returns the
input gradient alongside the parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NnError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(a):
    return (a > 0).astype(float)


def _identity(z):
    return z


def _identity_grad(a):
    return np.ones_like(a)


# activation name -> (forward, gradient-from-activation)
ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) and per-layer activations.

    ``activations`` may be a single name applied to every layer but the last
    (which defaults to identity margins), or one name per weight layer.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    init: str = "glorot-uniform"
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise NnError("spec needs at least an input and an output layer")
        if any(w <= 0 for w in self.widths):
            raise NnError("layer widths must be positive")
        n_layers = len(self.widths) - 1
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,)
        if len(acts) == 0:
            acts = ("tanh",) * (n_layers - 1) + ("identity",)
        elif len(acts) == 1 and n_layers > 1:
            acts = (acts[0],) * (n_layers - 1) + ("identity",)
        elif len(acts) != n_layers:
            raise NnError(f"{len(acts)} activations for {n_layers} layers")
        for a in acts:
            if a not in ACTIVATIONS:
                raise NnError(f"unknown activation {a!r}")
        if self.init not in ("glorot-uniform", "he-normal"):
            raise NnError(f"unknown init scheme {self.init!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(acts))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list[np.ndarray]  # per layer, (fan_in, fan_out)
    biases: list[np.ndarray]

    @classmethod
    def init(cls, spec: MlpSpec) -> "MlpModel":
        rng = np.random.default_rng(spec.seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            if spec.init == "glorot-uniform":
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            else:  # he-normal
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {
            "widths": list(self.spec.widths),
            "activations": list(self.spec.activations),
            "init": self.spec.init,
            "seed": self.spec.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpModel":
        spec = MlpSpec(tuple(doc["widths"]), tuple(doc["activations"]), doc["init"], doc["seed"])
        return cls(
            spec,
            [np.array(w) for w in doc["weights"]],
            [np.array(b) for b in doc["biases"]],
        )


def forward(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Run the batch through every layer; returns [input, a1, ..., output].

    The final entry is un-normalized margins when the last activation is
    identity (the usual configuration for classifier heads).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.spec.widths[0]:
        raise NnError(
            f"input width {x.shape[-1] if x.ndim == 2 else x.shape} "
            f"does not match spec width {model.spec.widths[0]}"
        )
    activations = [x]
    for w, b, name in zip(model.weights, model.biases, model.spec.activations):
        act, _ = ACTIVATIONS[name]
        activations.append(act(activations[-1] @ w + b))
    return activations


def backward(
    model: MlpModel, activations: list[np.ndarray], upstream: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backprop ``upstream`` (d loss / d output) through the model.

    Returns per-layer (dW, db) plus the gradient w.r.t. the model input,
    which is what the server ships back to each client in split training.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != activations[-1].shape:
        raise NnError("upstream gradient shape does not match forward output")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.spec.n_layers
    delta = upstream
    for layer in range(model.spec.n_layers - 1, -1, -1):
        _, act_grad = ACTIVATIONS[model.spec.activations[layer]]
        delta = delta * act_grad(activations[layer + 1])
        grads[layer] = (activations[layer].T @ delta, delta.sum(axis=0))
        delta = delta @ model.weights[layer].T
    return grads, delta


def sgd_step(model: MlpModel, grads, lr: float) -> None:
    for layer, (dw, db) in enumerate(grads):
        model.weights[layer] -= lr * dw
        model.biases[layer] -= lr * db


def softmax(margins: np.ndarray) -> np.ndarray:
    shifted = margins - margins.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def cross_entropy(margins: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the margins."""
    p = softmax(margins)
    n = margins.shape[0]
    loss = float(-(onehot * np.log(np.clip(p, 1e-15, None))).sum() / n)
    return loss, (p - onehot) / n


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise NnError("learning rate/epochs/batch size must be positive")


def batch_schedule(n: int, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    return [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def onehot_labels(labels: np.ndarray, class_labels: tuple[int, ...]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_labels)}
    out = np.zeros((len(labels), len(class_labels)))
    out[np.arange(len(labels)), [lookup[int(v)] for v in labels]] = 1.0
    return out


def train_arrays(
    x: np.ndarray,
    labels: np.ndarray,
    spec: MlpSpec,
    cfg: TrainConfig,
    class_labels: tuple[int, ...] | None = None,
) -> tuple[MlpModel, list[float]]:
    """Mini-batch SGD training; returns the model and per-epoch mean loss."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if class_labels is None:
        class_labels = tuple(int(c) for c in np.unique(labels))
    if spec.widths[-1] != len(class_labels):
        raise NnError(
            f"output width {spec.widths[-1]} does not match {len(class_labels)} classes"
        )
    onehot = onehot_labels(labels, class_labels)
    model = MlpModel.init(spec)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        batches = batch_schedule(len(labels), cfg, rng)
        for batch in batches:
            acts = forward(model, x[batch])
            loss, dmargins = cross_entropy(acts[-1], onehot[batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads, _ = backward(model, acts, dmargins)
            sgd_step(model, grads, cfg.lr)
            epoch_loss += loss * len(batch)
        losses.append(epoch_loss / len(labels) if len(labels) else 0.0)
    return model, losses


def train_centralized(dataset, spec: MlpSpec, cfg: TrainConfig) -> tuple[MlpModel, list[float]]:
    """Centralized baseline: binned categories fed as reals 0-3."""
    return train_arrays(dataset.values, dataset.labels, spec, cfg)


def predict_arrays(model: MlpModel, x: np.ndarray, class_labels: tuple[int, ...]) -> np.ndarray:
    margins = forward(model, x)[-1]
    labels = np.asarray(class_labels, dtype=np.int64)
    return labels[margins.argmax(axis=1)]
