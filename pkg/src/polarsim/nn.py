"""Minimal dense network with named, individually replaceable layers.

The model is the unit the layer-wise attacks operate on: every layer is a
(weight, bias) pair addressable by index through a binary selection mask.
Forward scores are raw logits; softmax is fused into the training loss, so
argmax-based metrics are unaffected.

All operations are pure: parameters are returned as new objects and the
stored arrays are marked read-only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, InputError, NumericalError, ShapeError
from .rng import substream

ACTIVATIONS = ("relu", "identity", "softmax-at-head")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: str = "identity"


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer descriptors; consecutive dimensions must chain."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ConfigError("architecture needs at least 2 layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique, got {names}")
        for l in self.layers:
            if l.in_dim < 1 or l.out_dim < 1:
                raise ConfigError(f"layer {l.name}: dimensions must be positive")
            if l.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {l.name}: unknown activation {l.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(
                    f"dimension chain broken: {a.name} out_dim={a.out_dim} "
                    f"!= {b.name} in_dim={b.in_dim}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(l.out_dim * l.in_dim + l.out_dim for l in self.layers)


def mlp_arch(in_dim: int, hidden_dims: tuple[int, ...], num_classes: int) -> ArchSpec:
    """ReLU MLP with a linear classification head; layers named fc1..fcN, head."""
    dims = [in_dim, *hidden_dims, num_classes]
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            LayerSpec(
                name="head" if last else f"fc{i + 1}",
                in_dim=a,
                out_dim=b,
                activation="softmax-at-head" if last else "relu",
            )
        )
    return ArchSpec(tuple(layers))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_layer_shapes(arch: ArchSpec, weights, biases, *, require_finite: bool):
    if len(weights) != arch.num_layers or len(biases) != arch.num_layers:
        raise ShapeError("layer count does not match architecture")
    for spec, w, b in zip(arch.layers, weights, biases):
        if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
            raise ShapeError(
                f"layer {spec.name}: got W{w.shape}, b{b.shape}, "
                f"expected W({spec.out_dim}, {spec.in_dim}), b({spec.out_dim},)"
            )
        if require_finite and not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericalError(f"layer {spec.name}: non-finite parameters")


@dataclass(frozen=True)
class ModelParams:
    """Per-layer weight matrices (out_dim x in_dim) and bias vectors."""

    arch: ArchSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        _check_layer_shapes(self.arch, self.weights, self.biases, require_finite=True)


@dataclass(frozen=True)
class UpdateVector:
    """Per-layer delta with the same layout as ModelParams.

    flat() concatenates each layer's weights then bias, in layer order;
    from_flat inverts it bit-exactly.
    """

    arch: ArchSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        _check_layer_shapes(self.arch, self.weights, self.biases, require_finite=False)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: ArchSpec, vec: np.ndarray) -> "UpdateVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != arch.num_params:
            raise ShapeError(f"expected flat vector of length {arch.num_params}, got {vec.shape}")
        weights, biases, pos = [], [], 0
        for spec in arch.layers:
            n = spec.out_dim * spec.in_dim
            weights.append(vec[pos : pos + n].reshape(spec.out_dim, spec.in_dim))
            pos += n
            biases.append(vec[pos : pos + spec.out_dim])
            pos += spec.out_dim
        return cls(arch, tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, arch: ArchSpec) -> "UpdateVector":
        return cls.from_flat(arch, np.zeros(arch.num_params))


@dataclass(frozen=True)
class TrainConfig:
    """Local-training hyperparameters shared by benign and malicious clients."""

    epochs: int = 2
    lr: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def init_model(arch: ArchSpec, seed: int) -> ModelParams:
    """Fan-scaled uniform weights in +-sqrt(6/(in+out)), zero biases."""
    rng = substream(seed)
    weights, biases = [], []
    for spec in arch.layers:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return ModelParams(arch, tuple(weights), tuple(biases))


def forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Class-score matrix (one row of logits per input row)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.in_dim:
        raise ShapeError(f"inputs must be (batch, {model.arch.in_dim}), got {x.shape}")
    h = x
    for spec, w, b in zip(model.arch.layers, model.weights, model.biases):
        h = h @ w.T + b
        if spec.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def _forward_cached(weights, biases, arch: ArchSpec, x: np.ndarray):
    """Forward pass keeping post-activation values for backprop."""
    acts = [x]
    h = x
    for spec, w, b in zip(arch.layers, weights, biases):
        h = h @ w.T + b
        if spec.activation == "relu":
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _batch_loss_and_grads(weights, biases, arch: ArchSpec, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy on (x, y) plus gradients per layer."""
    n = x.shape[0]
    acts = _forward_cached(weights, biases, arch, x)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))

    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    dz = probs
    dz[np.arange(n), y] -= 1.0
    dz /= n

    grads_w = [None] * arch.num_layers
    grads_b = [None] * arch.num_layers
    for i in range(arch.num_layers - 1, -1, -1):
        grads_w[i] = dz.T @ acts[i]
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ weights[i]
            if arch.layers[i - 1].activation == "relu":
                da = da * (acts[i] > 0)
            dz = da
    return loss, grads_w, grads_b


def dataset_loss(model: ModelParams, data: LabeledDataset) -> float:
    """Mean cross-entropy of the model on the whole dataset."""
    if data.size == 0:
        raise InputError("empty dataset")
    loss, _, _ = _batch_loss_and_grads(
        model.weights, model.biases, model.arch, data.features, data.labels
    )
    return loss


def loss_and_gradients(model: ModelParams, data: LabeledDataset):
    """(loss, UpdateVector of d loss / d params) over the full dataset."""
    if data.size == 0:
        raise InputError("empty dataset")
    loss, gw, gb = _batch_loss_and_grads(
        model.weights, model.biases, model.arch, data.features, data.labels
    )
    return loss, UpdateVector(model.arch, tuple(gw), tuple(gb))


def train_local(
    model: ModelParams,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> tuple[ModelParams, float]:
    """Mini-batch SGD with softmax cross-entropy.

    Shuffling is deterministic per (seed, epoch). Returns the trained model
    and the mean loss of the final epoch; with epochs=0 the input model is
    returned with its current loss on the data.
    """
    if data.size == 0:
        raise InputError("empty dataset")
    if data.dim != model.arch.in_dim:
        raise ShapeError(f"data dim {data.dim} != model in_dim {model.arch.in_dim}")
    if int(data.labels.max()) >= model.arch.out_dim:
        raise ShapeError("label id exceeds model output dimension")
    if epochs == 0:
        return model, dataset_loss(model, data)

    arch = model.arch
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    n = data.size
    epoch_loss = 0.0
    for epoch in range(epochs):
        order = substream(seed, epoch).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, gw, gb = _batch_loss_and_grads(
                weights, biases, arch, data.features[idx], data.labels[idx]
            )
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss in epoch {epoch}")
            for i in range(arch.num_layers):
                weights[i] -= lr * gw[i]
                biases[i] -= lr * gb[i]
            total += loss * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
    return ModelParams(arch, tuple(weights), tuple(biases)), epoch_loss


def _require_same_arch(a: ArchSpec, b: ArchSpec):
    if a != b:
        raise ShapeError("architectures differ")


def replace_layers(base: ModelParams, donor: ModelParams, mask) -> ModelParams:
    """Model taking layer l from donor where mask[l]==1, else from base."""
    _require_same_arch(base.arch, donor.arch)
    mask = np.asarray(mask)
    if mask.shape != (base.arch.num_layers,):
        raise ShapeError(f"mask length {mask.shape} != layer count {base.arch.num_layers}")
    weights = tuple(
        donor.weights[i] if mask[i] else base.weights[i] for i in range(base.arch.num_layers)
    )
    biases = tuple(
        donor.biases[i] if mask[i] else base.biases[i] for i in range(base.arch.num_layers)
    )
    return ModelParams(base.arch, weights, biases)


def model_delta(model: ModelParams, reference: ModelParams) -> UpdateVector:
    """Element-wise model minus reference."""
    _require_same_arch(model.arch, reference.arch)
    weights = tuple(m - r for m, r in zip(model.weights, reference.weights))
    biases = tuple(m - r for m, r in zip(model.biases, reference.biases))
    return UpdateVector(model.arch, weights, biases)


def apply_aggregate(global_model: ModelParams, aggregate: UpdateVector) -> ModelParams:
    """Global model plus aggregated delta."""
    _require_same_arch(global_model.arch, aggregate.arch)
    weights = tuple(g + u for g, u in zip(global_model.weights, aggregate.weights))
    biases = tuple(g + u for g, u in zip(global_model.biases, aggregate.biases))
    for spec, w, b in zip(global_model.arch.layers, weights, biases):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericalError(f"non-finite parameters in layer {spec.name} after aggregation")
    return ModelParams(global_model.arch, weights, biases)
