"""
Small DLRM in numpy: embeddings, bottom MLP, pairwise dot interaction,
top MLP and sigmoid, with an explicit backward pass and plain SGD.

Weights are stored as (fan_in, fan_out) so a layer computes x @ W + b.
Parameters are 32-bit; `ModelParams.astype(np.float64)` gives the 64-bit
mode used for gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from errors import CacheError, ConfigError, NumericError, ShapeError

BCE_EPSILON = 1e-7


# ========================================
# Configuration
# ========================================

@dataclass(frozen=True)
class DlrmConfig:
    num_dense: int = 13
    num_sparse: int = 26
    vocab_sizes: tuple[int, ...] = (1000,) * 26
    embed_dim: int = 16
    bottom_mlp_dims: tuple[int, ...] = (64, 16)
    top_mlp_dims: tuple[int, ...] = (64, 1)
    learning_rate: float = 0.1
    seed: int = 0

    @property
    def num_interactions(self) -> int:
        """Upper-triangle pair count among the dense vector and the embeddings."""
        return (self.num_sparse + 1) * self.num_sparse // 2

    @property
    def top_input_dim(self) -> int:
        return self.embed_dim + self.num_interactions

    def validate(self) -> "DlrmConfig":
        if self.num_dense < 1 or self.num_sparse < 1:
            raise ConfigError("num_dense and num_sparse must be positive")
        if len(self.vocab_sizes) != self.num_sparse:
            raise ConfigError(
                f"vocab_sizes has {len(self.vocab_sizes)} entries, expected {self.num_sparse}"
            )
        if any(v < 1 for v in self.vocab_sizes):
            raise ConfigError("every vocab size must be positive")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if not self.bottom_mlp_dims or any(w < 1 for w in self.bottom_mlp_dims):
            raise ConfigError("bottom_mlp_dims must be non-empty positive widths")
        if self.bottom_mlp_dims[-1] != self.embed_dim:
            raise ConfigError(
                f"bottom MLP must end in embed_dim={self.embed_dim}, got {self.bottom_mlp_dims[-1]}"
            )
        if not self.top_mlp_dims or any(w < 1 for w in self.top_mlp_dims):
            raise ConfigError("top_mlp_dims must be non-empty positive widths")
        if self.top_mlp_dims[-1] != 1:
            raise ConfigError("top MLP must end in a single logit")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a positive finite number")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        return self


# ========================================
# Data containers
# ========================================

@dataclass(frozen=True, eq=False)
class Record:
    """One training sample."""

    dense: np.ndarray
    sparse: np.ndarray
    label: int

    def validate(self, config: DlrmConfig) -> None:
        if len(self.dense) != config.num_dense or len(self.sparse) != config.num_sparse:
            raise ShapeError("record width does not match config")
        for i, (index, vocab) in enumerate(zip(self.sparse, config.vocab_sizes)):
            if not 0 <= int(index) < vocab:
                raise IndexError(f"table {i}: index {int(index)} outside [0, {vocab})")
        if self.label not in (0, 1):
            raise ShapeError(f"label must be 0 or 1, got {self.label}")

    def __eq__(self, other):
        if not isinstance(other, Record):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.dense, other.dense)
            and np.array_equal(self.sparse, other.sparse)
        )


@dataclass(eq=False)
class Batch:
    """Columnar view of a list of records."""

    dense: np.ndarray
    sparse: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "Batch":
        if not records:
            raise ShapeError("empty batch")
        return cls(
            dense=np.stack([np.asarray(r.dense, dtype=np.float32) for r in records]),
            sparse=np.stack([np.asarray(r.sparse, dtype=np.int64) for r in records]),
            labels=np.array([r.label for r in records], dtype=np.uint8),
        )


BatchLike = Union[Batch, Sequence[Record]]


def as_batch(batch: BatchLike) -> Batch:
    if isinstance(batch, Batch):
        if len(batch) == 0:
            raise ShapeError("empty batch")
        return batch
    return Batch.from_records(list(batch))


# ========================================
# Parameters and gradients
# ========================================

@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(eq=False)
class ModelParams:
    embeddings: list[np.ndarray]
    bottom_mlp: list[Layer]
    top_mlp: list[Layer]
    version: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.bottom_mlp[0].weight.dtype

    @property
    def num_dense(self) -> int:
        return self.bottom_mlp[0].weight.shape[0]

    @property
    def num_sparse(self) -> int:
        return len(self.embeddings)

    @property
    def embed_dim(self) -> int:
        return self.bottom_mlp[-1].weight.shape[1]

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(table.shape[0] for table in self.embeddings)

    def arrays(self) -> Iterator[np.ndarray]:
        """All parameter arrays in canonical order: bottom, top, embeddings."""
        for layer in [*self.bottom_mlp, *self.top_mlp]:
            yield layer.weight
            yield layer.bias
        yield from self.embeddings

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            embeddings=[t.astype(dtype) for t in self.embeddings],
            bottom_mlp=[Layer(l.weight.astype(dtype), l.bias.astype(dtype)) for l in self.bottom_mlp],
            top_mlp=[Layer(l.weight.astype(dtype), l.bias.astype(dtype)) for l in self.top_mlp],
            version=self.version,
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        mine, theirs = list(self.arrays()), list(other.arrays())
        return (
            self.version == other.version
            and len(mine) == len(theirs)
            and all(a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(mine, theirs))
        )


@dataclass(frozen=True, eq=False)
class SparseRows:
    """Gradient rows of one embedding table; `rows` is sorted and unique."""

    table: int
    rows: np.ndarray
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, SparseRows):
            return NotImplemented
        return (
            self.table == other.table
            and np.array_equal(self.rows, other.rows)
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )


@dataclass(eq=False)
class GradientDelta:
    bottom_grads: list[Layer]
    top_grads: list[Layer]
    sparse_grads: list[SparseRows] = field(default_factory=list)
    batch_size: int = 1

    @property
    def dense_grads(self) -> list[Layer]:
        return [*self.bottom_grads, *self.top_grads]

    def entries(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for block in self.sparse_grads:
            for row, value in zip(block.rows, block.values):
                yield block.table, int(row), value

    def keys(self) -> set[tuple[int, int]]:
        return {(table, row) for table, row, _ in self.entries()}

    def __eq__(self, other):
        if not isinstance(other, GradientDelta):
            return NotImplemented
        if self.batch_size != other.batch_size or self.sparse_grads != other.sparse_grads:
            return False
        mine, theirs = self.dense_grads, other.dense_grads
        return len(mine) == len(theirs) and all(
            a.weight.dtype == b.weight.dtype
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(mine, theirs)
        )


@dataclass(eq=False)
class ForwardCache:
    version: int
    dtype: np.dtype
    bottom_inputs: list[np.ndarray]
    bottom_pre: list[np.ndarray]
    top_inputs: list[np.ndarray]
    top_pre: list[np.ndarray]
    features: np.ndarray
    sparse: np.ndarray
    probs: np.ndarray

    @property
    def batch_size(self) -> int:
        return len(self.probs)


# ========================================
# Operations
# ========================================

def init_params(config: DlrmConfig, dtype=np.float32) -> ModelParams:
    """Seeded initialisation: uniform MLP weights in ±sqrt(1/fan_in), zero biases,
    embedding rows uniform in ±1/sqrt(d)."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def mlp(fan_in: int, widths: Sequence[int]) -> list[Layer]:
        layers = []
        for width in widths:
            bound = math.sqrt(1.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_in, width)).astype(dtype)
            layers.append(Layer(weight, np.zeros(width, dtype=dtype)))
            fan_in = width
        return layers

    bottom = mlp(config.num_dense, config.bottom_mlp_dims)
    top = mlp(config.top_input_dim, config.top_mlp_dims)
    bound = 1.0 / math.sqrt(config.embed_dim)
    embeddings = [
        rng.uniform(-bound, bound, size=(vocab, config.embed_dim)).astype(dtype)
        for vocab in config.vocab_sizes
    ]
    return ModelParams(embeddings=embeddings, bottom_mlp=bottom, top_mlp=top, version=0)


def _check_batch(params: ModelParams, batch: Batch) -> None:
    size = len(batch)
    if batch.dense.shape != (size, params.num_dense):
        raise ShapeError(f"dense block {batch.dense.shape}, expected ({size}, {params.num_dense})")
    if batch.sparse.shape != (size, params.num_sparse):
        raise ShapeError(f"sparse block {batch.sparse.shape}, expected ({size}, {params.num_sparse})")
    vocab = np.asarray(params.vocab_sizes, dtype=np.int64)
    indices = batch.sparse.astype(np.int64, copy=False)
    bad = (indices < 0) | (indices >= vocab[None, :])
    if bad.any():
        sample, table = (int(v) for v in np.argwhere(bad)[0])
        raise IndexError(
            f"sample {sample}, table {table}: index {int(indices[sample, table])} "
            f"outside [0, {int(vocab[table])})"
        )


def _mlp_forward(layers: list[Layer], x: np.ndarray):
    inputs, pre_acts = [], []
    activation = x
    for position, layer in enumerate(layers):
        inputs.append(activation)
        pre = activation @ layer.weight + layer.bias
        pre_acts.append(pre)
        activation = pre if position == len(layers) - 1 else np.maximum(pre, 0)
    return activation, inputs, pre_acts


def _mlp_backward(layers: list[Layer], inputs, pre_acts, grad_out: np.ndarray):
    """`grad_out` is the gradient w.r.t. the last pre-activation."""
    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    grad = grad_out
    for position in reversed(range(len(layers))):
        grads[position] = Layer(inputs[position].T @ grad, grad.sum(axis=0))
        grad = grad @ layers[position].weight.T
        if position > 0:
            grad = grad * (pre_acts[position - 1] > 0)
    return grads, grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    probs = 0.5 * (1.0 + np.tanh(0.5 * x))
    # tanh saturates for moderate logits in 32-bit; outputs stay strictly inside (0, 1)
    zero, one = probs.dtype.type(0), probs.dtype.type(1)
    return np.clip(probs, np.nextafter(zero, one), np.nextafter(one, zero))


def forward(params: ModelParams, batch: BatchLike) -> tuple[np.ndarray, ForwardCache]:
    batch = as_batch(batch)
    _check_batch(params, batch)
    dtype = params.dtype

    dense_out, bottom_inputs, bottom_pre = _mlp_forward(
        params.bottom_mlp, batch.dense.astype(dtype, copy=False)
    )
    lookups = [table[batch.sparse[:, i]] for i, table in enumerate(params.embeddings)]
    features = np.stack([dense_out, *lookups], axis=1)
    rows, cols = np.triu_indices(features.shape[1], k=1)
    gram = features @ features.transpose(0, 2, 1)
    top_in = np.concatenate([dense_out, gram[:, rows, cols]], axis=1)

    logits, top_inputs, top_pre = _mlp_forward(params.top_mlp, top_in)
    probs = _sigmoid(logits[:, 0])
    cache = ForwardCache(
        version=params.version,
        dtype=dtype,
        bottom_inputs=bottom_inputs,
        bottom_pre=bottom_pre,
        top_inputs=top_inputs,
        top_pre=top_pre,
        features=features,
        sparse=batch.sparse,
        probs=probs,
    )
    return probs, cache


def predict(params: ModelParams, batch: BatchLike) -> np.ndarray:
    return forward(params, batch)[0]


def bce_loss(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} probabilities for {y.size} labels")
    if p.size == 0:
        raise ShapeError("empty batch")
    p = np.clip(p, BCE_EPSILON, 1.0 - BCE_EPSILON)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def count_correct(probs, labels) -> int:
    predicted = np.asarray(probs) >= 0.5
    return int(np.sum(predicted == (np.asarray(labels) == 1)))


def accuracy(probs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return count_correct(probs, labels) / labels.size


def backward(params: ModelParams, cache: ForwardCache, labels) -> GradientDelta:
    """Mean-reduced gradient of bce_loss(forward(params, batch)) w.r.t. every parameter."""
    if cache.version != params.version or cache.dtype != params.dtype:
        raise CacheError(
            f"cache from version {cache.version} used with params version {params.version}"
        )
    labels = np.asarray(labels)
    size = cache.batch_size
    if labels.shape != (size,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {size}")
    dtype = params.dtype

    grad_logit = (cache.probs - labels.astype(dtype)) / dtype.type(size)
    top_grads, grad_top_in = _mlp_backward(
        params.top_mlp, cache.top_inputs, cache.top_pre, grad_logit[:, None]
    )

    embed_dim = params.embed_dim
    num_features = cache.features.shape[1]
    rows, cols = np.triu_indices(num_features, k=1)
    grad_gram = np.zeros((size, num_features, num_features), dtype=dtype)
    grad_gram[:, rows, cols] = grad_top_in[:, embed_dim:]
    grad_features = (grad_gram + grad_gram.transpose(0, 2, 1)) @ cache.features

    grad_dense_out = grad_top_in[:, :embed_dim] + grad_features[:, 0]
    bottom_grads, _ = _mlp_backward(
        params.bottom_mlp, cache.bottom_inputs, cache.bottom_pre, grad_dense_out
    )

    sparse_grads = []
    for table in range(params.num_sparse):
        touched, inverse = np.unique(cache.sparse[:, table], return_inverse=True)
        values = np.zeros((len(touched), embed_dim), dtype=dtype)
        np.add.at(values, inverse.ravel(), grad_features[:, table + 1])
        sparse_grads.append(SparseRows(table, touched.astype(np.int64), values))

    return GradientDelta(
        bottom_grads=bottom_grads,
        top_grads=top_grads,
        sparse_grads=sparse_grads,
        batch_size=size,
    )


def check_delta_shapes(params: ModelParams, grad: GradientDelta) -> None:
    """Raise ShapeError unless `grad` can be applied to `params`."""
    if len(grad.bottom_grads) != len(params.bottom_mlp) or len(grad.top_grads) != len(params.top_mlp):
        raise ShapeError("gradient layer count does not match parameters")
    for layer, g in zip([*params.bottom_mlp, *params.top_mlp], grad.dense_grads):
        if g.weight.shape != layer.weight.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError(f"layer gradient {g.weight.shape} vs weight {layer.weight.shape}")
    for block in grad.sparse_grads:
        if not 0 <= block.table < params.num_sparse:
            raise ShapeError(f"gradient for unknown table {block.table}")
        if block.values.shape != (len(block.rows), params.embed_dim):
            raise ShapeError(f"table {block.table}: values shape {block.values.shape}")
        if len(block.rows) and (block.rows.min() < 0 or block.rows.max() >= params.vocab_sizes[block.table]):
            raise ShapeError(f"table {block.table}: row index out of range")


def sgd_apply(params: ModelParams, grad: GradientDelta, lr: float) -> ModelParams:
    if not (lr > 0 and math.isfinite(lr)):
        raise ConfigError(f"learning rate must be positive, got {lr}")
    check_delta_shapes(params, grad)
    dtype = params.dtype
    step = dtype.type(lr)

    def update(value: np.ndarray, g: np.ndarray) -> np.ndarray:
        return value - step * g.astype(dtype, copy=False)

    def update_layers(layers: list[Layer], grads: list[Layer]) -> list[Layer]:
        return [
            Layer(update(layer.weight, g.weight), update(layer.bias, g.bias))
            for layer, g in zip(layers, grads)
        ]

    embeddings = list(params.embeddings)
    for block in grad.sparse_grads:
        if len(block.rows) == 0:
            continue
        table = embeddings[block.table].copy()
        table[block.rows] -= step * block.values.astype(dtype, copy=False)
        embeddings[block.table] = table

    updated = ModelParams(
        embeddings=embeddings,
        bottom_mlp=update_layers(params.bottom_mlp, grad.bottom_grads),
        top_mlp=update_layers(params.top_mlp, grad.top_grads),
        version=params.version + 1,
    )
    if not updated.is_finite():
        raise NumericError(f"non-finite parameters after update to version {updated.version}")
    return updated
