"""
Synthetic Criteo-shaped click data: generation from a hidden teacher model,
a fixed little-endian binary file format, and contiguous worker sharding.

File layout:
    header  magic "DLRMDS01" | version u16 | num_samples u64 | num_dense u16 |
            num_sparse u16 | num_sparse x vocab u32 | spec digest (32 bytes)
    record  label u8 | num_dense x f32 | num_sparse x u32   (157 bytes at 13/26)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dlrm import Batch, Record
from errors import ConfigError, FormatError, ShardError

MAGIC = b"DLRMDS01"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

_FIXED_HEADER = struct.Struct("<8sHQHH")


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int
    seed: int = 0
    vocab_sizes: tuple[int, ...] = (1000,) * 26
    num_dense: int = 13
    num_sparse: int = 26
    teacher_noise: float = 0.0
    dense_scale: float = 24.0
    sparse_scale: float = 0.1

    def validate(self) -> "SyntheticSpec":
        if self.num_samples < 1:
            raise ConfigError("num_samples must be at least 1")
        if len(self.vocab_sizes) != self.num_sparse:
            raise ConfigError(f"{len(self.vocab_sizes)} vocab sizes for {self.num_sparse} tables")
        if any(v < 1 for v in self.vocab_sizes):
            raise ConfigError("zero vocab size")
        if not 0.0 <= self.teacher_noise < 1.0:
            raise ConfigError("teacher_noise must lie in [0, 1)")
        if self.dense_scale < 0 or self.sparse_scale < 0:
            raise ConfigError("teacher scales must be non-negative")
        return self

    def digest(self) -> bytes:
        canonical = struct.pack(
            f"<QQHH{self.num_sparse}Iddd",
            self.num_samples,
            self.seed,
            self.num_dense,
            self.num_sparse,
            *self.vocab_sizes,
            self.teacher_noise,
            self.dense_scale,
            self.sparse_scale,
        )
        return hashlib.sha256(canonical).digest()


def record_dtype(num_dense: int, num_sparse: int) -> np.dtype:
    return np.dtype([
        ("label", "u1"),
        ("dense", "<f4", (num_dense,)),
        ("sparse", "<u4", (num_sparse,)),
    ])


@dataclass(eq=False)
class Dataset:
    """Columnar dataset; row order is the record order."""

    dense: np.ndarray
    sparse: np.ndarray
    labels: np.ndarray
    vocab_sizes: tuple[int, ...]
    spec_digest: bytes

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> Record:
        return Record(dense=self.dense[index], sparse=self.sparse[index], label=int(self.labels[index]))

    @property
    def records(self) -> list[Record]:
        return [self[i] for i in range(len(self))]

    @property
    def num_dense(self) -> int:
        return self.dense.shape[1]

    @property
    def num_sparse(self) -> int:
        return self.sparse.shape[1]

    def slice(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            dense=self.dense[start:stop],
            sparse=self.sparse[start:stop],
            labels=self.labels[start:stop],
            vocab_sizes=self.vocab_sizes,
            spec_digest=self.spec_digest,
        )

    def batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch(self.dense, self.sparse, self.labels)
        return Batch(self.dense[indices], self.sparse[indices], self.labels[indices])

    def digest(self) -> bytes:
        return hashlib.sha256(dumps(self)).digest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.vocab_sizes == other.vocab_sizes
            and self.spec_digest == other.spec_digest
            and np.array_equal(self.dense, other.dense)
            and np.array_equal(self.sparse, other.sparse)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class Shard:
    worker_index: int
    data: Dataset
    parent_digest: bytes

    @property
    def records(self) -> list[Record]:
        return self.data.records

    def __len__(self) -> int:
        return len(self.data)


# ========================================
# Generation
# ========================================

def _teacher(spec: SyntheticSpec, rng: np.random.Generator):
    weights = rng.normal(0.0, spec.dense_scale, size=spec.num_dense)
    biases = [rng.normal(0.0, spec.sparse_scale, size=vocab) for vocab in spec.vocab_sizes]
    centre = -0.5 * weights.sum() - sum(float(b.mean()) for b in biases)
    return weights, biases, centre


def _probabilities(teacher, dense: np.ndarray, sparse: np.ndarray) -> np.ndarray:
    weights, biases, centre = teacher
    logit = dense.astype(np.float64) @ weights + centre
    for table, bias in enumerate(biases):
        logit += bias[sparse[:, table]]
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-logit))


def teacher_probabilities(spec: SyntheticSpec, data: Dataset) -> np.ndarray:
    """The hidden teacher's click probability for every record of `data`."""
    return _probabilities(_teacher(spec, np.random.default_rng(spec.seed)), data.dense, data.sparse)


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a dataset whose labels come from a hidden logistic teacher.

    label = 1 iff sigmoid(w . dense + sum_i b_i[sparse_i] + c) > u with
    u ~ uniform[0, 1), where c centres the teacher logit. With probability
    `teacher_noise` a label is then replaced by a fair coin.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    teacher = _teacher(spec, rng)

    n = spec.num_samples
    dense = rng.random((n, spec.num_dense), dtype=np.float32)
    sparse = np.stack(
        [rng.integers(0, vocab, size=n, dtype=np.uint32) for vocab in spec.vocab_sizes], axis=1
    )
    u = rng.random(n)
    replaced = rng.random(n) < spec.teacher_noise
    coins = rng.random(n) < 0.5

    labels = _probabilities(teacher, dense, sparse) > u
    labels = np.where(replaced, coins, labels).astype(np.uint8)

    return Dataset(
        dense=dense,
        sparse=sparse,
        labels=labels,
        vocab_sizes=tuple(int(v) for v in spec.vocab_sizes),
        spec_digest=spec.digest(),
    )


# ========================================
# Sharding
# ========================================

def shard_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) ranges; the first n % k shards hold one extra row."""
    if k < 1:
        raise ShardError("need at least one shard")
    if k > n:
        raise ShardError(f"cannot split {n} samples into {k} shards")
    base, extra = divmod(n, k)
    bounds = []
    start = 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def shard(dataset: Dataset, k: int) -> list[Shard]:
    parent = dataset.digest()
    return [
        Shard(worker_index=i, data=dataset.slice(start, stop), parent_digest=parent)
        for i, (start, stop) in enumerate(shard_bounds(len(dataset), k))
    ]


# ========================================
# Binary format
# ========================================

def header_size(num_sparse: int) -> int:
    return _FIXED_HEADER.size + 4 * num_sparse + DIGEST_SIZE


def dumps(dataset: Dataset) -> bytes:
    n = len(dataset)
    header = _FIXED_HEADER.pack(MAGIC, FORMAT_VERSION, n, dataset.num_dense, dataset.num_sparse)
    header += struct.pack(f"<{dataset.num_sparse}I", *dataset.vocab_sizes)
    header += dataset.spec_digest
    body = np.empty(n, dtype=record_dtype(dataset.num_dense, dataset.num_sparse))
    body["label"] = dataset.labels
    body["dense"] = dataset.dense
    body["sparse"] = dataset.sparse
    return header + body.tobytes()


def loads(data: bytes) -> Dataset:
    if len(data) < _FIXED_HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, n, num_dense, num_sparse = _FIXED_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad magic", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if num_dense < 1 or num_sparse < 1:
        raise FormatError("empty feature layout", 18)
    full_header = header_size(num_sparse)
    if len(data) < full_header:
        raise FormatError("truncated header", len(data))
    vocab_sizes = struct.unpack_from(f"<{num_sparse}I", data, _FIXED_HEADER.size)
    if any(v == 0 for v in vocab_sizes):
        raise FormatError("zero vocab size", _FIXED_HEADER.size + 4 * vocab_sizes.index(0))
    digest_at = _FIXED_HEADER.size + 4 * num_sparse
    spec_digest = bytes(data[digest_at:digest_at + DIGEST_SIZE])

    rtype = record_dtype(num_dense, num_sparse)
    expected = full_header + n * rtype.itemsize
    if len(data) < expected:
        complete = (len(data) - full_header) // rtype.itemsize
        raise FormatError(f"truncated after {complete} of {n} records", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after last record", expected)

    body = np.frombuffer(data, dtype=rtype, count=n, offset=full_header)
    labels = body["label"].copy()
    dense = body["dense"].astype(np.float32)
    sparse = body["sparse"].astype(np.uint32)

    def record_offset(row: int) -> int:
        return full_header + row * rtype.itemsize

    bad = np.flatnonzero(labels > 1)
    if bad.size:
        raise FormatError(f"record {bad[0]}: label {labels[bad[0]]}", record_offset(bad[0]))
    bad = np.flatnonzero(~np.isfinite(dense).all(axis=1))
    if bad.size:
        raise FormatError(f"record {bad[0]}: non-finite dense feature", record_offset(bad[0]) + 1)
    bad = np.flatnonzero((sparse >= np.asarray(vocab_sizes, dtype=np.uint32)[None, :]).any(axis=1))
    if bad.size:
        raise FormatError(
            f"record {bad[0]}: categorical index out of range",
            record_offset(bad[0]) + 1 + 4 * num_dense,
        )

    return Dataset(
        dense=dense,
        sparse=sparse,
        labels=labels,
        vocab_sizes=tuple(int(v) for v in vocab_sizes),
        spec_digest=spec_digest,
    )


def write_file(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(dataset))
    return path


def read_file(path) -> Dataset:
    return loads(Path(path).read_bytes())


def shard_path(path, worker_index: int) -> Path:
    """`data.bin` -> `data.shard0.bin`."""
    path = Path(path)
    return path.with_name(f"{path.stem}.shard{worker_index}{path.suffix}")
