"""
Message schema, canonical little-endian encoding, gradient aggregation and
the parameter-server round state machine.

Message layout:
    schema_version u8 | kind u8 | round u64 | sender role u8 | sender index u32 | body

Variable-length fields are u32 length-prefixed; arrays are raw little-endian
with their shapes written first.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from dlrm import GradientDelta, Layer, ModelParams, SparseRows, sgd_apply
from errors import AggregationError, DecodeError, EflError, EncodingError, ProtocolAbort

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DIGEST_SIZE = 32


class MessageKind(enum.IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    MODEL_BROADCAST = 3
    GRADIENT_PUSH = 4
    GRADIENT_ACK = 5
    SHARD_TRANSFER = 6
    CONFIG_TRANSFER = 7
    TRAIN_COMPLETE = 8
    ABORT = 9


class Role(enum.IntEnum):
    PARAMETER_SERVER = 0
    WORKER = 1
    CHIEF = 2


class AbortCode(enum.IntEnum):
    DUPLICATE_PUSH = 1
    ROUND_MISMATCH = 2
    UNKNOWN_NODE = 3
    DUPLICATE_REGISTRATION = 4
    REGISTRATION_CLOSED = 5
    UNEXPECTED_MESSAGE = 6
    AGGREGATION_FAILED = 7
    TIMEOUT = 8
    CHANNEL_FAILURE = 9
    DIGEST_MISMATCH = 10
    ATTESTATION_FAILED = 11
    TRANSFER_FAILED = 12
    DATA_LOCALITY = 13


class Phase(enum.IntEnum):
    REGISTERING = 0
    BROADCASTING = 1
    COLLECTING = 2
    AGGREGATING = 3
    COMPLETE = 4


@dataclass(frozen=True)
class NodeId:
    role: Role
    index: int = 0

    def __str__(self) -> str:
        return f"{self.role.name.lower()}[{self.index}]"


PS_NODE = NodeId(Role.PARAMETER_SERVER, 0)
CHIEF_NODE = NodeId(Role.CHIEF, 0)


# ========================================
# Message bodies
# ========================================

@dataclass(frozen=True)
class Register:
    num_samples: int = 0


@dataclass(frozen=True)
class RegisterAck:
    worker_index: int
    num_workers: int


@dataclass(frozen=True)
class ModelBroadcast:
    params: ModelParams


@dataclass(frozen=True)
class GradientPush:
    delta: GradientDelta
    loss: float
    eval_correct: int = 0
    eval_total: int = 0


@dataclass(frozen=True)
class GradientAck:
    pass


@dataclass(frozen=True)
class ShardTransfer:
    worker_index: int
    data: bytes


@dataclass(frozen=True)
class ConfigTransfer:
    text: str


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss: float
    accuracy: float
    duration_ms: float = 0.0


@dataclass(frozen=True)
class TrainComplete:
    rows: tuple[RoundMetrics, ...]
    params_digest: bytes
    params: Optional[ModelParams] = None


@dataclass(frozen=True)
class Abort:
    code: int
    detail: str = ""


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: NodeId
    body: object
    round: int = 0
    schema_version: int = SCHEMA_VERSION


@dataclass(frozen=True)
class Envelope:
    to: NodeId
    message: Message


# ========================================
# Primitive codec
# ========================================

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


class _Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        try:
            self._parts.append(struct.pack("<" + fmt, *values))
        except struct.error as e:
            raise EncodingError(f"value out of range for {fmt}: {values}") from e

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def blob(self, data: bytes) -> None:
        self.pack("I", len(data))
        self.raw(data)

    def array(self, value: np.ndarray, dtype: np.dtype) -> None:
        self.raw(np.ascontiguousarray(value, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self.offset = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.offset + n > len(self._data):
            raise DecodeError(f"truncated: need {n} bytes", self.offset)
        view = self._data[self.offset:self.offset + n]
        self.offset += n
        return view

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self.take(size))
        return values if len(values) > 1 else values[0]

    def blob(self) -> bytes:
        return bytes(self.take(self.unpack("I")))

    def text(self) -> str:
        at = self.offset
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("invalid UTF-8 text", at) from None

    def array(self, shape: tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        count = math.prod(shape)
        data = self.take(count * dtype.itemsize)
        return np.frombuffer(data, dtype=dtype, count=count).reshape(shape).astype(dtype.newbyteorder("="))

    def dtype(self) -> np.dtype:
        at = self.offset
        code = self.unpack("B")
        if code not in _CODE_DTYPES:
            raise DecodeError(f"unknown dtype code {code}", at)
        return _CODE_DTYPES[code]

    def done(self) -> None:
        if self.offset != len(self._data):
            raise DecodeError(f"{len(self._data) - self.offset} trailing bytes", self.offset)


def _dtype_code(dtype: np.dtype) -> int:
    code = _DTYPE_CODES.get(np.dtype(dtype).newbyteorder("<"))
    if code is None:
        raise EncodingError(f"unsupported dtype {dtype}")
    return code


def _write_layers(w: _Writer, layers: Sequence[Layer], dtype: np.dtype) -> None:
    w.pack("H", len(layers))
    for layer in layers:
        fan_in, fan_out = layer.weight.shape
        if layer.bias.shape != (fan_out,):
            raise EncodingError("bias does not match weight")
        w.pack("II", fan_in, fan_out)
        w.array(layer.weight, dtype)
        w.array(layer.bias, dtype)


def _read_layers(r: _Reader, dtype: np.dtype) -> list[Layer]:
    at = r.offset
    count = r.unpack("H")
    if count == 0:
        raise DecodeError("empty layer list", at)
    layers = []
    for _ in range(count):
        at = r.offset
        fan_in, fan_out = r.unpack("II")
        if fan_in == 0 or fan_out == 0:
            raise DecodeError("zero layer width", at)
        if layers and layers[-1].weight.shape[1] != fan_in:
            raise DecodeError("layer widths do not chain", at)
        weight = r.array((fan_in, fan_out), dtype)
        bias = r.array((fan_out,), dtype)
        layers.append(Layer(weight, bias))
    return layers


# ========================================
# Parameters and gradients
# ========================================

def encode_params(params: ModelParams, w: Optional[_Writer] = None) -> bytes:
    own = w is None
    w = w or _Writer()
    dtype = np.dtype(params.dtype).newbyteorder("<")
    w.pack("BQ", _dtype_code(dtype), params.version)
    _write_layers(w, params.bottom_mlp, dtype)
    _write_layers(w, params.top_mlp, dtype)
    w.pack("H", len(params.embeddings))
    for table in params.embeddings:
        w.pack("II", *table.shape)
        w.array(table, dtype)
    return w.getvalue() if own else b""


def _read_params(r: _Reader) -> ModelParams:
    dtype = r.dtype()
    version = r.unpack("Q")
    bottom = _read_layers(r, dtype)
    top = _read_layers(r, dtype)
    at = r.offset
    num_tables = r.unpack("H")
    if num_tables == 0:
        raise DecodeError("no embedding tables", at)
    embed_dim = bottom[-1].weight.shape[1]
    tables = []
    for _ in range(num_tables):
        at = r.offset
        rows, dim = r.unpack("II")
        if rows == 0 or dim != embed_dim:
            raise DecodeError(f"embedding table shape ({rows}, {dim})", at)
        tables.append(r.array((rows, dim), dtype))
    if top[0].weight.shape[0] != embed_dim + (num_tables + 1) * num_tables // 2:
        raise DecodeError("top MLP input does not match interaction width", at)
    if top[-1].weight.shape[1] != 1:
        raise DecodeError("top MLP must end in one logit", at)
    return ModelParams(embeddings=tables, bottom_mlp=bottom, top_mlp=top, version=version)


def decode_params(data: bytes) -> ModelParams:
    r = _Reader(data)
    params = _read_params(r)
    r.done()
    return params


def params_digest(params: ModelParams) -> bytes:
    return hashlib.sha256(encode_params(params)).digest()


def _write_delta(w: _Writer, delta: GradientDelta) -> None:
    dtype = np.dtype(delta.bottom_grads[0].weight.dtype).newbyteorder("<")
    w.pack("BQ", _dtype_code(dtype), delta.batch_size)
    _write_layers(w, delta.bottom_grads, dtype)
    _write_layers(w, delta.top_grads, dtype)
    w.pack("H", len(delta.sparse_grads))
    for block in delta.sparse_grads:
        w.pack("HII", block.table, len(block.rows), block.values.shape[1] if block.values.ndim == 2 else 0)
        w.array(block.rows, np.dtype("<u4"))
        w.array(block.values, dtype)


def _read_delta(r: _Reader) -> GradientDelta:
    dtype = r.dtype()
    at = r.offset
    batch_size = r.unpack("Q")
    if batch_size < 1:
        raise DecodeError("batch_size must be at least 1", at)
    bottom = _read_layers(r, dtype)
    top = _read_layers(r, dtype)
    blocks = []
    for _ in range(r.unpack("H")):
        at = r.offset
        table, count, dim = r.unpack("HII")
        if blocks and table <= blocks[-1].table:
            raise DecodeError("sparse tables out of order", at)
        rows = r.array((count,), np.dtype("<u4")).astype(np.int64)
        if count > 1 and not (np.diff(rows) > 0).all():
            raise DecodeError("sparse rows not strictly increasing", at)
        values = r.array((count, dim), dtype)
        blocks.append(SparseRows(table, rows, values))
    return GradientDelta(bottom_grads=bottom, top_grads=top, sparse_grads=blocks, batch_size=batch_size)


def encode_delta(delta: GradientDelta) -> bytes:
    w = _Writer()
    _write_delta(w, delta)
    return w.getvalue()


def decode_delta(data: bytes) -> GradientDelta:
    r = _Reader(data)
    delta = _read_delta(r)
    r.done()
    return delta


# ========================================
# Message bodies (kind -> codec)
# ========================================

def _enc_register(w: _Writer, body: Register) -> None:
    w.pack("Q", body.num_samples)


def _enc_register_ack(w: _Writer, body: RegisterAck) -> None:
    w.pack("II", body.worker_index, body.num_workers)


def _enc_broadcast(w: _Writer, body: ModelBroadcast) -> None:
    encode_params(body.params, w)


def _enc_push(w: _Writer, body: GradientPush) -> None:
    w.pack("dQQ", body.loss, body.eval_correct, body.eval_total)
    _write_delta(w, body.delta)


def _enc_ack(w: _Writer, body: GradientAck) -> None:
    pass


def _enc_shard(w: _Writer, body: ShardTransfer) -> None:
    w.pack("I", body.worker_index)
    w.blob(body.data)


def _enc_config(w: _Writer, body: ConfigTransfer) -> None:
    w.blob(body.text.encode("utf-8"))


def _enc_complete(w: _Writer, body: TrainComplete) -> None:
    if len(body.params_digest) != DIGEST_SIZE:
        raise EncodingError("params digest must be 32 bytes")
    w.pack("I", len(body.rows))
    for row in body.rows:
        w.pack("Qddd", row.round, row.loss, row.accuracy, row.duration_ms)
    w.raw(body.params_digest)
    w.pack("B", body.params is not None)
    if body.params is not None:
        encode_params(body.params, w)


def _enc_abort(w: _Writer, body: Abort) -> None:
    w.pack("H", int(body.code))
    w.blob(body.detail.encode("utf-8"))


def _dec_register(r: _Reader) -> Register:
    return Register(num_samples=r.unpack("Q"))


def _dec_register_ack(r: _Reader) -> RegisterAck:
    index, count = r.unpack("II")
    return RegisterAck(worker_index=index, num_workers=count)


def _dec_broadcast(r: _Reader) -> ModelBroadcast:
    return ModelBroadcast(params=_read_params(r))


def _dec_push(r: _Reader) -> GradientPush:
    loss, correct, total = r.unpack("dQQ")
    return GradientPush(delta=_read_delta(r), loss=loss, eval_correct=correct, eval_total=total)


def _dec_ack(r: _Reader) -> GradientAck:
    return GradientAck()


def _dec_shard(r: _Reader) -> ShardTransfer:
    index = r.unpack("I")
    return ShardTransfer(worker_index=index, data=r.blob())


def _dec_config(r: _Reader) -> ConfigTransfer:
    return ConfigTransfer(text=r.text())


def _dec_complete(r: _Reader) -> TrainComplete:
    rows = tuple(RoundMetrics(*r.unpack("Qddd")) for _ in range(r.unpack("I")))
    digest = bytes(r.take(DIGEST_SIZE))
    at = r.offset
    flag = r.unpack("B")
    if flag not in (0, 1):
        raise DecodeError(f"bad params flag {flag}", at)
    params = _read_params(r) if flag else None
    return TrainComplete(rows=rows, params_digest=digest, params=params)


def _dec_abort(r: _Reader) -> Abort:
    code = r.unpack("H")
    return Abort(code=code, detail=r.text())


BODY_CODECS: Mapping[MessageKind, tuple[type, Callable, Callable]] = {
    MessageKind.REGISTER: (Register, _enc_register, _dec_register),
    MessageKind.REGISTER_ACK: (RegisterAck, _enc_register_ack, _dec_register_ack),
    MessageKind.MODEL_BROADCAST: (ModelBroadcast, _enc_broadcast, _dec_broadcast),
    MessageKind.GRADIENT_PUSH: (GradientPush, _enc_push, _dec_push),
    MessageKind.GRADIENT_ACK: (GradientAck, _enc_ack, _dec_ack),
    MessageKind.SHARD_TRANSFER: (ShardTransfer, _enc_shard, _dec_shard),
    MessageKind.CONFIG_TRANSFER: (ConfigTransfer, _enc_config, _dec_config),
    MessageKind.TRAIN_COMPLETE: (TrainComplete, _enc_complete, _dec_complete),
    MessageKind.ABORT: (Abort, _enc_abort, _dec_abort),
}


def encode(msg: Message) -> bytes:
    if msg.schema_version != SCHEMA_VERSION:
        raise EncodingError(f"schema version {msg.schema_version} not supported")
    body_type, encoder, _ = BODY_CODECS[MessageKind(msg.kind)]
    if not isinstance(msg.body, body_type):
        raise EncodingError(f"{MessageKind(msg.kind).name} needs a {body_type.__name__} body")
    w = _Writer()
    w.pack("BBQBI", msg.schema_version, int(msg.kind), msg.round, int(msg.sender.role), msg.sender.index)
    encoder(w, msg.body)
    return w.getvalue()


def decode(data: bytes) -> Message:
    r = _Reader(data)
    if len(data) == 0:
        raise DecodeError("empty message", 0)
    version = r.unpack("B")
    if version != SCHEMA_VERSION:
        raise DecodeError(f"schema version {version} not supported", 0)
    kind_value = r.unpack("B")
    try:
        kind = MessageKind(kind_value)
    except ValueError:
        raise DecodeError(f"unknown message kind {kind_value}", 1) from None
    round_ = r.unpack("Q")
    at = r.offset
    role_value, index = r.unpack("BI")
    try:
        role = Role(role_value)
    except ValueError:
        raise DecodeError(f"unknown role {role_value}", at) from None
    _, _, decoder = BODY_CODECS[kind]
    body = decoder(r)
    r.done()
    return Message(kind=kind, sender=NodeId(role, index), body=body, round=round_)


# ========================================
# Aggregation
# ========================================

def aggregate(deltas: Sequence[GradientDelta]) -> GradientDelta:
    """Batch-size weighted mean, accumulated in 64-bit in the given order."""
    if not deltas:
        raise AggregationError("no gradients to aggregate")
    first = deltas[0]
    if any(d.batch_size < 1 for d in deltas):
        raise AggregationError("batch_size must be at least 1")
    total = sum(d.batch_size for d in deltas)
    dtype = first.bottom_grads[0].weight.dtype

    def combine(select: Callable[[GradientDelta], list[Layer]]) -> list[Layer]:
        reference = select(first)
        for d in deltas:
            layers = select(d)
            if len(layers) != len(reference) or any(
                a.weight.shape != b.weight.shape or a.bias.shape != b.bias.shape
                for a, b in zip(layers, reference)
            ):
                raise AggregationError("dense gradient shapes differ between workers")
        combined = []
        for position, layer in enumerate(reference):
            weight = np.zeros(layer.weight.shape, dtype=np.float64)
            bias = np.zeros(layer.bias.shape, dtype=np.float64)
            for d in deltas:
                g = select(d)[position]
                weight += d.batch_size * g.weight.astype(np.float64)
                bias += d.batch_size * g.bias.astype(np.float64)
            combined.append(Layer((weight / total).astype(dtype), (bias / total).astype(dtype)))
        return combined

    bottom = combine(lambda d: d.bottom_grads)
    top = combine(lambda d: d.top_grads)

    by_table: dict[int, list[tuple[int, SparseRows]]] = {}
    for d in deltas:
        for block in d.sparse_grads:
            by_table.setdefault(block.table, []).append((d.batch_size, block))
    embed_dim = bottom[-1].weight.shape[1]
    sparse = []
    for table in sorted(by_table):
        parts = by_table[table]
        if any(block.values.shape != (len(block.rows), embed_dim) for _, block in parts):
            raise AggregationError(f"table {table}: sparse gradient shape mismatch")
        rows = np.concatenate([block.rows for _, block in parts]).astype(np.int64)
        values = np.concatenate([weight * block.values.astype(np.float64) for weight, block in parts])
        touched, inverse = np.unique(rows, return_inverse=True)
        summed = np.zeros((len(touched), embed_dim), dtype=np.float64)
        np.add.at(summed, inverse.ravel(), values)
        sparse.append(SparseRows(table, touched, (summed / total).astype(dtype)))

    result = GradientDelta(bottom_grads=bottom, top_grads=top, sparse_grads=sparse, batch_size=total)
    if not all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in result.dense_grads) or not all(
        np.isfinite(block.values).all() for block in sparse
    ):
        raise AggregationError("non-finite aggregated gradient")
    return result


# ========================================
# Parameter-server state machine
# ========================================

@dataclass(frozen=True)
class PushReport:
    batch_size: int
    loss: float
    eval_correct: int
    eval_total: int


@dataclass(frozen=True)
class RoundState:
    round: int
    expected_workers: int
    total_rounds: int
    learning_rate: float
    params: ModelParams
    phase: Phase = Phase.REGISTERING
    registered: frozenset[int] = frozenset()
    received: Mapping[int, GradientDelta] = field(default_factory=dict)
    reports: Mapping[int, PushReport] = field(default_factory=dict)
    history: tuple[RoundMetrics, ...] = ()

    @classmethod
    def initial(cls, params: ModelParams, num_workers: int, total_rounds: int, learning_rate: float) -> "RoundState":
        return cls(
            round=0,
            expected_workers=num_workers,
            total_rounds=total_rounds,
            learning_rate=learning_rate,
            params=params,
        )


def _message(kind: MessageKind, body, round_: int = 0, sender: NodeId = PS_NODE) -> Message:
    return Message(kind=kind, sender=sender, body=body, round=round_)


def register(state: RoundState, msg: Message) -> tuple[RoundState, list[Envelope]]:
    """Admit one worker; training starts once all expected workers are in."""
    sender = msg.sender
    if msg.kind != MessageKind.REGISTER:
        raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"{msg.kind.name} during registration")
    if state.phase != Phase.REGISTERING:
        raise ProtocolAbort(AbortCode.REGISTRATION_CLOSED, f"{sender} registered after training started")
    if sender.role != Role.WORKER or not 0 <= sender.index < state.expected_workers:
        raise ProtocolAbort(AbortCode.UNKNOWN_NODE, f"{sender} is not an expected worker")
    if sender.index in state.registered:
        raise ProtocolAbort(AbortCode.DUPLICATE_REGISTRATION, f"{sender} already registered")

    registered = state.registered | {sender.index}
    phase = Phase.BROADCASTING if len(registered) == state.expected_workers else Phase.REGISTERING
    ack = Envelope(sender, _message(MessageKind.REGISTER_ACK, RegisterAck(sender.index, state.expected_workers)))
    logger.info("registered %s (%d/%d)", sender, len(registered), state.expected_workers)
    return replace(state, registered=frozenset(registered), phase=phase), [ack]


def _broadcast(state: RoundState) -> tuple[RoundState, list[Envelope]]:
    message = _message(MessageKind.MODEL_BROADCAST, ModelBroadcast(state.params), state.round)
    outbound = [Envelope(NodeId(Role.WORKER, i), message) for i in sorted(state.registered)]
    return replace(state, phase=Phase.COLLECTING), outbound


def _finish_round(state: RoundState) -> RoundState:
    order = sorted(state.received)
    try:
        combined = aggregate([state.received[i] for i in order])
        params = sgd_apply(state.params, combined, state.learning_rate)
    except EflError as e:
        raise ProtocolAbort(AbortCode.AGGREGATION_FAILED, str(e)) from e

    reports = [state.reports[i] for i in order]
    samples = sum(rep.batch_size for rep in reports)
    loss = math.fsum(rep.batch_size * rep.loss for rep in reports) / samples
    evaluated = sum(rep.eval_total for rep in reports)
    accuracy = sum(rep.eval_correct for rep in reports) / evaluated if evaluated else float("nan")

    next_round = state.round + 1
    logger.info("round %d aggregated: loss=%.6f accuracy=%.4f", state.round, loss, accuracy)
    return replace(
        state,
        round=next_round,
        params=params,
        phase=Phase.COMPLETE if next_round >= state.total_rounds else Phase.BROADCASTING,
        received={},
        reports={},
        history=state.history + (RoundMetrics(state.round, loss, accuracy),),
    )


def ps_step(state: RoundState, event: Optional[Message]) -> tuple[RoundState, list[Envelope]]:
    """Advance the round state machine by one event (None = broadcast tick).

    Raises ProtocolAbort on any violation; the caller turns it into Abort messages.
    """
    if event is not None and event.kind == MessageKind.REGISTER:
        return register(state, event)

    outbound: list[Envelope] = []
    if state.phase == Phase.BROADCASTING:
        state, outbound = _broadcast(state)
    if event is None:
        return state, outbound

    if state.phase != Phase.COLLECTING:
        raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"{event.kind.name} in phase {state.phase.name}")
    sender = event.sender
    if sender.role != Role.WORKER or sender.index not in state.registered:
        raise ProtocolAbort(AbortCode.UNKNOWN_NODE, f"message from unregistered {sender}")
    if event.kind != MessageKind.GRADIENT_PUSH:
        raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"{event.kind.name} from {sender}")
    if event.round != state.round:
        raise ProtocolAbort(
            AbortCode.ROUND_MISMATCH, f"{sender} pushed round {event.round} during round {state.round}"
        )
    if sender.index in state.received:
        raise ProtocolAbort(AbortCode.DUPLICATE_PUSH, f"{sender} pushed twice in round {state.round}")

    push: GradientPush = event.body
    received = {**state.received, sender.index: push.delta}
    reports = {
        **state.reports,
        sender.index: PushReport(push.delta.batch_size, push.loss, push.eval_correct, push.eval_total),
    }
    state = replace(state, received=received, reports=reports)
    outbound.append(Envelope(sender, _message(MessageKind.GRADIENT_ACK, GradientAck(), event.round)))

    if len(received) < state.expected_workers:
        return state, outbound

    state = _finish_round(replace(state, phase=Phase.AGGREGATING))
    if state.phase == Phase.BROADCASTING:
        state, broadcasts = _broadcast(state)
        outbound.extend(broadcasts)
    return state, outbound


def abort_message(code: int, detail: str, sender: NodeId = PS_NODE, round_: int = 0) -> Message:
    return _message(MessageKind.ABORT, Abort(int(code), detail[:1024]), round_, sender)
