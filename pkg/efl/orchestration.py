"""
Node lifecycles for both topologies.

HFL: each worker trains on a shard it already holds; only gradients and models
cross the network. SDT: a chief holding the dataset ships the training
configuration and one shard to each node over attested channels, then the
same parameter-server rounds run as in HFL.

Every run either completes the configured rounds or returns a report carrying
the abort code; other nodes are told with an Abort message.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from attest import Authority
from channel import ChannelMode, SecureChannel, handshake
from datagen import Dataset, SyntheticSpec, dumps, generate, loads, read_file, shard
from dlrm import ModelParams, backward, bce_loss, count_correct, forward, init_params, predict
from errors import (
    AttestationError,
    ChannelError,
    ChannelTimeout,
    ConfigError,
    DecodeError,
    EflError,
    FormatError,
    ProtocolAbort,
)
from protocol import (
    CHIEF_NODE,
    PS_NODE,
    AbortCode,
    ConfigTransfer,
    Envelope,
    GradientPush,
    Message,
    MessageKind,
    NodeId,
    Phase,
    Register,
    Role,
    RoundMetrics,
    RoundState,
    ShardTransfer,
    TrainComplete,
    abort_message,
    decode,
    encode,
    encode_params,
    params_digest,
    ps_step,
    register,
)
from run_config import Mode, RunConfig
from transport import LocalNetwork, StreamTap, TcpNetwork

logger = logging.getLogger(__name__)

EVAL_FRACTION = 10  # last n // EVAL_FRACTION rows of each shard are held out

Network = Union[LocalNetwork, TcpNetwork]


@dataclass(frozen=True)
class TrainReport:
    node: str
    rows: tuple[RoundMetrics, ...] = ()
    params_digest: bytes = b""
    abort_code: Optional[int] = None
    abort_detail: str = ""
    handshake_ms: float = 0.0
    bytes_sent: int = 0
    params: Optional[ModelParams] = field(default=None, compare=False, repr=False)
    peers: Mapping[str, "TrainReport"] = field(default_factory=dict, compare=False, repr=False)

    @property
    def aborted(self) -> bool:
        return self.abort_code is not None

    @property
    def total_round_ms(self) -> float:
        return sum(row.duration_ms for row in self.rows)

    @property
    def mean_round_ms(self) -> float:
        return self.total_round_ms / len(self.rows) if self.rows else 0.0


# ========================================
# Local training step
# ========================================

def minibatch_indices(order: np.ndarray, round_: int, batch_size: int) -> np.ndarray:
    """Cyclic walk over a fixed permutation: round r takes the next `batch_size` rows."""
    n = len(order)
    return order[(round_ * batch_size + np.arange(batch_size)) % n]


def split_holdout(data: Dataset) -> tuple[Dataset, Dataset]:
    n = len(data)
    train_n = n - n // EVAL_FRACTION
    return data.slice(0, train_n), data.slice(train_n, n)


class LocalTrainer:
    """One worker's shard, minibatch schedule and held-out split."""

    def __init__(self, data: Dataset, worker_index: int, config: RunConfig):
        dlrm = config.dlrm
        if data.num_dense != dlrm.num_dense or data.num_sparse != dlrm.num_sparse:
            raise ConfigError(
                f"shard has {data.num_dense} dense / {data.num_sparse} sparse features, "
                f"model expects {dlrm.num_dense} / {dlrm.num_sparse}"
            )
        if len(data) and (data.sparse.max(axis=0) >= np.asarray(dlrm.vocab_sizes)).any():
            raise ConfigError("shard holds categorical indices beyond the model's vocabularies")
        self.train, self.held_out = split_holdout(data)
        if len(self.train) == 0:
            raise ConfigError(f"worker {worker_index} has no training rows")
        self.order = np.random.default_rng((dlrm.seed, worker_index)).permutation(len(self.train))
        self.batch_size = min(config.local_batch_size, len(self.train))

    def __len__(self) -> int:
        return len(self.train)

    def step(self, params: ModelParams, round_: int) -> GradientPush:
        batch = self.train.batch(minibatch_indices(self.order, round_, self.batch_size))
        probs, cache = forward(params, batch)
        loss = bce_loss(probs, batch.labels)
        delta = backward(params, cache, batch.labels)
        correct = 0
        if len(self.held_out):
            correct = count_correct(predict(params, self.held_out.batch()), self.held_out.labels)
        return GradientPush(delta=delta, loss=loss, eval_correct=correct, eval_total=len(self.held_out))


# ========================================
# Messaging helpers
# ========================================

def _send(channel: SecureChannel, msg: Message, payload: Optional[bytes] = None) -> None:
    try:
        channel.send(payload if payload is not None else encode(msg))
    except ChannelError as e:
        raise ProtocolAbort(AbortCode.CHANNEL_FAILURE, f"send failed: {e}") from e


def _send_quietly(channel: Optional[SecureChannel], msg: Message) -> None:
    if channel is None or not channel.is_open:
        return
    try:
        channel.send(encode(msg))
    except ChannelError:
        pass


def _recv(channel: SecureChannel, timeout: Optional[float]) -> Message:
    channel.settimeout(timeout)
    try:
        return decode(channel.recv())
    except ChannelTimeout as e:
        raise ProtocolAbort(AbortCode.TIMEOUT, str(e)) from e
    except ChannelError as e:
        raise ProtocolAbort(AbortCode.CHANNEL_FAILURE, str(e)) from e
    except DecodeError as e:
        raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"undecodable message: {e}") from e


def _expect(channel: SecureChannel, kind: MessageKind, timeout: Optional[float]) -> Message:
    msg = _recv(channel, timeout)
    if msg.kind == MessageKind.ABORT:
        raise ProtocolAbort(msg.body.code, f"{msg.sender} aborted: {msg.body.detail}")
    if msg.kind != kind:
        raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"expected {kind.name}, got {msg.kind.name}")
    return msg


def _connect(config: RunConfig, network: Network, address: str) -> SecureChannel:
    try:
        stream = network.connect(address, timeout=config.round_timeout)
    except ChannelError as e:
        raise ProtocolAbort(AbortCode.CHANNEL_FAILURE, str(e)) from e
    try:
        channel = handshake(
            stream,
            config.identity(),
            config.policy(),
            config.channel_mode,
            initiator=True,
            timeout=config.handshake_timeout,
        )
    except (ChannelError, AttestationError) as e:
        raise ProtocolAbort(AbortCode.ATTESTATION_FAILED, f"handshake with {address} failed: {e}") from e
    logger.info("%s channel to %s established", config.channel_mode.value, address)
    return channel


def _accept(config: RunConfig, stream) -> SecureChannel:
    try:
        return handshake(
            stream,
            config.identity(),
            config.policy(),
            config.channel_mode,
            initiator=False,
            timeout=config.handshake_timeout,
        )
    except (ChannelError, AttestationError) as e:
        raise ProtocolAbort(AbortCode.ATTESTATION_FAILED, f"peer failed the handshake: {e}") from e


def _verify_complete(body: TrainComplete) -> None:
    if body.params is not None and params_digest(body.params) != body.params_digest:
        raise ProtocolAbort(AbortCode.DIGEST_MISMATCH, "final parameters do not match their digest")


def export_model(params: ModelParams, path) -> Path:
    """Write the canonical parameter encoding; the only way model bytes reach disk."""
    path = Path(path)
    path.write_bytes(encode_params(params))
    logger.info("exported model to %s", path)
    return path


def _mean_ms(seconds: list[float]) -> float:
    return 1000.0 * sum(seconds) / len(seconds) if seconds else 0.0


# ========================================
# Parameter server
# ========================================

class ParameterServer:
    def __init__(self, config: RunConfig, network: Network):
        self.config = config
        self.network = network
        self.workers: dict[int, SecureChannel] = {}
        self.chief: Optional[SecureChannel] = None
        self.state: Optional[RoundState] = None
        self.durations: list[float] = []
        self.handshakes: list[float] = []
        self.events: "queue.Queue[tuple[int, Union[Message, ProtocolAbort]]]" = queue.Queue()

    def run(self) -> TrainReport:
        try:
            if self.config.mode is Mode.SDT:
                self._join_chief()
            self.state = RoundState.initial(
                init_params(self.config.dlrm, dtype=np.dtype(self.config.precision)),
                self.config.num_workers,
                self.config.rounds,
                self.config.dlrm.learning_rate,
            )
            self._admit_workers()
            self._train()
            return self._complete()
        except ProtocolAbort as e:
            logger.error("parameter server aborting (code %d): %s", int(e.code), e.detail)
            round_ = self.state.round if self.state else 0
            notice = abort_message(e.code, e.detail, PS_NODE, round_)
            for channel in [*self.workers.values(), self.chief]:
                _send_quietly(channel, notice)
            return self._report(abort=e)
        finally:
            for channel in [*self.workers.values(), self.chief]:
                if channel is not None:
                    channel.close()

    def _join_chief(self) -> None:
        self.chief = _connect(self.config, self.network, self.config.chief_addr)
        self.handshakes.append(self.chief.handshake_seconds)
        _send(self.chief, Message(MessageKind.REGISTER, PS_NODE, Register()))
        msg = _expect(self.chief, MessageKind.CONFIG_TRANSFER, self.config.round_timeout)
        try:
            self.config = self.config.with_transfer(msg.body.text)
        except ConfigError as e:
            raise ProtocolAbort(AbortCode.TRANSFER_FAILED, f"bad configuration from chief: {e}") from e
        logger.info("configuration received from chief")

    def _admit_workers(self) -> None:
        listener = self.network.listen(self.config.ps_addr)
        logger.info("parameter server listening on %s for %d workers", self.config.ps_addr, self.config.num_workers)
        try:
            while self.state.phase == Phase.REGISTERING:
                try:
                    stream = listener.accept(timeout=self.config.round_timeout)
                except ChannelTimeout:
                    raise ProtocolAbort(
                        AbortCode.TIMEOUT,
                        f"{len(self.workers)} of {self.config.num_workers} workers registered before timeout",
                    ) from None
                channel = _accept(self.config, stream)
                self.handshakes.append(channel.handshake_seconds)
                try:
                    msg = _recv(channel, self.config.handshake_timeout)
                    self.state, outbound = register(self.state, msg)
                except ProtocolAbort as e:
                    logger.warning("rejected a registration: %s", e)
                    _send_quietly(channel, abort_message(e.code, e.detail))
                    channel.close()
                    continue
                self.workers[msg.sender.index] = channel
                self._dispatch(outbound)
        finally:
            listener.close()

    def _read_loop(self, index: int, channel: SecureChannel) -> None:
        while True:
            try:
                self.events.put((index, _recv(channel, None)))
            except ProtocolAbort as e:
                self.events.put((index, e))
                return

    def _dispatch(self, outbound: list[Envelope]) -> None:
        encoded: dict[int, bytes] = {}
        for envelope in outbound:
            key = id(envelope.message)
            if key not in encoded:
                encoded[key] = encode(envelope.message)
            _send(self.workers[envelope.to.index], envelope.message, encoded[key])

    def _train(self) -> None:
        for index, channel in self.workers.items():
            threading.Thread(
                target=self._read_loop, args=(index, channel), name=f"ps-reader-{index}", daemon=True
            ).start()

        self.state, outbound = ps_step(self.state, None)
        started = time.perf_counter()
        self._dispatch(outbound)
        while self.state.phase != Phase.COMPLETE:
            try:
                index, item = self.events.get(timeout=self.config.round_timeout)
            except queue.Empty:
                raise ProtocolAbort(
                    AbortCode.TIMEOUT,
                    f"round {self.state.round}: {len(self.state.received)} of "
                    f"{self.config.num_workers} gradients within {self.config.round_timeout}s",
                ) from None
            if isinstance(item, ProtocolAbort):
                raise ProtocolAbort(item.code, f"worker[{index}]: {item.detail}")
            if item.kind == MessageKind.ABORT:
                raise ProtocolAbort(item.body.code, f"worker[{index}] aborted: {item.body.detail}")
            if item.sender != NodeId(Role.WORKER, index):
                raise ProtocolAbort(AbortCode.UNKNOWN_NODE, f"worker[{index}] sent as {item.sender}")

            completed = len(self.state.history)
            self.state, outbound = ps_step(self.state, item)
            if len(self.state.history) > completed:
                now = time.perf_counter()
                self.durations.append(now - started)
                started = now
            self._dispatch(outbound)

    def _rows(self) -> tuple[RoundMetrics, ...]:
        history = self.state.history if self.state else ()
        return tuple(
            replace(row, duration_ms=1000.0 * seconds) for row, seconds in zip(history, self.durations)
        )

    def _complete(self) -> TrainReport:
        params = self.state.params
        digest = params_digest(params)
        done = Message(
            MessageKind.TRAIN_COMPLETE,
            PS_NODE,
            TrainComplete(rows=self._rows(), params_digest=digest, params=params),
            round=self.state.round,
        )
        payload = encode(done)
        for channel in [*self.workers.values(), self.chief]:
            if channel is not None:
                _send(channel, done, payload)
        logger.info("training complete after %d rounds, params %s…", self.state.round, digest.hex()[:16])
        if self.config.mode is Mode.HFL and self.config.export_model:
            export_model(params, self.config.export_model)
        return self._report()

    def _report(self, abort: Optional[ProtocolAbort] = None) -> TrainReport:
        channels = [c for c in [*self.workers.values(), self.chief] if c is not None]
        return TrainReport(
            node="ps",
            rows=self._rows(),
            params_digest=b"" if abort or not self.state else params_digest(self.state.params),
            abort_code=int(abort.code) if abort else None,
            abort_detail=abort.detail if abort else "",
            handshake_ms=_mean_ms(self.handshakes),
            bytes_sent=sum(c.bytes_sent for c in channels),
            params=None if abort or not self.state else self.state.params,
        )


def run_ps(config: RunConfig, *, network: Optional[Network] = None) -> TrainReport:
    config = config.validate().with_authority()
    return ParameterServer(config, network or TcpNetwork()).run()


# ========================================
# Worker
# ========================================

class Worker:
    def __init__(self, config: RunConfig, network: Network, data: Optional[Dataset]):
        self.config = config
        self.network = network
        self.data = data
        self.node = NodeId(Role.WORKER, config.worker_index)
        self.ps: Optional[SecureChannel] = None
        self.handshakes: list[float] = []

    def run(self) -> TrainReport:
        try:
            if self.config.mode is Mode.SDT:
                self._fetch_from_chief()
            trainer = LocalTrainer(self.data, self.config.worker_index, self.config)
            self.ps = _connect(self.config, self.network, self.config.ps_addr)
            self.handshakes.append(self.ps.handshake_seconds)
            _send(self.ps, Message(MessageKind.REGISTER, self.node, Register(num_samples=len(trainer))))
            ack = _expect(self.ps, MessageKind.REGISTER_ACK, self.config.round_timeout)
            logger.info("%s registered (%d workers)", self.node, ack.body.num_workers)
            return self._train(trainer)
        except ProtocolAbort as e:
            logger.error("%s aborting (code %d): %s", self.node, int(e.code), e.detail)
            _send_quietly(self.ps, abort_message(e.code, e.detail, self.node))
            return TrainReport(
                node=str(self.node),
                abort_code=int(e.code),
                abort_detail=e.detail,
                handshake_ms=_mean_ms(self.handshakes),
                bytes_sent=self.ps.bytes_sent if self.ps else 0,
            )
        finally:
            if self.ps is not None:
                self.ps.close()

    def _fetch_from_chief(self) -> None:
        chief = _connect(self.config, self.network, self.config.chief_addr)
        self.handshakes.append(chief.handshake_seconds)
        try:
            _send(chief, Message(MessageKind.REGISTER, self.node, Register()))
            msg = _expect(chief, MessageKind.CONFIG_TRANSFER, self.config.round_timeout)
            try:
                self.config = self.config.with_transfer(msg.body.text)
            except ConfigError as e:
                raise ProtocolAbort(AbortCode.TRANSFER_FAILED, f"bad configuration from chief: {e}") from e
            msg = _expect(chief, MessageKind.SHARD_TRANSFER, self.config.round_timeout)
            if msg.body.worker_index != self.config.worker_index:
                raise ProtocolAbort(
                    AbortCode.TRANSFER_FAILED,
                    f"received shard {msg.body.worker_index}, expected {self.config.worker_index}",
                )
            try:
                self.data = loads(msg.body.data)
            except FormatError as e:
                raise ProtocolAbort(AbortCode.TRANSFER_FAILED, f"shard does not parse: {e}") from e
            logger.info("%s received %d rows from chief", self.node, len(self.data))
        except ProtocolAbort as e:
            _send_quietly(chief, abort_message(e.code, e.detail, self.node))
            raise
        finally:
            chief.close()

    def _train(self, trainer: LocalTrainer) -> TrainReport:
        while True:
            msg = _recv(self.ps, self.config.round_timeout)
            if msg.sender != PS_NODE:
                raise ProtocolAbort(AbortCode.UNKNOWN_NODE, f"message from {msg.sender} on the PS channel")
            if msg.kind == MessageKind.MODEL_BROADCAST:
                try:
                    push = trainer.step(msg.body.params, msg.round)
                except (EflError, IndexError) as e:
                    raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"model does not fit local data: {e}") from e
                _send(self.ps, Message(MessageKind.GRADIENT_PUSH, self.node, push, round=msg.round))
            elif msg.kind == MessageKind.GRADIENT_ACK:
                continue
            elif msg.kind == MessageKind.TRAIN_COMPLETE:
                _verify_complete(msg.body)
                logger.info("%s finished: params %s…", self.node, msg.body.params_digest.hex()[:16])
                return TrainReport(
                    node=str(self.node),
                    rows=msg.body.rows,
                    params_digest=msg.body.params_digest,
                    handshake_ms=_mean_ms(self.handshakes),
                    bytes_sent=self.ps.bytes_sent,
                    params=msg.body.params,
                )
            elif msg.kind == MessageKind.ABORT:
                raise ProtocolAbort(msg.body.code, f"parameter server aborted: {msg.body.detail}")
            elif msg.kind == MessageKind.SHARD_TRANSFER:
                raise ProtocolAbort(AbortCode.DATA_LOCALITY, "training data offered over the PS channel")
            else:
                raise ProtocolAbort(AbortCode.UNEXPECTED_MESSAGE, f"{msg.kind.name} from the parameter server")


def run_worker_hfl(
    config: RunConfig,
    shard_path=None,
    *,
    network: Optional[Network] = None,
    data: Optional[Dataset] = None,
) -> TrainReport:
    """Train on a locally held shard; `data` skips the file read (in-process runs)."""
    config = config.validate().with_authority()
    if config.mode is not Mode.HFL:
        raise ConfigError("run_worker_hfl needs mode=hfl")
    if data is None:
        path = shard_path or config.shard_path
        if path is None or not Path(path).is_file():
            raise ConfigError(f"shard file not found: {path}")
        data = read_file(path)
    return Worker(config, network or TcpNetwork(), data).run()


def run_worker_sdt(config: RunConfig, *, network: Optional[Network] = None) -> TrainReport:
    config = config.validate().with_authority()
    if config.mode is not Mode.SDT:
        raise ConfigError("run_worker_sdt needs mode=sdt")
    return Worker(config, network or TcpNetwork(), None).run()


# ========================================
# Chief
# ========================================

class Chief:
    def __init__(self, config: RunConfig, network: Network, dataset: Dataset):
        self.config = config
        self.network = network
        self.dataset = dataset
        self.ps: Optional[SecureChannel] = None
        self.workers: dict[int, SecureChannel] = {}
        self.handshakes: list[float] = []

    def run(self) -> TrainReport:
        shards = shard(self.dataset, self.config.num_workers)
        listener = self.network.listen(self.config.chief_addr)
        logger.info("chief listening on %s", self.config.chief_addr)
        try:
            try:
                self._admit(listener)
            finally:
                listener.close()
            self._distribute(shards)
            return self._await_completion()
        except ProtocolAbort as e:
            logger.error("chief aborting (code %d): %s", int(e.code), e.detail)
            notice = abort_message(e.code, e.detail, CHIEF_NODE)
            for channel in [self.ps, *self.workers.values()]:
                _send_quietly(channel, notice)
            return TrainReport(
                node="chief",
                abort_code=int(e.code),
                abort_detail=e.detail,
                handshake_ms=_mean_ms(self.handshakes),
                bytes_sent=self._bytes_sent(),
            )
        finally:
            for channel in [self.ps, *self.workers.values()]:
                if channel is not None:
                    channel.close()

    def _bytes_sent(self) -> int:
        return sum(c.bytes_sent for c in [self.ps, *self.workers.values()] if c is not None)

    def _admit(self, listener) -> None:
        expected = self.config.num_workers
        while self.ps is None or len(self.workers) < expected:
            try:
                stream = listener.accept(timeout=self.config.round_timeout)
            except ChannelTimeout:
                raise ProtocolAbort(
                    AbortCode.TIMEOUT,
                    f"chief saw {len(self.workers)} of {expected} workers "
                    f"and {'a' if self.ps else 'no'} parameter server before timeout",
                ) from None
            channel = _accept(self.config, stream)
            self.handshakes.append(channel.handshake_seconds)
            try:
                msg = _expect(channel, MessageKind.REGISTER, self.config.handshake_timeout)
                sender = msg.sender
                if sender.role == Role.PARAMETER_SERVER:
                    if self.ps is not None:
                        raise ProtocolAbort(AbortCode.DUPLICATE_REGISTRATION, "a parameter server already joined")
                    self.ps = channel
                elif sender.role == Role.WORKER and 0 <= sender.index < expected:
                    if sender.index in self.workers:
                        raise ProtocolAbort(AbortCode.DUPLICATE_REGISTRATION, f"{sender} already joined")
                    self.workers[sender.index] = channel
                else:
                    raise ProtocolAbort(AbortCode.UNKNOWN_NODE, f"{sender} is not part of this run")
                logger.info("chief admitted %s", sender)
            except ProtocolAbort as e:
                logger.warning("chief rejected a node: %s", e)
                _send_quietly(channel, abort_message(e.code, e.detail, CHIEF_NODE))
                channel.close()

    def _distribute(self, shards) -> None:
        text = self.config.transfer_text()
        transfer = Message(MessageKind.CONFIG_TRANSFER, CHIEF_NODE, ConfigTransfer(text))
        try:
            for channel in [self.ps, *(self.workers[i] for i in sorted(self.workers))]:
                _send(channel, transfer)
            for piece in shards:
                body = ShardTransfer(worker_index=piece.worker_index, data=dumps(piece.data))
                _send(self.workers[piece.worker_index], Message(MessageKind.SHARD_TRANSFER, CHIEF_NODE, body))
        except ProtocolAbort as e:
            raise ProtocolAbort(AbortCode.TRANSFER_FAILED, f"distribution failed: {e.detail}") from e
        logger.info("chief shipped configuration and %d shards", len(shards))
        for channel in self.workers.values():
            channel.close()

    def _await_completion(self) -> TrainReport:
        timeout = self.config.round_timeout * (self.config.rounds + 1)
        msg = _expect(self.ps, MessageKind.TRAIN_COMPLETE, timeout)
        _verify_complete(msg.body)
        if self.config.export_model and msg.body.params is not None:
            export_model(msg.body.params, self.config.export_model)
        logger.info("chief received the final model %s…", msg.body.params_digest.hex()[:16])
        return TrainReport(
            node="chief",
            rows=msg.body.rows,
            params_digest=msg.body.params_digest,
            handshake_ms=_mean_ms(self.handshakes),
            bytes_sent=self._bytes_sent(),
            params=msg.body.params,
        )


def run_chief(
    config: RunConfig,
    dataset_path=None,
    *,
    network: Optional[Network] = None,
    dataset: Optional[Dataset] = None,
) -> TrainReport:
    config = config.validate().with_authority()
    if config.mode is not Mode.SDT:
        raise ConfigError("run_chief needs mode=sdt")
    if dataset is None:
        path = dataset_path or config.dataset_path
        if path is None or not Path(path).is_file():
            raise ConfigError(f"dataset file not found: {path}")
        dataset = read_file(path)
    return Chief(config, network or TcpNetwork(), dataset).run()


# ========================================
# Single-process runs
# ========================================

def load_or_generate(config: RunConfig) -> Dataset:
    if config.dataset_path:
        return read_file(config.dataset_path)
    dlrm = config.dlrm
    return generate(
        SyntheticSpec(
            num_samples=config.samples,
            seed=config.data_seed,
            vocab_sizes=dlrm.vocab_sizes,
            num_dense=dlrm.num_dense,
            num_sparse=dlrm.num_sparse,
            teacher_noise=config.teacher_noise,
        )
    )


def run_local(
    config: RunConfig,
    *,
    network: Optional[Network] = None,
    worker_overrides: Optional[Mapping[int, Mapping[str, object]]] = None,
    tap: Optional[StreamTap] = None,
    dataset: Optional[Dataset] = None,
) -> TrainReport:
    """Run every role of one deployment as threads of this process.

    Returns the model holder's report (PS in HFL, chief in SDT) with every
    node's report under `peers`.
    """
    config = config.validate()
    if config.channel_mode is ChannelMode.ATTESTED and config.authority is None:
        # In-process deployments share one throwaway authority unless a key file is configured.
        if config.authority_key is None:
            config = replace(config, authority=Authority.generate())
        else:
            config = config.with_authority()
    network = network or LocalNetwork(tap)
    dataset = dataset if dataset is not None else load_or_generate(config)
    overrides = worker_overrides or {}
    worker_configs = [
        replace(config, worker_index=i, export_model=None, **overrides.get(i, {}))
        for i in range(config.num_workers)
    ]

    with ThreadPoolExecutor(max_workers=config.num_workers + 2, thread_name_prefix="efl") as pool:
        futures = {"ps": pool.submit(run_ps, config, network=network)}
        if config.mode is Mode.HFL:
            shards = shard(dataset, config.num_workers)
            for i, worker_config in enumerate(worker_configs):
                futures[f"worker[{i}]"] = pool.submit(
                    run_worker_hfl, worker_config, network=network, data=shards[i].data
                )
        else:
            futures["chief"] = pool.submit(run_chief, config, network=network, dataset=dataset)
            for i, worker_config in enumerate(worker_configs):
                futures[f"worker[{i}]"] = pool.submit(run_worker_sdt, worker_config, network=network)
        reports = {name: future.result() for name, future in futures.items()}

    primary = reports["ps" if config.mode is Mode.HFL else "chief"]
    return replace(primary, peers=reports)
