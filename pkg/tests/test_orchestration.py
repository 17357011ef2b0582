import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from channel import TAG_DATA, ChannelMode, handshake
from datagen import SyntheticSpec, dumps, generate, shard
from dlrm import Batch, backward, bce_loss, forward, init_params, sgd_apply
from errors import ConfigError
from orchestration import (
    EVAL_FRACTION,
    LocalTrainer,
    load_or_generate,
    minibatch_indices,
    run_local,
    run_ps,
    run_worker_hfl,
    split_holdout,
)
from protocol import (
    PS_NODE,
    AbortCode,
    Message,
    MessageKind,
    NodeId,
    Register,
    RegisterAck,
    Role,
    RoundState,
    ShardTransfer,
    decode,
    decode_params,
    encode,
    encode_delta,
    params_digest,
    ps_step,
)
from run_config import Mode, RunConfig
from transport import LocalNetwork, TappedStream, TcpNetwork


def _columns(report):
    return [(row.round, row.loss, row.accuracy) for row in report.rows]


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


# ========================================
# Local training step
# ========================================

def test_minibatches_walk_the_permutation_cyclically():
    order = np.array([3, 0, 4, 1, 2])
    np.testing.assert_array_equal(minibatch_indices(order, 0, 2), [3, 0])
    np.testing.assert_array_equal(minibatch_indices(order, 2, 2), [2, 3])
    np.testing.assert_array_equal(minibatch_indices(order, 1, 5), order)


def test_holdout_is_the_tail_of_the_shard(tiny_dataset):
    train, held_out = split_holdout(tiny_dataset)
    assert len(held_out) == len(tiny_dataset) // EVAL_FRACTION == 20
    np.testing.assert_array_equal(held_out.labels, tiny_dataset.labels[-20:])
    train, held_out = split_holdout(tiny_dataset.slice(0, 9))
    assert (len(train), len(held_out)) == (9, 0)


def test_trainer_step(run_config, tiny_dataset):
    trainer = LocalTrainer(tiny_dataset, 1, run_config)
    params = init_params(run_config.dlrm)
    push = trainer.step(params, 0)
    assert push.delta.batch_size == 16
    assert push.eval_total == 20
    assert 0 <= push.eval_correct <= 20
    again = LocalTrainer(tiny_dataset, 1, run_config).step(params, 0)
    assert again.delta == push.delta
    other = LocalTrainer(tiny_dataset, 0, run_config).step(params, 0)
    assert other.delta != push.delta


def test_trainer_clamps_the_batch_and_skips_empty_holdout(run_config, tiny_dataset):
    trainer = LocalTrainer(tiny_dataset.slice(0, 5), 0, run_config)
    push = trainer.step(init_params(run_config.dlrm), 3)
    assert push.delta.batch_size == 5
    assert push.eval_total == 0


def test_trainer_rejects_mismatched_shards(run_config):
    wide = generate(SyntheticSpec(num_samples=20, vocab_sizes=(7, 5, 11), num_dense=5, num_sparse=3))
    with pytest.raises(ConfigError, match="dense"):
        LocalTrainer(wide, 0, run_config)
    big_vocab = generate(SyntheticSpec(num_samples=50, vocab_sizes=(70, 5, 11), num_dense=4, num_sparse=3))
    with pytest.raises(ConfigError, match="vocabularies"):
        LocalTrainer(big_vocab, 0, run_config)


# ========================================
# In-process runs
# ========================================

def test_hfl_run_matches_a_direct_state_machine_drive(run_config):
    report = run_local(run_config)
    assert not report.aborted
    assert [row.round for row in report.rows] == [0, 1, 2]
    assert all(row.duration_ms > 0 for row in report.rows)

    config = run_config
    trainers = [LocalTrainer(s.data, s.worker_index, config) for s in shard(load_or_generate(config), 2)]
    state = RoundState.initial(init_params(config.dlrm), 2, config.rounds, config.dlrm.learning_rate)
    for i in range(2):
        state, _ = ps_step(state, Message(MessageKind.REGISTER, NodeId(Role.WORKER, i), Register()))
    state, _ = ps_step(state, None)
    for round_ in range(config.rounds):
        for i, trainer in enumerate(trainers):
            push = trainer.step(state.params, round_)
            state, _ = ps_step(state, Message(MessageKind.GRADIENT_PUSH, NodeId(Role.WORKER, i), push, round=round_))

    assert report.params_digest == params_digest(state.params)
    assert _columns(report) == [(r.round, r.loss, r.accuracy) for r in state.history]


def test_every_node_reports_the_same_model(run_config):
    report = run_local(run_config)
    assert set(report.peers) == {"ps", "worker[0]", "worker[1]"}
    for name, peer in report.peers.items():
        assert not peer.aborted, name
        assert peer.params_digest == report.params_digest
        assert _columns(peer) == _columns(report)
    assert params_digest(report.params) == report.params_digest


def test_attested_and_native_runs_agree_bitwise(run_config):
    native = run_local(run_config)
    attested = run_local(replace(run_config, channel_mode=ChannelMode.ATTESTED, authority=None))
    assert not attested.aborted
    assert attested.handshake_ms > 0
    assert _columns(attested) == _columns(native)
    assert attested.params_digest == native.params_digest


def test_sdt_and_hfl_reach_the_same_model(run_config):
    hfl = run_local(run_config)
    sdt = run_local(replace(run_config, mode=Mode.SDT, channel_mode=ChannelMode.ATTESTED))
    assert not sdt.aborted
    assert sdt.node == "chief"
    assert set(sdt.peers) == {"ps", "chief", "worker[0]", "worker[1]"}
    assert sdt.params_digest == hfl.params_digest
    assert _columns(sdt) == _columns(hfl)


def _data_frames(data: bytes):
    at = 0
    while at + 5 <= len(data):
        length, tag = struct.unpack_from("<IB", data, at)
        if tag == TAG_DATA:
            yield data[at + 5:at + 5 + length]
        at += 5 + length


def test_hfl_run_tracks_centralized_full_batch_sgd(run_config):
    config = replace(run_config, num_workers=4, rounds=100, samples=400, local_batch_size=1000, precision="float64")
    received: list[list[bytes]] = []
    lock = threading.Lock()

    def tap(address, stream):
        chunks: list[bytes] = []
        with lock:
            received.append(chunks)
        return TappedStream(stream, on_recv=lambda data: chunks.append(data) or data)

    dataset = load_or_generate(config)
    report = run_local(config, tap=tap, dataset=dataset)
    assert not report.aborted

    broadcasts = []
    for body in _data_frames(b"".join(received[0])):
        message = decode(body)
        if message.kind == MessageKind.MODEL_BROADCAST:
            broadcasts.append(message.body.params)
    assert len(broadcasts) == config.rounds

    trains = [split_holdout(piece.data)[0] for piece in shard(dataset, 4)]
    union = Batch(
        dense=np.concatenate([t.dense for t in trains]),
        sparse=np.concatenate([t.sparse for t in trains]),
        labels=np.concatenate([t.labels for t in trains]),
    )
    central = init_params(config.dlrm, dtype=np.float64)
    for params, row in zip(broadcasts, report.rows):
        assert params.dtype == np.float64
        for mine, expected in zip(params.arrays(), central.arrays()):
            np.testing.assert_allclose(mine, expected, rtol=1e-5, atol=1e-12)
        probs, cache = forward(central, union)
        assert abs(row.loss - bce_loss(probs, union.labels)) <= 1e-5
        central = sgd_apply(central, backward(central, cache, union.labels), config.dlrm.learning_rate)
    for mine, expected in zip(report.params.arrays(), central.arrays()):
        np.testing.assert_allclose(mine, expected, rtol=1e-5, atol=1e-12)


def test_model_export_only_when_asked(tmp_path, monkeypatch, run_config):
    monkeypatch.chdir(tmp_path)
    report = run_local(run_config)
    run_local(replace(run_config, mode=Mode.SDT, channel_mode=ChannelMode.ATTESTED))
    assert list(tmp_path.iterdir()) == []

    exported = run_local(replace(run_config, export_model="model.bin"))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["model.bin"]
    model = decode_params((tmp_path / "model.bin").read_bytes())
    assert params_digest(model) == exported.params_digest == report.params_digest


def test_sdt_chief_exports_the_model(tmp_path, run_config):
    target = tmp_path / "model.bin"
    report = run_local(replace(run_config, mode=Mode.SDT, export_model=str(target)))
    assert params_digest(decode_params(target.read_bytes())) == report.params_digest


def test_hfl_workers_send_gradients_and_never_data(run_config):
    frames = []
    lock = threading.Lock()

    def tap(address, stream):
        def record(data):
            with lock:
                frames.append(data)
            return data

        return TappedStream(stream, on_send=record)

    dataset = load_or_generate(run_config)
    report = run_local(run_config, tap=tap, dataset=dataset)
    assert not report.aborted

    pushes = 0
    records = [dumps(piece.data.slice(0, 3))[-3 * 29:] for piece in shard(dataset, 2)]
    for frame in frames:
        assert not any(record in frame for record in records)
        if frame[4] != TAG_DATA:
            continue
        message = decode(frame[5:])
        assert message.kind != MessageKind.SHARD_TRANSFER
        if message.kind == MessageKind.GRADIENT_PUSH:
            pushes += 1
            assert len(frame) <= len(encode_delta(message.body.delta)) + 1024
    assert pushes == run_config.rounds * run_config.num_workers


# ========================================
# Failure paths
# ========================================

def test_rogue_worker_build_is_refused(run_config):
    config = replace(run_config, channel_mode=ChannelMode.ATTESTED, round_timeout=2.0)
    report = run_local(config, worker_overrides={1: {"build_id": "rogue-build"}})
    assert report.abort_code == AbortCode.ATTESTATION_FAILED
    assert report.params is None
    assert report.peers["worker[1]"].abort_code == AbortCode.ATTESTATION_FAILED
    assert all(peer.aborted for peer in report.peers.values())


def test_parameter_server_times_out_without_workers(run_config):
    report = run_ps(replace(run_config, round_timeout=0.2), network=LocalNetwork())
    assert report.abort_code == AbortCode.TIMEOUT
    assert report.rows == ()
    assert report.params is None


class PushFlipper:
    """Corrupts the body of one outgoing record on the first tapped connection."""

    def __init__(self, send_index: int, offset: int):
        self.send_index = send_index
        self.offset = offset
        self.connections = 0
        self.fired = False
        self._lock = threading.Lock()

    def __call__(self, address, stream):
        with self._lock:
            self.connections += 1
            if self.connections > 1:
                return stream
        sends = iter(range(1_000_000))

        def on_send(data):
            if next(sends) != self.send_index:
                return data
            self.fired = True
            out = bytearray(data)
            out[5 + self.offset % (len(data) - 5)] ^= 0x10
            return bytes(out)

        return TappedStream(stream, on_send=on_send)


@pytest.mark.parametrize("trials", [20, pytest.param(200, marks=pytest.mark.slow)])
def test_tampered_gradient_pushes_abort_the_run(run_config, trials):
    config = replace(run_config, channel_mode=ChannelMode.ATTESTED, round_timeout=2.0)
    dataset = load_or_generate(config)
    rng = np.random.default_rng(trials)
    for _ in range(trials):
        # sends: hello, finished, register, then one push per round
        flipper = PushFlipper(int(rng.integers(3, 3 + config.rounds)), int(rng.integers(1 << 20)))
        report = run_local(config, tap=flipper, dataset=dataset)
        assert flipper.fired
        assert report.abort_code == AbortCode.CHANNEL_FAILURE
        assert report.params is None
        assert all(peer.aborted for peer in report.peers.values())


def test_tampered_registration_only_loses_that_worker(run_config):
    config = replace(run_config, channel_mode=ChannelMode.ATTESTED, round_timeout=1.0)
    flipper = PushFlipper(2, 0)
    report = run_local(config, tap=flipper)
    assert flipper.fired
    assert report.abort_code == AbortCode.TIMEOUT
    assert sum(peer.abort_code == AbortCode.CHANNEL_FAILURE for peer in report.peers.values()) >= 1


def test_corrupted_shard_transfer_stops_the_run(run_config):
    config = replace(run_config, mode=Mode.SDT, channel_mode=ChannelMode.ATTESTED, round_timeout=1.0)

    def tap(address, stream):
        if address != config.chief_addr:
            return stream

        def on_recv(data):
            if len(data) < 1000:
                return data
            out = bytearray(data)
            out[len(out) // 2] ^= 0x01
            return bytes(out)

        return TappedStream(stream, on_recv=on_recv)

    report = run_local(config, tap=tap)
    assert report.aborted
    assert report.rows == ()
    for i in range(config.num_workers):
        assert report.peers[f"worker[{i}]"].abort_code == AbortCode.CHANNEL_FAILURE
    assert report.peers["ps"].abort_code == AbortCode.TIMEOUT


def test_worker_refuses_data_on_the_ps_channel(run_config, tiny_dataset):
    network = LocalNetwork()
    listener = network.listen(run_config.ps_addr)
    seen = {}

    def fake_ps():
        channel = handshake(listener.accept(timeout=5.0), None, None, ChannelMode.NATIVE, initiator=False)
        seen["register"] = decode(channel.recv())
        channel.send(encode(Message(MessageKind.REGISTER_ACK, PS_NODE, RegisterAck(0, 2))))
        offer = ShardTransfer(worker_index=0, data=dumps(tiny_dataset))
        channel.send(encode(Message(MessageKind.SHARD_TRANSFER, PS_NODE, offer)))
        seen["reply"] = decode(channel.recv())

    with ThreadPoolExecutor(max_workers=1) as pool:
        server = pool.submit(fake_ps)
        report = run_worker_hfl(run_config, network=network, data=tiny_dataset)
        server.result(timeout=5.0)
    listener.close()

    assert seen["register"].kind == MessageKind.REGISTER
    assert report.abort_code == AbortCode.DATA_LOCALITY
    assert seen["reply"].kind == MessageKind.ABORT
    assert seen["reply"].body.code == AbortCode.DATA_LOCALITY


def test_tcp_deployment_matches_the_in_process_run(run_config):
    config = replace(
        run_config, channel_mode=ChannelMode.ATTESTED, ps_addr=f"127.0.0.1:{_free_port()}"
    )
    shards = shard(load_or_generate(config), config.num_workers)
    with ThreadPoolExecutor(max_workers=3) as pool:
        ps = pool.submit(run_ps, config, network=TcpNetwork())
        workers = [
            pool.submit(run_worker_hfl, replace(config, worker_index=i), network=TcpNetwork(), data=shards[i].data)
            for i in range(config.num_workers)
        ]
        report = ps.result(timeout=60)
        assert all(not w.result(timeout=60).aborted for w in workers)
    assert not report.aborted
    assert report.params_digest == run_local(config).params_digest


def test_run_entry_points_check_the_mode(run_config, tmp_path):
    with pytest.raises(ConfigError, match="shard file not found"):
        run_worker_hfl(run_config, tmp_path / "missing.bin", network=LocalNetwork())
    with pytest.raises(ConfigError):
        run_local(replace(run_config, rounds=0))


@pytest.mark.slow
def test_default_model_learns_the_synthetic_task():
    config = replace(RunConfig(), channel_mode=ChannelMode.NATIVE, samples=10_000, rounds=500, round_timeout=60.0)
    report = run_local(config)
    assert not report.aborted
    assert max(row.accuracy for row in report.rows) >= 0.90
