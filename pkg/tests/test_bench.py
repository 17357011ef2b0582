from dataclasses import replace
from types import SimpleNamespace

import pytest

from bench import BENCH_HEADER, SIMULATION_NOTE, bench, summary, write_bench_csv
from channel import ChannelMode
from errors import ConfigError, ParityError, ProtocolAbort
from orchestration import TrainReport, run_local
from protocol import AbortCode, RoundMetrics
from run_config import RunConfig


def _fake_runner(rows_by_mode, digest_by_mode=None):
    calls = []

    def runner(config):
        calls.append(config.channel_mode)
        mode = config.channel_mode
        digest = (digest_by_mode or {}).get(mode, b"\x01" * 32)
        return TrainReport(node="ps", rows=rows_by_mode[mode], params_digest=digest, handshake_ms=1.0)

    return runner, calls


ROWS = (RoundMetrics(0, 0.7, 0.5, 2.0), RoundMetrics(1, 0.6, 0.6, 4.0))


def test_native_runs_first_then_attested(run_config):
    runner, calls = _fake_runner({ChannelMode.NATIVE: ROWS, ChannelMode.ATTESTED: ROWS})
    result = bench(run_config, runner)
    assert calls == [ChannelMode.NATIVE, ChannelMode.ATTESTED]
    assert result.parity
    assert result.native.mean_round_ms == 3.0
    assert result.config_digest == run_config.effective_digest(exclude=("channel_mode",))


def test_loss_difference_is_a_parity_failure(run_config):
    drifted = (ROWS[0], replace(ROWS[1], loss=0.6 + 1e-12))
    runner, _ = _fake_runner({ChannelMode.NATIVE: ROWS, ChannelMode.ATTESTED: drifted})
    with pytest.raises(ParityError, match="loss/accuracy"):
        bench(run_config, runner)


def test_durations_do_not_count_towards_parity(run_config):
    slower = tuple(replace(row, duration_ms=row.duration_ms * 3) for row in ROWS)
    runner, _ = _fake_runner({ChannelMode.NATIVE: ROWS, ChannelMode.ATTESTED: slower})
    result = bench(run_config, runner)
    assert result.round_overhead_ratio == pytest.approx(3.0)


def test_digest_difference_is_a_parity_failure(run_config):
    runner, _ = _fake_runner(
        {ChannelMode.NATIVE: ROWS, ChannelMode.ATTESTED: ROWS},
        {ChannelMode.ATTESTED: b"\x02" * 32},
    )
    with pytest.raises(ParityError, match="final parameters"):
        bench(run_config, runner)


def test_aborted_run_is_reported(run_config):
    def runner(config):
        return TrainReport(node="ps", abort_code=int(AbortCode.TIMEOUT), abort_detail="slow")

    with pytest.raises(ProtocolAbort) as e:
        bench(run_config, runner)
    assert e.value.code == AbortCode.TIMEOUT


def test_real_benchmark_keeps_parity(tmp_path, run_config):
    result = bench(replace(run_config, authority=None), run_local)
    assert result.parity
    assert result.attested.handshake_ms > 0
    assert result.overhead_ratio > 0
    path = write_bench_csv(result, tmp_path / "bench.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == BENCH_HEADER
    assert [line.split(",")[0] for line in lines[1:]] == ["native", "attested"]
    text = summary(result)
    assert "✓ identical" in text
    assert SIMULATION_NOTE in text


@pytest.mark.slow
def test_attested_overhead_is_not_below_native():
    # default model size so per-round compute dominates scheduler jitter
    config = replace(RunConfig(), rounds=20, samples=4000, round_timeout=60.0)
    result = bench(config, repeats=3)
    assert result.overhead_ratio > 0.9


def test_repeats_alternate_modes_and_keep_the_fastest(run_config, monkeypatch):
    clock = iter([0.0, 5.0, 10.0, 12.0, 20.0, 23.0, 30.0, 31.0, 40.0, 47.0, 50.0, 54.0])
    monkeypatch.setattr("bench.time", SimpleNamespace(perf_counter=lambda: next(clock)))
    calls = []

    def runner(config):
        calls.append(config.channel_mode)
        handshake = 3.0 if config.channel_mode is ChannelMode.ATTESTED else 1.0
        return TrainReport(node="ps", rows=ROWS, params_digest=b"\x01" * 32, handshake_ms=handshake)

    result = bench(run_config, runner, repeats=3)
    assert calls == [ChannelMode.NATIVE, ChannelMode.ATTESTED] * 3
    assert result.repeats == 3
    # native runs took 5s, 3s, 7s; attested 2s, 1s, 4s
    assert result.native.total_ms == pytest.approx(3000.0)
    assert result.attested.total_ms == pytest.approx(1000.0)
    assert result.handshake_cost_ms == pytest.approx(2.0)
    assert "best of 3 run(s)" in summary(result)


def test_parity_is_checked_on_every_repeat(run_config):
    drifted = (ROWS[0], replace(ROWS[1], accuracy=0.61))
    reports = iter([ROWS, ROWS, ROWS, drifted])

    def runner(config):
        return TrainReport(node="ps", rows=next(reports), params_digest=b"\x01" * 32)

    with pytest.raises(ParityError):
        bench(run_config, runner, repeats=2)


def test_repeats_must_be_positive(run_config):
    runner, calls = _fake_runner({ChannelMode.NATIVE: ROWS, ChannelMode.ATTESTED: ROWS})
    with pytest.raises(ConfigError):
        bench(run_config, runner, repeats=0)
    assert calls == []
