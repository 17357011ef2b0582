"""
Native-vs-attested overhead benchmark.

Runs one configuration in this process, first with plaintext channels and
then attested, and compares wall time, mean round time and handshake cost.
With repeats the pair is run several times and each mode keeps its fastest
run. The loss and accuracy columns of every run must agree bit for bit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from channel import ChannelMode
from errors import ConfigError, ParityError, ProtocolAbort
from orchestration import TrainReport, run_local
from run_config import RunConfig

logger = logging.getLogger(__name__)

BENCH_HEADER = "mode,mean_round_ms,total_ms,handshake_ms"

SIMULATION_NOTE = (
    "Attestation here is simulated in software: there is no enclave memory "
    "encryption, EPC paging or library-OS layer, so the multi-x overheads "
    "measured on real SGX hardware are not reproduced. The ratio isolates "
    "handshake and record-encryption cost only."
)


@dataclass(frozen=True)
class ModeTiming:
    mode: ChannelMode
    mean_round_ms: float
    total_ms: float
    handshake_ms: float


@dataclass(frozen=True)
class BenchResult:
    native: ModeTiming
    attested: ModeTiming
    parity: bool
    config_digest: bytes
    repeats: int = 1

    @property
    def overhead_ratio(self) -> float:
        return self.attested.total_ms / self.native.total_ms

    @property
    def round_overhead_ratio(self) -> float:
        if self.native.mean_round_ms == 0:
            return float("nan")
        return self.attested.mean_round_ms / self.native.mean_round_ms

    @property
    def handshake_cost_ms(self) -> float:
        """Extra connection set-up time the attested handshake adds over the plaintext one."""
        return self.attested.handshake_ms - self.native.handshake_ms


def _columns(report: TrainReport) -> list[tuple[int, str, str]]:
    return [(row.round, float(row.loss).hex(), float(row.accuracy).hex()) for row in report.rows]


def _timed(config: RunConfig, runner: Callable[[RunConfig], TrainReport]) -> tuple[TrainReport, ModeTiming]:
    logger.info("bench: %s run", config.channel_mode.value)
    started = time.perf_counter()
    report = runner(config)
    total_ms = 1000.0 * (time.perf_counter() - started)
    if report.aborted:
        raise ProtocolAbort(report.abort_code, f"{config.channel_mode.value} run aborted: {report.abort_detail}")
    return report, ModeTiming(config.channel_mode, report.mean_round_ms, total_ms, report.handshake_ms)


def _check_parity(reference: TrainReport, report: TrainReport) -> None:
    if _columns(reference) != _columns(report):
        raise ParityError("loss/accuracy columns differ between native and attested runs")
    if reference.params_digest != report.params_digest:
        raise ParityError("final parameters differ between native and attested runs")


def bench(
    config: RunConfig,
    runner: Callable[[RunConfig], TrainReport] = run_local,
    repeats: int = 1,
) -> BenchResult:
    """Run native then attested, `repeats` times; raise ParityError if the training math differs.

    Each mode keeps its fastest run, so warm-up and scheduler noise do not
    land on one side of the ratio.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be at least 1, got {repeats}")
    config = config.validate()
    native = replace(config, channel_mode=ChannelMode.NATIVE)
    attested = replace(config, channel_mode=ChannelMode.ATTESTED)
    digest = native.effective_digest(exclude=("channel_mode",))
    if attested.effective_digest(exclude=("channel_mode",)) != digest:
        raise ParityError("benchmark runs differ in more than channel_mode")

    reference: Optional[TrainReport] = None
    timings: dict[ChannelMode, list[ModeTiming]] = {ChannelMode.NATIVE: [], ChannelMode.ATTESTED: []}
    for _ in range(repeats):
        for mode_config in (native, attested):
            report, timing = _timed(mode_config, runner)
            if reference is None:
                reference = report
            else:
                _check_parity(reference, report)
            timings[timing.mode].append(timing)

    def fastest(mode: ChannelMode) -> ModeTiming:
        return min(timings[mode], key=lambda t: t.total_ms)

    return BenchResult(
        native=fastest(ChannelMode.NATIVE),
        attested=fastest(ChannelMode.ATTESTED),
        parity=True,
        config_digest=digest,
        repeats=repeats,
    )


def write_bench_csv(result: BenchResult, path) -> Path:
    path = Path(path)
    lines = [BENCH_HEADER]
    for timing in (result.native, result.attested):
        lines.append(
            f"{timing.mode.value},{timing.mean_round_ms:.3f},{timing.total_ms:.3f},{timing.handshake_ms:.3f}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def summary(result: BenchResult) -> str:
    lines = [
        "=" * 80,
        "Native vs Attested Benchmark",
        "=" * 80,
        f"  {'mode':10s} {'mean round ms':>14s} {'total ms':>12s} {'handshake ms':>14s}",
    ]
    for timing in (result.native, result.attested):
        lines.append(
            f"  {timing.mode.value:10s} {timing.mean_round_ms:14.3f} {timing.total_ms:12.3f} {timing.handshake_ms:14.3f}"
        )
    lines += [
        "",
        f"  best of {result.repeats} run(s) per mode",
        f"  overhead ratio (total):      {result.overhead_ratio:.3f}x",
        f"  overhead ratio (per round):  {result.round_overhead_ratio:.3f}x",
        f"  handshake cost:              {result.handshake_cost_ms:.3f} ms",
        f"  loss/accuracy parity:        {'✓ identical' if result.parity else '❌ differs'}",
        "",
        f"⚠ {SIMULATION_NOTE}",
    ]
    return "\n".join(lines)
