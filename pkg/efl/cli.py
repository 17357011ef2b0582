"""
DESCRIPTION:
    Command-line entry point for attested distributed DLRM training.

    Subcommands:
    - gen-data    write a synthetic click dataset (optionally pre-sharded for HFL)
    - keygen      write an attestation authority key for multi-process runs
    - run-ps      run the parameter server
    - run-worker  run one worker (HFL: local shard, SDT: shard from the chief)
    - run-chief   run the SDT chief that owns the dataset
    - run-local   run every role of one deployment in this process
    - bench       native vs attested overhead benchmark

USAGE:
    python efl/cli.py gen-data --samples 10000 --seed 7 --out data.bin --shards 4
    python efl/cli.py keygen --out authority.pem
    python efl/cli.py run-ps --config assets/local_hfl.conf
    python efl/cli.py run-worker --config assets/local_hfl.conf --worker-index 0 --shard data.shard0.bin
    python efl/cli.py run-local --config assets/local_sdt.conf --metrics-out metrics.csv
    python efl/cli.py bench --config assets/local_hfl.conf --out bench.csv

    Before running:
    pip install -r requirements.txt

    Settings resolve as defaults < --config file < EFL_* environment variables < flags.
    Any configuration key can be set as an environment variable, for example:
    1) EFL_PS_ADDR - parameter server host:port
    2) EFL_CHIEF_ADDR - chief host:port (SDT)
    3) EFL_AUTHORITY_KEY - authority key file (attested mode)
    4) EFL_LOG_LEVEL - DEBUG, INFO, WARNING or ERROR
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from dotenv import load_dotenv

# Add current directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from attest import Authority
from bench import bench, summary, write_bench_csv
from datagen import SyntheticSpec, generate, shard, shard_path, write_file
from errors import AttestationError, ChannelError, ConfigError, EflError, ParityError, ProtocolAbort
from metrics import emit_metrics
from orchestration import TrainReport, run_chief, run_local, run_ps, run_worker_hfl, run_worker_sdt
from run_config import PRECISIONS, Mode, RunConfig, load_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_ABORT = 4
EXIT_PARITY = 5
EXIT_IO = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage error
  3  configuration error
  4  protocol abort, channel or attestation failure
  5  native/attested parity failure
  6  I/O error
"""

RUN_COMMANDS = ("run-ps", "run-worker", "run-chief", "run-local", "bench")

# (flag, config key, type)
_CONFIG_FLAGS = [
    ("--mode", "mode", str.lower),
    ("--num-workers", "num_workers", int),
    ("--rounds", "rounds", int),
    ("--batch-size", "batch_size", int),
    ("--learning-rate", "learning_rate", float),
    ("--seed", "seed", int),
    ("--num-dense", "num_dense", int),
    ("--num-sparse", "num_sparse", int),
    ("--vocab-size", "vocab_size", int),
    ("--embed-dim", "embed_dim", int),
    ("--precision", "precision", str.lower),
    ("--channel-mode", "channel_mode", str.lower),
    ("--build-id", "build_id", str),
    ("--authority-key", "authority_key", str),
    ("--ps-addr", "ps_addr", str),
    ("--chief-addr", "chief_addr", str),
    ("--worker-index", "worker_index", int),
    ("--shard", "shard_path", str),
    ("--dataset", "dataset_path", str),
    ("--samples", "samples", int),
    ("--data-seed", "data_seed", int),
    ("--teacher-noise", "teacher_noise", float),
    ("--metrics-out", "metrics_out", str),
    ("--export-model", "export_model", str),
    ("--handshake-timeout", "handshake_timeout", float),
    ("--round-timeout", "round_timeout", float),
    ("--log-level", "log_level", str),
]

_LIST_FLAGS = [
    ("--bottom-mlp", "bottom_mlp"),
    ("--top-mlp", "top_mlp"),
]


@dataclass(frozen=True)
class CliInvocation:
    subcommand: str
    config_path: Optional[str] = None
    overrides: Mapping[str, object] = field(default_factory=dict)
    config: Optional[RunConfig] = None
    out: Optional[str] = None
    shards: int = 0
    repeats: int = 1

    @property
    def log_level(self) -> str:
        if self.config is not None:
            return self.config.log_level
        return str(self.overrides.get("log_level", "INFO")).upper()


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", dest="config_path", help="key=value configuration file")
    choices = {"mode": ("hfl", "sdt"), "channel_mode": ("attested", "native"), "precision": PRECISIONS}
    for flag, key, kind in _CONFIG_FLAGS:
        parser.add_argument(
            flag, dest=key, type=kind, default=None, choices=choices.get(key), help=f"overrides `{key}`"
        )
    for flag, key in _LIST_FLAGS:
        parser.add_argument(flag, dest=key, type=_int_list, default=None, help=f"comma list, overrides `{key}`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efl",
        description="Attested distributed DLRM training (HFL and SDT topologies).",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    gen = sub.add_parser("gen-data", help="write a synthetic dataset", epilog=EXIT_CODES_HELP,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    gen.add_argument("--out", required=True, help="dataset file to write")
    gen.add_argument("--samples", dest="samples", type=int, default=None)
    gen.add_argument("--seed", dest="data_seed", type=int, default=None, help="generator seed")
    gen.add_argument("--teacher-noise", dest="teacher_noise", type=float, default=None)
    gen.add_argument("--num-dense", dest="num_dense", type=int, default=None)
    gen.add_argument("--num-sparse", dest="num_sparse", type=int, default=None)
    gen.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    gen.add_argument("--shards", type=int, default=0, help="also write K per-worker shard files")
    gen.add_argument("--config", dest="config_path", help="key=value configuration file")
    gen.add_argument("--log-level", dest="log_level", default=None)

    keygen = sub.add_parser("keygen", help="write an attestation authority key (PEM)", epilog=EXIT_CODES_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    keygen.add_argument("--out", required=True, help="key file to write")

    helps = {
        "run-ps": "run the parameter server",
        "run-worker": "run one worker",
        "run-chief": "run the SDT chief",
        "run-local": "run all roles in this process",
        "bench": "native vs attested benchmark",
    }
    for name in RUN_COMMANDS:
        command = sub.add_parser(name, help=helps[name], epilog=EXIT_CODES_HELP,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_config_flags(command)
        if name == "bench":
            command.add_argument("--out", default=None, help="bench CSV to write")
            command.add_argument("--repeats", type=int, default=1, help="native/attested pairs to run; fastest of each kept")
    return parser


def parse_cli(argv: Optional[Sequence[str]] = None, environ: Optional[Mapping[str, str]] = None) -> CliInvocation:
    """Parse arguments and resolve the run configuration.

    Usage errors exit with status 2 (argparse); configuration errors raise ConfigError.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    values = vars(args)
    subcommand = values.pop("subcommand")
    config_path = values.pop("config_path", None)
    out = values.pop("out", None)
    shards = values.pop("shards", 0) or 0
    repeats = values.pop("repeats", 1)

    if subcommand == "keygen":
        return CliInvocation(subcommand, out=out)

    overrides = {key: value for key, value in values.items() if value is not None}
    config = load_config(config_path, environ, overrides)

    if subcommand == "gen-data" and shards < 0:
        parser.error("--shards must be non-negative")
    if subcommand == "bench" and repeats < 1:
        parser.error("--repeats must be at least 1")
    if subcommand == "run-chief":
        if config.mode is not Mode.SDT:
            parser.error("run-chief needs --mode sdt")
        if not config.dataset_path:
            parser.error("run-chief needs --dataset")
    if subcommand == "run-worker" and config.mode is Mode.HFL and not config.shard_path:
        parser.error("run-worker in HFL mode needs --shard")
    return CliInvocation(subcommand, config_path, overrides, config, out, shards, repeats)


# ========================================
# Subcommands
# ========================================

def _gen_data(inv: CliInvocation) -> int:
    config = inv.config
    spec = SyntheticSpec(
        num_samples=config.samples,
        seed=config.data_seed,
        vocab_sizes=config.dlrm.vocab_sizes,
        num_dense=config.dlrm.num_dense,
        num_sparse=config.dlrm.num_sparse,
        teacher_noise=config.teacher_noise,
    )
    dataset = generate(spec)
    path = write_file(dataset, inv.out)
    print(f"✓ Wrote {len(dataset)} records to {path}")
    print(f"  - Positive rate: {dataset.labels.mean():.3f}")
    print(f"  - Digest: {dataset.digest().hex()}")
    if inv.shards:
        for piece in shard(dataset, inv.shards):
            target = write_file(piece.data, shard_path(path, piece.worker_index))
            print(f"  - Shard {piece.worker_index}: {len(piece)} records -> {target}")
    return EXIT_OK


def _keygen(inv: CliInvocation) -> int:
    authority = Authority.generate()
    path = authority.save(inv.out)
    print(f"✓ Authority key written to {path}")
    print(f"  - Public key: {authority.public_bytes().hex()}")
    print("⚠ Distribute this file out of band to every node of the deployment only.")
    return EXIT_OK


def _finish(report: TrainReport, config: RunConfig) -> int:
    print("\n" + "=" * 80)
    print(f"Training Report ({report.node})")
    print("=" * 80)
    if report.rows:
        last = report.rows[-1]
        print(f"  rounds:       {len(report.rows)}")
        print(f"  final loss:   {last.loss:.6f}")
        print(f"  accuracy:     {last.accuracy:.4f}")
        print(f"  mean round:   {report.mean_round_ms:.2f} ms")
    print(f"  handshake:    {report.handshake_ms:.2f} ms")
    if config.metrics_out:
        emit_metrics(report, config.metrics_out)
        print(f"✓ Metrics written to {config.metrics_out}")
    if report.aborted:
        print(f"❌ Run aborted (code {report.abort_code}): {report.abort_detail}")
        return EXIT_ABORT
    print(f"✓ Final params digest: {report.params_digest.hex()}")
    return EXIT_OK


def _run_ps(inv: CliInvocation) -> int:
    return _finish(run_ps(inv.config), inv.config)


def _run_worker(inv: CliInvocation) -> int:
    config = inv.config
    if config.mode is Mode.HFL:
        report = run_worker_hfl(config, config.shard_path)
    else:
        report = run_worker_sdt(config)
    return _finish(report, config)


def _run_chief(inv: CliInvocation) -> int:
    return _finish(run_chief(inv.config, inv.config.dataset_path), inv.config)


def _run_local(inv: CliInvocation) -> int:
    return _finish(run_local(inv.config), inv.config)


def _bench(inv: CliInvocation) -> int:
    result = bench(inv.config, repeats=inv.repeats)
    print(summary(result))
    if inv.out:
        write_bench_csv(result, inv.out)
        print(f"\n✓ Benchmark CSV written to {inv.out}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[CliInvocation], int]] = {
    "gen-data": _gen_data,
    "keygen": _keygen,
    "run-ps": _run_ps,
    "run-worker": _run_worker,
    "run-chief": _run_chief,
    "run-local": _run_local,
    "bench": _bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        inv = parse_cli(argv, os.environ)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    logging.basicConfig(
        level=getattr(logging, inv.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[inv.subcommand](inv)
    except ParityError as e:
        print(f"❌ Parity failure: {e}")
        return EXIT_PARITY
    except (ProtocolAbort, ChannelError, AttestationError) as e:
        print(f"❌ Run aborted: {e}")
        return EXIT_ABORT
    except EflError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except OSError as e:
        print(f"❌ I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
