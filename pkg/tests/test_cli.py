import os

import pytest

from attest import Authority
from cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, build_parser, main, parse_cli
from datagen import read_file, shard_path
from run_config import Mode

TINY_CONF = """\
num_workers=2
rounds=2
batch_size=16
num_dense=4
num_sparse=3
vocab_sizes=7,5,11
embed_dim=4
bottom_mlp=8,4
top_mlp=8,1
samples=200
data_seed=5
channel_mode=native
round_timeout=10
"""


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for name in list(os.environ):
        if name.startswith("EFL_"):
            monkeypatch.delenv(name)


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONF, encoding="utf-8")
    return str(path)


def test_help_lists_exit_codes():
    assert "exit codes" in build_parser().format_help()


def test_flags_override_file_and_environment(conf):
    inv = parse_cli(["run-local", "--config", conf, "--rounds", "5"], {"EFL_ROUNDS": "4", "EFL_SEED": "9"})
    assert inv.config.rounds == 5
    assert inv.config.dlrm.seed == 9
    assert inv.config.num_workers == 2


def test_usage_errors_exit_with_two(conf):
    for argv in (
        ["run-chief", "--config", conf],
        ["run-chief", "--config", conf, "--mode", "sdt"],
        ["run-worker", "--config", conf],
        ["run-local", "--channel-mode", "sgx"],
        ["run-local", "--precision", "float16"],
        ["bench", "--config", conf, "--repeats", "0"],
        ["no-such-command"],
    ):
        with pytest.raises(SystemExit) as e:
            parse_cli(argv, {})
        assert e.value.code == 2


def test_chief_invocation(conf):
    inv = parse_cli(["run-chief", "--config", conf, "--mode", "SDT", "--dataset", "data.bin"], {})
    assert inv.config.mode is Mode.SDT
    assert inv.config.dataset_path == "data.bin"


def test_gen_data_writes_dataset_and_shards(tmp_path, capsys):
    out = tmp_path / "data.bin"
    code = main([
        "gen-data", "--out", str(out), "--samples", "50", "--seed", "3",
        "--num-dense", "4", "--num-sparse", "3", "--vocab-size", "7", "--shards", "2",
    ])
    assert code == EXIT_OK
    dataset = read_file(out)
    assert len(dataset) == 50
    assert dataset.vocab_sizes == (7, 7, 7)
    assert [len(read_file(shard_path(out, i))) for i in range(2)] == [25, 25]
    assert "✓ Wrote 50 records" in capsys.readouterr().out


def test_keygen(tmp_path):
    out = tmp_path / "authority.pem"
    assert main(["keygen", "--out", str(out)]) == EXIT_OK
    Authority.load(out)


def test_run_local_writes_metrics(tmp_path, conf, capsys):
    metrics = tmp_path / "metrics.csv"
    assert main(["run-local", "--config", conf, "--metrics-out", str(metrics)]) == EXIT_OK
    lines = metrics.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "round,loss,accuracy,duration_ms"
    assert len(lines) == 4
    assert lines[-1].startswith("# params_digest=")
    assert "Final params digest" in capsys.readouterr().out


def test_config_errors_exit_with_three(conf):
    assert main(["run-local", "--config", conf, "--rounds", "0"]) == EXIT_CONFIG
    assert main(["run-ps", "--config", conf, "--channel-mode", "attested"]) == EXIT_CONFIG


def test_aborted_run_exits_with_four(conf, capsys):
    code = main(["run-ps", "--config", conf, "--ps-addr", "127.0.0.1:0", "--round-timeout", "0.2"])
    assert code == EXIT_ABORT
    assert "❌ Run aborted" in capsys.readouterr().out


def test_bench_subcommand(tmp_path, conf):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", conf, "--out", str(out)]) == EXIT_OK
    assert out.read_text(encoding="utf-8").startswith("mode,mean_round_ms,total_ms,handshake_ms\n")


def test_bench_repeats_and_precision_flags(conf):
    inv = parse_cli(["bench", "--config", conf, "--repeats", "3", "--precision", "FLOAT64"], {})
    assert inv.repeats == 3
    assert inv.config.precision == "float64"
    assert parse_cli(["bench", "--config", conf], {}).repeats == 1
