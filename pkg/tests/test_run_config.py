from dataclasses import replace
from pathlib import Path

import pytest

from attest import Authority
from channel import ChannelMode
from errors import ConfigError
from run_config import (
    BUILD_ID,
    TRANSFER_KEYS,
    Mode,
    RunConfig,
    build_config,
    environment_settings,
    load_config,
    parse_settings,
    read_config_file,
)


def _write(tmp_path, text: str, name: str = "run.conf"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    config = load_config()
    assert config == RunConfig()
    assert config.mode is Mode.HFL
    assert config.channel_mode is ChannelMode.ATTESTED
    assert config.dlrm.num_interactions == 351
    assert config.build_id == BUILD_ID


def test_file_environment_and_overrides_in_ascending_precedence(tmp_path):
    path = _write(tmp_path, "# local run\nrounds=7\nnum_workers=3\nps_addr=10.0.0.1:9000\n")
    environ = {"EFL_ROUNDS": "9", "EFL_LEARNING_RATE": "0.05", "HOME": "/root", "EFL_NOT_A_KEY": "1"}
    config = load_config(path, environ, {"num_workers": "2", "mode": None})
    assert config.rounds == 9
    assert config.num_workers == 2
    assert config.ps_addr == "10.0.0.1:9000"
    assert config.dlrm.learning_rate == 0.05
    assert config.mode is Mode.HFL


def test_string_overrides_are_parsed():
    config = load_config(overrides={"mode": "SDT", "channel_mode": "native", "bottom_mlp": "8,4", "embed_dim": "4"})
    assert config.mode is Mode.SDT
    assert config.channel_mode is ChannelMode.NATIVE
    assert config.dlrm.bottom_mlp_dims == (8, 4)


def test_uniform_vocab_size_replaces_the_list(tmp_path):
    path = _write(tmp_path, "num_sparse=3\nvocab_sizes=7,5,11\n")
    assert load_config(path).dlrm.vocab_sizes == (7, 5, 11)
    assert load_config(path, overrides={"vocab_size": 20}).dlrm.vocab_sizes == (20, 20, 20)
    assert build_config({"num_sparse": 2}).dlrm.vocab_sizes == (1000, 1000)


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown configuration key"):
        read_config_file(_write(tmp_path, "roundz=3\n"))
    with pytest.raises(ConfigError):
        load_config(overrides={"roundz": 3})


def test_bad_values_name_the_key(tmp_path):
    with pytest.raises(ConfigError, match="rounds"):
        parse_settings({"rounds": "many"}, "test")
    with pytest.raises(ConfigError, match="channel_mode"):
        parse_settings({"channel_mode": "sgx"}, "test")
    with pytest.raises(ConfigError, match="allowed_measurements"):
        parse_settings({"allowed_measurements": "abcd"}, "test")
    with pytest.raises(ConfigError, match="log_level"):
        parse_settings({"log_level": "chatty"}, "test")
    with pytest.raises(ConfigError, match="precision"):
        parse_settings({"precision": "float16"}, "test")


def test_precision_key(tmp_path):
    assert RunConfig().precision == "float32"
    assert load_config(_write(tmp_path, "precision=FLOAT64\n")).precision == "float64"
    sender = replace(RunConfig(), precision="float64")
    assert RunConfig().with_transfer(sender.transfer_text()).precision == "float64"


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.conf")


def test_environment_prefix():
    settings = environment_settings({"EFL_PS_ADDR": "ps:9", "EFL_CHANNEL_MODE": "native", "PS_ADDR": "x:1"})
    assert settings == {"ps_addr": "ps:9", "channel_mode": ChannelMode.NATIVE}


@pytest.mark.parametrize(
    "changes",
    [
        {"num_workers": 0},
        {"rounds": 0},
        {"local_batch_size": 0},
        {"worker_index": 4},
        {"round_timeout": 0.0},
        {"handshake_timeout": float("inf")},
        {"mode": Mode.SDT, "chief_addr": ""},
        {"ps_addr": ""},
        {"precision": "float16"},
    ],
)
def test_validation(changes):
    with pytest.raises(ConfigError):
        replace(RunConfig(), **changes).validate()


def test_rounds_zero_from_a_file_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="rounds"):
        load_config(_write(tmp_path, "rounds=0\n"))


def test_text_round_trip(tmp_path, run_config):
    text = run_config.to_text(exclude=("authority_key",))
    path = _write(tmp_path, text)
    assert load_config(path) == run_config


def test_transfer_carries_training_settings_only(run_config):
    text = run_config.transfer_text()
    assert [line.split("=")[0] for line in text.splitlines()] == list(TRANSFER_KEYS)
    receiver = replace(RunConfig(), worker_index=1, ps_addr="ps:9", authority=run_config.authority)
    adopted = receiver.with_transfer(text)
    assert adopted.dlrm == run_config.dlrm
    assert adopted.rounds == run_config.rounds
    assert adopted.worker_index == 1
    assert adopted.ps_addr == "ps:9"
    assert adopted.authority is run_config.authority
    with pytest.raises(ConfigError, match="non-training"):
        receiver.with_transfer(text + "ps_addr=evil:1\n")


def test_effective_digest_ignores_excluded_keys(run_config):
    attested = replace(run_config, channel_mode=ChannelMode.ATTESTED)
    assert run_config.effective_digest() != attested.effective_digest()
    assert run_config.effective_digest(exclude=("channel_mode",)) == attested.effective_digest(exclude=("channel_mode",))


def test_measurement_follows_build_and_manifest(run_config):
    assert run_config.manifest() == b"mode=hfl\nnum_workers=2\n"
    assert replace(run_config, rounds=50).measurement() == run_config.measurement()
    assert replace(run_config, num_workers=3).measurement() != run_config.measurement()
    assert replace(run_config, build_id="other").measurement() != run_config.measurement()


def test_native_mode_has_no_identity(run_config):
    assert run_config.identity() is None
    assert run_config.policy() is None


def test_attested_identity_and_policy(tmp_path, authority):
    key = authority.save(tmp_path / "authority.pem")
    config = replace(RunConfig(), authority_key=str(key)).with_authority()
    assert config.authority.public_bytes() == authority.public_bytes()
    assert config.identity().measurement == config.measurement()
    assert config.policy().allowed_measurements == frozenset({config.measurement()})

    other = bytes(range(32))
    pinned = replace(config, allowed_measurements=(other,))
    assert pinned.policy().allowed_measurements == frozenset({other})


def test_attested_mode_without_a_key_is_a_config_error():
    with pytest.raises(ConfigError, match="keygen"):
        RunConfig().with_authority()
    assert replace(RunConfig(), channel_mode=ChannelMode.NATIVE).with_authority().authority is None
    given = Authority.generate()
    assert replace(RunConfig(), authority=given).with_authority().authority is given


@pytest.mark.parametrize("name, mode", [("local_hfl.conf", Mode.HFL), ("local_sdt.conf", Mode.SDT)])
def test_shipped_configs_load(name, mode):
    assets = Path(__file__).resolve().parent.parent / "assets"
    config = load_config(assets / name, environ={})
    assert config.mode is mode
    assert config.channel_mode is ChannelMode.ATTESTED
    assert config.num_workers == 4
