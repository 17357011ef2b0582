import os
import sys

import numpy as np
import pytest

# Add the package directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "efl"))

from attest import Authority, EnclaveIdentity, VerifyPolicy, measure
from channel import ChannelMode
from datagen import SyntheticSpec, generate
from dlrm import DlrmConfig
from run_config import RunConfig

TINY_VOCAB = (7, 5, 11)


def tiny_dlrm(seed: int = 3) -> DlrmConfig:
    return DlrmConfig(
        num_dense=4,
        num_sparse=3,
        vocab_sizes=TINY_VOCAB,
        embed_dim=4,
        bottom_mlp_dims=(8, 4),
        top_mlp_dims=(8, 1),
        learning_rate=0.1,
        seed=seed,
    )


def tiny_spec(num_samples: int = 200, seed: int = 5) -> SyntheticSpec:
    return SyntheticSpec(num_samples=num_samples, seed=seed, vocab_sizes=TINY_VOCAB, num_dense=4, num_sparse=3)


@pytest.fixture
def tiny_config() -> DlrmConfig:
    return tiny_dlrm()


@pytest.fixture
def tiny_dataset():
    return generate(tiny_spec())


@pytest.fixture
def authority() -> Authority:
    return Authority.generate()


@pytest.fixture
def identity(authority) -> EnclaveIdentity:
    return EnclaveIdentity(measure(b"efl-test", b"mode=hfl\n"), authority)


@pytest.fixture
def policy(authority, identity) -> VerifyPolicy:
    return VerifyPolicy(authority.public_key, frozenset({identity.measurement}))


@pytest.fixture
def run_config(tiny_config, authority) -> RunConfig:
    return RunConfig(
        num_workers=2,
        rounds=3,
        local_batch_size=16,
        dlrm=tiny_config,
        channel_mode=ChannelMode.NATIVE,
        authority=authority,
        samples=200,
        data_seed=5,
        ps_addr="ps:1",
        chief_addr="chief:1",
        handshake_timeout=5.0,
        round_timeout=10.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
