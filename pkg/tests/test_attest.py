import numpy as np
import pytest

from attest import (
    QUOTE_SIZE,
    Authority,
    Quote,
    VerifyPolicy,
    gen_quote,
    measure,
    report_data_for,
    verify_quote,
)
from errors import (
    BadSignature,
    ConfigError,
    EncodingError,
    MeasurementMismatch,
    ReportDataMismatch,
)

KEY = b"\x42" * 32


def test_measure_is_length_prefixed():
    assert measure(b"ab", b"c") != measure(b"a", b"bc")
    assert measure(b"build", b"cfg") == measure(b"build", b"cfg")
    assert len(measure(b"", b"")) == 32


def test_valid_quote_verifies(identity, policy):
    quote = identity.quote_for(KEY)
    assert quote.report_data == report_data_for(KEY)
    verify_quote(policy, quote, report_data_for(KEY))


def test_two_quotes_for_one_key_both_verify(authority, identity, policy):
    first = gen_quote(authority, identity.measurement, report_data_for(KEY))
    second = gen_quote(authority, identity.measurement, report_data_for(KEY))
    verify_quote(policy, first, report_data_for(KEY))
    verify_quote(policy, second, report_data_for(KEY))
    verify_quote(policy, identity.quote_for(KEY), report_data_for(KEY))


def test_quote_encoding(identity):
    quote = identity.quote_for(KEY)
    data = quote.encode()
    assert len(data) == QUOTE_SIZE == 128
    assert Quote.decode(data) == quote
    with pytest.raises(EncodingError):
        Quote.decode(data[:-1])


def test_foreign_authority_is_a_bad_signature(identity, policy):
    forged = gen_quote(Authority.generate(), identity.measurement, report_data_for(KEY))
    with pytest.raises(BadSignature):
        verify_quote(policy, forged, report_data_for(KEY))


def test_tampered_measurement_breaks_the_signature(identity, policy):
    quote = identity.quote_for(KEY)
    flipped = bytes([quote.measurement[0] ^ 1]) + quote.measurement[1:]
    with pytest.raises(BadSignature):
        verify_quote(policy, Quote(flipped, quote.report_data, quote.signature), report_data_for(KEY))


def test_unknown_measurement_is_refused(authority, policy):
    rogue = gen_quote(authority, measure(b"rogue", b""), report_data_for(KEY))
    with pytest.raises(MeasurementMismatch):
        verify_quote(policy, rogue, report_data_for(KEY))


def test_quote_bound_to_another_key_is_refused(identity, policy):
    quote = identity.quote_for(KEY)
    with pytest.raises(ReportDataMismatch):
        verify_quote(policy, quote, report_data_for(b"\x43" * 32))


def test_signature_is_checked_before_policy(authority):
    # a foreign signature over an unlisted measurement must report the signature
    policy = VerifyPolicy(authority.public_key, frozenset({measure(b"other", b"")}))
    quote = gen_quote(Authority.generate(), measure(b"rogue", b""), report_data_for(KEY))
    with pytest.raises(BadSignature):
        verify_quote(policy, quote, report_data_for(KEY))


def test_gen_quote_checks_lengths(authority):
    with pytest.raises(EncodingError):
        gen_quote(authority, b"short", report_data_for(KEY))
    with pytest.raises(EncodingError):
        gen_quote(authority, measure(b"x", b""), b"short")


def test_empty_policy_is_a_config_error(authority):
    with pytest.raises(ConfigError):
        VerifyPolicy(authority.public_key, frozenset())


def test_authority_key_file(tmp_path, identity):
    path = identity.authority.save(tmp_path / "authority.pem")
    loaded = Authority.load(path)
    assert loaded.public_bytes() == identity.authority.public_bytes()
    policy = VerifyPolicy(loaded.public_key, frozenset({identity.measurement}))
    verify_quote(policy, gen_quote(loaded, identity.measurement, report_data_for(KEY)), report_data_for(KEY))
    with pytest.raises(ConfigError):
        Authority.load(tmp_path / "missing.pem")


def test_authority_from_seed_is_deterministic():
    a = Authority.from_private_bytes(b"\x01" * 32)
    b = Authority.from_private_bytes(b"\x01" * 32)
    assert a.public_bytes() == b.public_bytes()
    with pytest.raises(EncodingError):
        Authority.from_private_bytes(b"\x01" * 31)


def test_mutated_signatures_are_always_rejected(identity, policy):
    rng = np.random.default_rng(11)
    quote = identity.quote_for(KEY)
    expected = report_data_for(KEY)
    for _ in range(10_000):
        signature = bytearray(quote.signature)
        for position in rng.choice(len(signature), size=int(rng.integers(1, 4)), replace=False):
            signature[position] ^= int(rng.integers(1, 256))
        with pytest.raises(BadSignature):
            verify_quote(policy, Quote(quote.measurement, quote.report_data, bytes(signature)), expected)
