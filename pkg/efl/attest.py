"""
Simulated enclave attestation.

An attestation authority (the stand-in for the hardware root of trust) signs
quotes that bind an enclave measurement to 32 bytes of report data, which is
the SHA-256 of the key the enclave uses in its handshake. Verifiers check the
signature, then the measurement policy, then the key binding.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import constant_time, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from errors import (
    BadSignature,
    ConfigError,
    EncodingError,
    MeasurementMismatch,
    ReportDataMismatch,
)

logger = logging.getLogger(__name__)

MEASUREMENT_SIZE = 32
REPORT_DATA_SIZE = 32
SIGNATURE_SIZE = 64
QUOTE_SIZE = MEASUREMENT_SIZE + REPORT_DATA_SIZE + SIGNATURE_SIZE


def measure(build_id: bytes, config_bytes: bytes) -> bytes:
    """Digest identifying the code and configuration an enclave runs."""
    h = hashlib.sha256()
    h.update(struct.pack("<I", len(build_id)))
    h.update(build_id)
    h.update(config_bytes)
    return h.digest()


def report_data_for(public_key_bytes: bytes) -> bytes:
    return hashlib.sha256(public_key_bytes).digest()


class Authority:
    """Signing key of the attestation authority. Lives in memory only."""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._key = private_key
        self.public_key = private_key.public_key()

    @classmethod
    def generate(cls) -> "Authority":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_private_bytes(cls, seed: bytes) -> "Authority":
        if len(seed) != 32:
            raise EncodingError("authority seed must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def load(cls, path) -> "Authority":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"authority key not found: {path}")
        key = serialization.load_pem_private_key(path.read_bytes(), password=None)
        if not isinstance(key, Ed25519PrivateKey):
            raise ConfigError(f"{path} is not an Ed25519 private key")
        return cls(key)

    def save(self, path) -> Path:
        """Write the authority key as PEM (out-of-band provisioning only)."""
        path = Path(path)
        path.write_bytes(
            self._key.private_bytes(
                encoding=serialization.Encoding.PEM,
                format=serialization.PrivateFormat.PKCS8,
                encryption_algorithm=serialization.NoEncryption(),
            )
        )
        return path

    def public_bytes(self) -> bytes:
        return self.public_key.public_bytes(
            encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
        )

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)


@dataclass(frozen=True)
class Quote:
    measurement: bytes
    report_data: bytes
    signature: bytes

    def encode(self) -> bytes:
        return self.measurement + self.report_data + self.signature

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        if len(data) != QUOTE_SIZE:
            raise EncodingError(f"quote must be {QUOTE_SIZE} bytes, got {len(data)}")
        return cls(
            measurement=bytes(data[:MEASUREMENT_SIZE]),
            report_data=bytes(data[MEASUREMENT_SIZE:MEASUREMENT_SIZE + REPORT_DATA_SIZE]),
            signature=bytes(data[MEASUREMENT_SIZE + REPORT_DATA_SIZE:]),
        )


@dataclass(frozen=True)
class VerifyPolicy:
    authority_public_key: Ed25519PublicKey
    allowed_measurements: frozenset[bytes]

    def __post_init__(self):
        if not self.allowed_measurements:
            raise ConfigError("policy must allow at least one measurement")
        object.__setattr__(self, "allowed_measurements", frozenset(self.allowed_measurements))


def gen_quote(authority: Authority, measurement: bytes, report_data: bytes) -> Quote:
    if len(measurement) != MEASUREMENT_SIZE:
        raise EncodingError(f"measurement must be {MEASUREMENT_SIZE} bytes")
    if len(report_data) != REPORT_DATA_SIZE:
        raise EncodingError(f"report_data must be {REPORT_DATA_SIZE} bytes, got {len(report_data)}")
    signature = authority.sign(measurement + report_data)
    return Quote(measurement=bytes(measurement), report_data=bytes(report_data), signature=signature)


def verify_quote(policy: VerifyPolicy, quote: Quote, expected_report_data: bytes) -> None:
    """Return normally on acceptance; raise the first failing check otherwise."""
    try:
        policy.authority_public_key.verify(quote.signature, quote.measurement + quote.report_data)
    except InvalidSignature:
        raise BadSignature("quote signature does not verify under the authority key") from None
    if quote.measurement not in policy.allowed_measurements:
        raise MeasurementMismatch(f"measurement {quote.measurement.hex()[:16]}… not allowed")
    if not constant_time.bytes_eq(quote.report_data, bytes(expected_report_data)):
        raise ReportDataMismatch("quote is bound to a different handshake key")
    logger.debug("quote accepted for measurement %s…", quote.measurement.hex()[:16])


@dataclass(frozen=True)
class EnclaveIdentity:
    """A node's measurement plus the means to have it quoted."""

    measurement: bytes
    authority: Authority

    def quote_for(self, public_key_bytes: bytes) -> Quote:
        return gen_quote(self.authority, self.measurement, report_data_for(public_key_bytes))
