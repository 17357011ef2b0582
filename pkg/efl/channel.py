"""
Attested secure channel over a reliable byte stream.

Wire unit: u32 little-endian body length | u8 tag | body.

Attested handshake (connecting side = client):
    client -> HELLO  version | mode | X25519 public key | quote(report_data = H(public key))
    server verifies the client quote, then answers with its own HELLO
    client verifies the server quote
    both derive keys with HKDF over the X25519 secret, salted by H(transcript)
    both send FINISHED = HMAC(finished key, H(transcript)) and check the peer's

Records are ChaCha20-Poly1305 sealed with nonce = direction (u32) | counter (u64)
and associated data = direction (u8) | counter (u64). Native mode exchanges
the HELLO version/mode bytes only and sends records in the clear.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import constant_time, hashes, hmac, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from attest import QUOTE_SIZE, EnclaveIdentity, Quote, VerifyPolicy, report_data_for, verify_quote
from errors import (
    AttestationError,
    BadSignature,
    ChannelAborted,
    ChannelClosed,
    ChannelError,
    EncodingError,
    HandshakeError,
    MeasurementMismatch,
    PayloadTooLarge,
    ReportDataMismatch,
)
from transport import Stream

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 0x01
MAX_PAYLOAD = 16 * 1024 * 1024
AEAD_TAG_SIZE = 16
DEFAULT_HANDSHAKE_TIMEOUT = 10.0
MAX_COUNTER = 2**64 - 1

FRAME_HEADER = struct.Struct("<IB")
KEY_SIZE = 32

TAG_HELLO = 0x01
TAG_FINISHED = 0x02
TAG_ALERT = 0x15
TAG_DATA = 0x17

CLIENT_TO_SERVER = 0x01
SERVER_TO_CLIENT = 0x02


class ChannelMode(str, enum.Enum):
    ATTESTED = "attested"
    NATIVE = "native"


_MODE_BYTES = {ChannelMode.NATIVE: 0x00, ChannelMode.ATTESTED: 0x01}


class AlertCode(enum.IntEnum):
    VERSION_MISMATCH = 1
    MODE_MISMATCH = 2
    BAD_SIGNATURE = 3
    MEASUREMENT_MISMATCH = 4
    REPORT_DATA_MISMATCH = 5
    TRANSCRIPT_MISMATCH = 6
    MALFORMED = 7


_ATTESTATION_ALERTS = {
    BadSignature: AlertCode.BAD_SIGNATURE,
    MeasurementMismatch: AlertCode.MEASUREMENT_MISMATCH,
    ReportDataMismatch: AlertCode.REPORT_DATA_MISMATCH,
}


@dataclass
class SessionKeys:
    send_key: bytes
    recv_key: bytes
    send_counter: int = 0
    recv_counter: int = 0


# ========================================
# Framing
# ========================================

def write_frame(stream: Stream, tag: int, body: bytes) -> bytes:
    frame = FRAME_HEADER.pack(len(body), tag) + body
    stream.send_all(frame)
    return frame


def read_frame(stream: Stream, max_body: int) -> tuple[int, bytes, bytes]:
    """Return (tag, body, raw frame bytes)."""
    header = stream.recv_exactly(FRAME_HEADER.size)
    length, tag = FRAME_HEADER.unpack(header)
    if length > max_body:
        raise ChannelAborted(f"frame of {length} bytes exceeds limit {max_body}")
    body = stream.recv_exactly(length) if length else b""
    return tag, body, header + body


def _send_alert(stream: Stream, code: AlertCode) -> None:
    try:
        write_frame(stream, TAG_ALERT, struct.pack("<H", int(code)))
    except ChannelError:
        pass


# ========================================
# Secure channel
# ========================================

class SecureChannel:
    """Framed record layer. One sender and one receiver may run concurrently."""

    def __init__(
        self,
        stream: Stream,
        mode: ChannelMode,
        *,
        initiator: bool,
        keys: Optional[SessionKeys] = None,
        transcript_digest: bytes = b"",
        handshake_seconds: float = 0.0,
    ):
        if mode is ChannelMode.ATTESTED and keys is None:
            raise ValueError("attested channel needs session keys")
        self._stream = stream
        self.mode = mode
        self.keys = keys
        self.transcript_digest = transcript_digest
        self.handshake_seconds = handshake_seconds
        self._send_direction = CLIENT_TO_SERVER if initiator else SERVER_TO_CLIENT
        self._recv_direction = SERVER_TO_CLIENT if initiator else CLIENT_TO_SERVER
        self._send_aead = ChaCha20Poly1305(keys.send_key) if keys else None
        self._recv_aead = ChaCha20Poly1305(keys.recv_key) if keys else None
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._failure: Optional[str] = None
        self.bytes_sent = 0
        self.bytes_received = 0

    @property
    def is_open(self) -> bool:
        return self._failure is None

    def settimeout(self, timeout: Optional[float]) -> None:
        self._stream.timeout = timeout

    def _check_open(self) -> None:
        if self._failure is not None:
            raise ChannelClosed(f"channel unusable: {self._failure}")

    def _abort(self, reason: str) -> None:
        if self._failure is None:
            self._failure = reason
            logger.warning("channel aborted: %s", reason)
        self._stream.close()

    def close(self) -> None:
        if self._failure is None:
            self._failure = "closed"
        self._stream.close()

    @staticmethod
    def _nonce(direction: int, counter: int) -> tuple[bytes, bytes]:
        return struct.pack("<IQ", direction, counter), struct.pack("<BQ", direction, counter)

    def send(self, payload: bytes) -> None:
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        with self._send_lock:
            self._check_open()
            body = payload
            if self._send_aead is not None:
                counter = self.keys.send_counter
                if counter >= MAX_COUNTER:
                    self._abort("send counter exhausted")
                    raise ChannelAborted("send counter exhausted")
                nonce, ad = self._nonce(self._send_direction, counter)
                body = self._send_aead.encrypt(nonce, bytes(payload), ad)
                self.keys.send_counter = counter + 1
            try:
                frame = write_frame(self._stream, TAG_DATA, body)
            except ChannelError as e:
                self._abort(str(e))
                raise
            self.bytes_sent += len(frame)

    def recv(self) -> bytes:
        with self._recv_lock:
            self._check_open()
            limit = MAX_PAYLOAD + (AEAD_TAG_SIZE if self._recv_aead is not None else 0)
            try:
                tag, body, raw = read_frame(self._stream, limit)
            except ChannelError as e:
                self._abort(str(e))
                raise
            self.bytes_received += len(raw)
            if tag == TAG_ALERT:
                self._abort("peer alert")
                raise ChannelAborted("peer sent an alert")
            if tag != TAG_DATA:
                self._abort(f"unexpected frame tag {tag:#x}")
                raise ChannelAborted(f"unexpected frame tag {tag:#x}")
            if self._recv_aead is None:
                return body
            counter = self.keys.recv_counter
            nonce, ad = self._nonce(self._recv_direction, counter)
            try:
                payload = self._recv_aead.decrypt(nonce, body, ad)
            except InvalidTag:
                self._abort(f"record {counter} failed authentication")
                raise ChannelAborted(f"record {counter} failed authentication") from None
            self.keys.recv_counter = counter + 1
            return payload


# ========================================
# Handshake
# ========================================

def _public_bytes(key: X25519PublicKey) -> bytes:
    return key.public_bytes(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)


def _hello_body(mode: ChannelMode, public_key: bytes, identity: Optional[EnclaveIdentity]) -> bytes:
    body = bytes([PROTOCOL_VERSION, _MODE_BYTES[mode]])
    if mode is ChannelMode.ATTESTED:
        body += public_key + identity.quote_for(public_key).encode()
    return body


def _parse_hello(stream: Stream, mode: ChannelMode, tag: int, body: bytes):
    """Return (peer public key bytes, peer quote) or raise after alerting."""
    if tag == TAG_ALERT:
        code = struct.unpack("<H", body)[0] if len(body) == 2 else int(AlertCode.MALFORMED)
        raise HandshakeError("peer refused the handshake", code)
    if tag != TAG_HELLO or len(body) < 2:
        _send_alert(stream, AlertCode.MALFORMED)
        raise HandshakeError("expected a hello message", AlertCode.MALFORMED)
    if body[0] != PROTOCOL_VERSION:
        _send_alert(stream, AlertCode.VERSION_MISMATCH)
        raise HandshakeError(f"protocol version {body[0]:#04x} not supported", AlertCode.VERSION_MISMATCH)
    if body[1] != _MODE_BYTES[mode]:
        _send_alert(stream, AlertCode.MODE_MISMATCH)
        raise HandshakeError("peer uses a different channel mode", AlertCode.MODE_MISMATCH)
    if mode is ChannelMode.NATIVE:
        if len(body) != 2:
            _send_alert(stream, AlertCode.MALFORMED)
            raise HandshakeError("malformed native hello", AlertCode.MALFORMED)
        return b"", None
    if len(body) != 2 + KEY_SIZE + QUOTE_SIZE:
        _send_alert(stream, AlertCode.MALFORMED)
        raise HandshakeError("malformed attested hello", AlertCode.MALFORMED)
    public_key = body[2:2 + KEY_SIZE]
    try:
        quote = Quote.decode(body[2 + KEY_SIZE:])
    except EncodingError as e:
        _send_alert(stream, AlertCode.MALFORMED)
        raise HandshakeError(str(e), AlertCode.MALFORMED) from e
    return public_key, quote


def _verify_peer(stream: Stream, policy: VerifyPolicy, public_key: bytes, quote: Quote) -> None:
    try:
        verify_quote(policy, quote, report_data_for(public_key))
    except AttestationError as e:
        _send_alert(stream, _ATTESTATION_ALERTS.get(type(e), AlertCode.MALFORMED))
        raise


def _derive(shared: bytes, transcript_digest: bytes) -> tuple[bytes, bytes, bytes, bytes]:
    material = HKDF(
        algorithm=hashes.SHA256(),
        length=4 * KEY_SIZE,
        salt=transcript_digest,
        info=b"efl channel v1",
    ).derive(shared)
    return tuple(material[i * KEY_SIZE:(i + 1) * KEY_SIZE] for i in range(4))  # type: ignore[return-value]


def _finished_mac(key: bytes, transcript_digest: bytes) -> bytes:
    mac = hmac.HMAC(key, hashes.SHA256())
    mac.update(transcript_digest)
    return mac.finalize()


def handshake(
    stream: Stream,
    identity: Optional[EnclaveIdentity],
    policy: Optional[VerifyPolicy],
    mode: ChannelMode = ChannelMode.ATTESTED,
    *,
    initiator: bool,
    timeout: Optional[float] = DEFAULT_HANDSHAKE_TIMEOUT,
) -> SecureChannel:
    """Establish a channel; on any failure the stream is closed and the error re-raised."""
    mode = ChannelMode(mode)
    if mode is ChannelMode.ATTESTED and (identity is None or policy is None):
        raise ValueError("attested mode needs an identity and a policy")
    started = time.perf_counter()
    stream.timeout = timeout
    ephemeral = X25519PrivateKey.generate()
    own_public = _public_bytes(ephemeral.public_key())
    limit = 2 + KEY_SIZE + QUOTE_SIZE

    try:
        if initiator:
            own_frame = write_frame(stream, TAG_HELLO, _hello_body(mode, own_public, identity))
            tag, body, peer_frame = read_frame(stream, limit)
            peer_public, peer_quote = _parse_hello(stream, mode, tag, body)
            if mode is ChannelMode.ATTESTED:
                _verify_peer(stream, policy, peer_public, peer_quote)
            transcript = own_frame + peer_frame
        else:
            tag, body, peer_frame = read_frame(stream, limit)
            peer_public, peer_quote = _parse_hello(stream, mode, tag, body)
            if mode is ChannelMode.ATTESTED:
                _verify_peer(stream, policy, peer_public, peer_quote)
            own_frame = write_frame(stream, TAG_HELLO, _hello_body(mode, own_public, identity))
            transcript = peer_frame + own_frame

        transcript_digest = hashlib.sha256(transcript).digest()
        if mode is ChannelMode.NATIVE:
            stream.timeout = None
            return SecureChannel(
                stream, mode, initiator=initiator, transcript_digest=transcript_digest,
                handshake_seconds=time.perf_counter() - started,
            )

        try:
            shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as e:
            _send_alert(stream, AlertCode.MALFORMED)
            raise HandshakeError("unusable peer key share", AlertCode.MALFORMED) from e
        c2s_key, s2c_key, c2s_fin, s2c_fin = _derive(shared, transcript_digest)
        own_fin, peer_fin = (c2s_fin, s2c_fin) if initiator else (s2c_fin, c2s_fin)

        write_frame(stream, TAG_FINISHED, _finished_mac(own_fin, transcript_digest))
        tag, body, _ = read_frame(stream, 32)
        if tag == TAG_ALERT:
            code = struct.unpack("<H", body)[0] if len(body) == 2 else int(AlertCode.MALFORMED)
            raise HandshakeError("peer refused the handshake", code)
        if tag != TAG_FINISHED or not constant_time.bytes_eq(body, _finished_mac(peer_fin, transcript_digest)):
            _send_alert(stream, AlertCode.TRANSCRIPT_MISMATCH)
            raise HandshakeError("transcript mismatch", AlertCode.TRANSCRIPT_MISMATCH)
    except (ChannelError, AttestationError):
        stream.close()
        raise

    keys = SessionKeys(
        send_key=c2s_key if initiator else s2c_key,
        recv_key=s2c_key if initiator else c2s_key,
    )
    stream.timeout = None
    elapsed = time.perf_counter() - started
    logger.debug("attested handshake complete in %.1f ms", elapsed * 1000)
    return SecureChannel(
        stream, mode, initiator=initiator, keys=keys,
        transcript_digest=transcript_digest, handshake_seconds=elapsed,
    )
