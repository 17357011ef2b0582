"""
Exception hierarchy shared by every module in the training framework.
"""


class EflError(Exception):
    """Base class for all framework errors."""


class ConfigError(EflError):
    """Inconsistent or missing configuration."""


class ShapeError(EflError):
    """Array or vector shapes do not line up."""


class CacheError(EflError):
    """A forward cache was used with parameters it was not produced from."""


class NumericError(EflError):
    """A parameter update produced NaN or Inf."""


class ShardError(EflError):
    """A dataset cannot be split as requested."""


class FormatError(EflError):
    """Malformed dataset file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class EncodingError(EflError):
    """A value cannot be encoded (wrong length, wrong type)."""


class DecodeError(EflError):
    """Malformed protocol message."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class AggregationError(EflError):
    """Gradients cannot be combined."""


class ParityError(EflError):
    """Native and attested runs disagree on training math."""


# ========================================
# Attestation
# ========================================

class AttestationError(EflError):
    """Quote verification failed."""


class BadSignature(AttestationError):
    """The quote was not signed by the trusted authority."""


class MeasurementMismatch(AttestationError):
    """The quoted measurement is not in the verifier's policy."""


class ReportDataMismatch(AttestationError):
    """The quote is bound to a different public key."""


# ========================================
# Channel
# ========================================

class ChannelError(EflError):
    """Transport or record-layer failure."""


class HandshakeError(ChannelError):
    """Handshake refused; `code` is the alert code sent or received."""

    def __init__(self, message: str, code: int):
        super().__init__(f"{message} (alert {code})")
        self.code = code


class ChannelTimeout(ChannelError):
    """No data arrived within the configured timeout."""


class ChannelAborted(ChannelError):
    """The channel detected tampering or truncation and is unusable."""


class ChannelClosed(ChannelError):
    """The channel or its underlying stream is closed."""


class PayloadTooLarge(ChannelError):
    """Payload exceeds the frame limit; the channel stays usable."""


# ========================================
# Protocol
# ========================================

class ProtocolAbort(EflError):
    """A protocol violation ends the run."""

    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"abort {int(code)}: {detail}")
        self.code = code
        self.detail = detail
