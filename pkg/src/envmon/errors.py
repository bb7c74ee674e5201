"""Exception hierarchy shared across the station components."""

from __future__ import annotations


class EnvmonError(Exception):
    """Base class for all domain errors raised by this package."""


# sensor codec


class OutOfRange(EnvmonError, ValueError):
    """A reading or frame value lies outside the sensor's measurement span."""


class ChecksumMismatch(EnvmonError, ValueError):
    """The additive checksum octet does not match the four data octets."""

    def __init__(self, expected: int, actual: int) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"checksum mismatch: expected 0x{expected:02X}, got 0x{actual:02X}")


class TooSoon(EnvmonError):
    """The sensor was polled before its minimum sampling interval elapsed."""

    def __init__(self, wait_ms: int) -> None:
        self.wait_ms = wait_ms
        super().__init__(f"sensor not ready, retry in {wait_ms} ms")


class ReplayExhausted(EnvmonError):
    """A replay profile was asked for a time outside the recorded span."""


# wire protocol


class ProtocolError(EnvmonError):
    """Base for wire-level violations. The connection must be dropped."""


class UnknownCommand(ProtocolError):
    def __init__(self, code: int) -> None:
        self.code = code
        super().__init__(f"unknown command code 0x{code:02X}")


class BodyTooLarge(ProtocolError):
    def __init__(self, length: int) -> None:
        self.length = length
        super().__init__(f"body length {length} exceeds limit")


class ZeroMessageId(ProtocolError):
    def __init__(self) -> None:
        super().__init__("message id 0 is reserved")


class MalformedBody(ProtocolError):
    """A hardware message body could not be parsed."""


# device


class AuthRejected(EnvmonError):
    """The broker rejected the device token. Terminal: the token must be fixed."""


# broker


class NotFound(EnvmonError, LookupError):
    pass


class BadRange(EnvmonError, ValueError):
    pass


# analytics


class ZeroReference(EnvmonError, ZeroDivisionError):
    """Percentage error is undefined against a zero reference."""


class EmptyOverlap(EnvmonError):
    """No measured point could be aligned with any reference point."""


# configuration


class ConfigInvalid(EnvmonError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None) -> None:
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
