"""Binary framing for the device <-> broker link.

Every message is a 5-octet big-endian header followed by the body::

    command[1B] | message_id[2B] | body_length[2B] | body[body_length]

Hardware writes carry ``vw``, the pin and the value as NUL-joined ASCII.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass
from decimal import Decimal

from .errors import BodyTooLarge, MalformedBody, UnknownCommand, ZeroMessageId

HEADER = struct.Struct(">BHH")
HEADER_SIZE = HEADER.size
MAX_BODY = 1024
MAX_MESSAGE_ID = 0xFFFF
MAX_PIN = 255

_VALUE_RE = re.compile(r"-?[0-9]+(\.[0-9]+)?")
_PIN_RE = re.compile(r"[0-9]{1,3}")


class Command(enum.IntEnum):
    RSP = 0
    LOGIN = 2
    PING = 6
    HW = 20


class Status(enum.IntEnum):
    OK = 200
    ILLEGAL_COMMAND = 2
    INVALID_TOKEN = 9


_COMMANDS = frozenset(int(c) for c in Command)


@dataclass(frozen=True)
class ProtocolMessage:
    command: Command
    message_id: int
    body: bytes = b""

    @classmethod
    def response(cls, message_id: int, status: Status) -> ProtocolMessage:
        return cls(Command.RSP, message_id, struct.pack(">H", status))

    @classmethod
    def login(cls, message_id: int, token: str) -> ProtocolMessage:
        return cls(Command.LOGIN, message_id, token.encode("utf-8"))

    @classmethod
    def ping(cls, message_id: int) -> ProtocolMessage:
        return cls(Command.PING, message_id)

    @classmethod
    def hardware(cls, message_id: int, pin: int, value: str) -> ProtocolMessage:
        return cls(Command.HW, message_id, HardwareBody("vw", pin, value).to_bytes())

    @property
    def status(self) -> int:
        """Status code carried by an RSP body."""
        if self.command is not Command.RSP or len(self.body) != 2:
            raise ValueError("not a status response")
        return struct.unpack(">H", self.body)[0]


def encode_message(msg: ProtocolMessage) -> bytes:
    if msg.message_id == 0:
        raise ZeroMessageId()
    if not 0 < msg.message_id <= MAX_MESSAGE_ID:
        raise ValueError(f"message id {msg.message_id} does not fit 16 bits")
    if len(msg.body) > MAX_BODY:
        raise BodyTooLarge(len(msg.body))
    if int(msg.command) not in _COMMANDS:
        raise UnknownCommand(int(msg.command))
    return HEADER.pack(msg.command, msg.message_id, len(msg.body)) + bytes(msg.body)


def decode_stream(buffer: bytes) -> tuple[list[ProtocolMessage], bytes]:
    """Split ``buffer`` into complete messages plus the unconsumed tail.

    A truncated trailing message is returned as the remainder, never as an
    error. Raises :class:`UnknownCommand`, :class:`BodyTooLarge` or
    :class:`ZeroMessageId` as soon as a header is readable and invalid; the
    caller is expected to drop the connection.
    """
    messages = []
    view = memoryview(buffer)
    pos = 0
    while len(view) - pos >= HEADER_SIZE:
        command, message_id, length = HEADER.unpack_from(view, pos)
        if command not in _COMMANDS:
            raise UnknownCommand(command)
        if length > MAX_BODY:
            raise BodyTooLarge(length)
        if message_id == 0:
            raise ZeroMessageId()
        end = pos + HEADER_SIZE + length
        if end > len(view):
            break
        messages.append(ProtocolMessage(Command(command), message_id, bytes(view[pos + HEADER_SIZE:end])))
        pos = end
    return messages, bytes(view[pos:])


class StreamDecoder:
    """Incremental decoder owning one connection's receive buffer."""

    def __init__(self) -> None:
        self._buffer = b""

    def feed(self, data: bytes) -> list[ProtocolMessage]:
        messages, self._buffer = decode_stream(self._buffer + data)
        return messages

    @property
    def pending(self) -> int:
        return len(self._buffer)


@dataclass(frozen=True)
class HardwareBody:
    verb: str
    pin: int
    value: str

    def to_bytes(self) -> bytes:
        return b"\x00".join((self.verb.encode("ascii"), str(self.pin).encode("ascii"), self.value.encode("ascii")))

    @property
    def number(self) -> Decimal:
        return Decimal(self.value)


def parse_hardware_body(body: bytes) -> HardwareBody:
    parts = bytes(body).split(b"\x00")
    if len(parts) != 3:
        raise MalformedBody(f"expected 3 NUL-separated fields, got {len(parts)}")
    try:
        verb, pin_text, value = (p.decode("ascii") for p in parts)
    except UnicodeDecodeError as exc:
        raise MalformedBody("non-ASCII hardware body") from exc
    if verb != "vw":
        raise MalformedBody(f"unsupported verb {verb!r}")
    if not _PIN_RE.fullmatch(pin_text) or int(pin_text) > MAX_PIN:
        raise MalformedBody(f"bad pin {pin_text!r}")
    if not _VALUE_RE.fullmatch(value):
        raise MalformedBody(f"bad value {value!r}")
    return HardwareBody(verb, int(pin_text), value)


def format_tenths(value: float) -> str:
    """Render a 0.1-grid value with exactly one fractional digit, e.g. ``23.4``, ``-0.5``, ``56.0``."""
    n = round(value * 10)
    sign = "-" if n < 0 else ""
    n = abs(n)
    return f"{sign}{n // 10}.{n % 10}"
