"""Session handling: authentication gate, pin writes, liveness."""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field

from ..errors import MalformedBody, ProtocolError
from ..wire_protocol import (
    Command,
    ProtocolMessage,
    Status,
    StreamDecoder,
    encode_message,
    parse_hardware_body,
)
from .store import HistoryEntry, PinRecord, PinStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BrokerConfig:
    token_table: dict[str, str]
    listen_address: str = "127.0.0.1:8442"
    http_listen_address: str = "127.0.0.1:8080"
    history_path: str | None = None
    heartbeat_timeout_ms: int = 30_000

    def __post_init__(self) -> None:
        ids = list(self.token_table.values())
        if len(set(ids)) != len(ids):
            raise ValueError("device ids in token_table must be unique")
        if self.heartbeat_timeout_ms <= 0:
            raise ValueError("heartbeat_timeout_ms must be positive")


@dataclass
class DeviceSession:
    session_id: int
    device_id: str | None = None
    authenticated: bool = False
    last_seen_ms: int | None = None
    decoder: StreamDecoder = field(default_factory=StreamDecoder)


@dataclass(frozen=True)
class PinWrite:
    device_id: str
    pin: int
    value: str
    timestamp_ms: int


@dataclass
class Outcome:
    responses: list[ProtocolMessage] = field(default_factory=list)
    writes: list[PinWrite] = field(default_factory=list)
    close: bool = False


def handle_message(session: DeviceSession, msg: ProtocolMessage, now_ms: int, token_table: dict[str, str]) -> Outcome:
    """Apply one decoded message to ``session``.

    Returns responses to send, pin writes to persist, and whether the
    connection must be closed. The store is not touched here.
    """
    session.last_seen_ms = now_ms
    if msg.command is Command.LOGIN:
        device_id = token_table.get(msg.body.decode("utf-8", "replace"))
        if device_id is None:
            return Outcome([ProtocolMessage.response(msg.message_id, Status.INVALID_TOKEN)], close=True)
        session.device_id = device_id
        session.authenticated = True
        return Outcome([ProtocolMessage.response(msg.message_id, Status.OK)])

    if not session.authenticated:
        return Outcome([ProtocolMessage.response(msg.message_id, Status.ILLEGAL_COMMAND)], close=True)

    if msg.command is Command.PING:
        return Outcome([ProtocolMessage.response(msg.message_id, Status.OK)])
    if msg.command is Command.HW:
        try:
            hw = parse_hardware_body(msg.body)
        except MalformedBody:
            return Outcome([ProtocolMessage.response(msg.message_id, Status.ILLEGAL_COMMAND)], close=True)
        return Outcome(writes=[PinWrite(session.device_id, hw.pin, hw.value, now_ms)])
    # RSP from a device is meaningless here
    return Outcome([ProtocolMessage.response(msg.message_id, Status.ILLEGAL_COMMAND)], close=True)


class Broker:
    """Transport-independent broker state.

    Connection handlers call :meth:`open_session`, then :meth:`receive` with
    each inbound chunk, and write back whatever octets it returns.
    """

    def __init__(self, config: BrokerConfig, clock, store: PinStore | None = None) -> None:
        self.config = config
        self.clock = clock
        self.store = store if store is not None else PinStore(config.history_path)
        self._ids = itertools.count(1)
        self._last_seen: dict[str, int] = {}
        self._seen_lock = threading.Lock()

    def open_session(self) -> DeviceSession:
        return DeviceSession(next(self._ids))

    def receive(self, session: DeviceSession, data: bytes) -> tuple[bytes, bool]:
        """Feed inbound octets. Returns (octets to send back, close connection)."""
        try:
            messages = session.decoder.feed(data)
        except ProtocolError as exc:
            log.warning("session=%d event=protocol_error error=%s", session.session_id, exc)
            return b"", True
        out = []
        for msg in messages:
            outcome = self.process(session, msg)
            out.extend(encode_message(r) for r in outcome.responses)
            if outcome.close:
                return b"".join(out), True
        return b"".join(out), False

    def process(self, session: DeviceSession, msg: ProtocolMessage) -> Outcome:
        now = self.clock.now_ms()
        outcome = handle_message(session, msg, now, self.config.token_table)
        if session.authenticated:
            with self._seen_lock:
                self._last_seen[session.device_id] = now
        for w in outcome.writes:
            self.store.write(w.device_id, w.pin, w.value, w.timestamp_ms)
        if msg.command is Command.LOGIN:
            log.info("session=%d event=login device=%s ok=%s", session.session_id, session.device_id, not outcome.close)
        elif outcome.close:
            log.info("session=%d event=rejected command=%s", session.session_id, msg.command.name)
        return outcome

    def get_latest(self, device_id: str, pin: int) -> PinRecord:
        return self.store.get_latest(device_id, pin, self.clock.now_ms(), self.config.heartbeat_timeout_ms)

    def get_history(self, device_id: str, pin: int, from_ms: int, to_ms: int) -> list[HistoryEntry]:
        return self.store.get_history(device_id, pin, from_ms, to_ms)

    def list_devices(self, now_ms: int | None = None) -> list[tuple[str, bool, int]]:
        now = self.clock.now_ms() if now_ms is None else now_ms
        with self._seen_lock:
            seen_by_device = sorted(self._last_seen.items())
        return [(device, now - seen <= self.config.heartbeat_timeout_ms, seen) for device, seen in seen_by_device]

    def known_device(self, device_id: str) -> bool:
        with self._seen_lock:
            if device_id in self._last_seen:
                return True
        return device_id in self.store.devices()

