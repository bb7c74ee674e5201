"""Emulated station firmware.

:func:`step` is the whole firmware logic as a pure transition function
``(state, config, event) -> (state', actions)``. :func:`run_device` is the thin
async shell that executes actions against a transport, a sensor and a clock.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Protocol, Union

from . import sensor_codec
from .errors import AuthRejected, ProtocolError, TooSoon
from .sensor_codec import Reading, SensorState
from .wire_protocol import (
    Command,
    ProtocolMessage,
    Status,
    StreamDecoder,
    encode_message,
    format_tenths,
)

log = logging.getLogger(__name__)

TEMPERATURE_PIN = 0
HUMIDITY_PIN = 1


@dataclass(frozen=True)
class DeviceConfig:
    device_id: str
    auth_token: str
    broker_address: str = "127.0.0.1:8442"
    sample_interval_ms: int = 2000
    heartbeat_interval_ms: int = 10_000
    backoff_base_ms: int = 1000
    backoff_cap_ms: int = 32_000
    backoff_jitter: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_interval_ms < sensor_codec.MIN_INTERVAL_MS:
            raise ValueError(f"sample_interval_ms must be >= {sensor_codec.MIN_INTERVAL_MS}")
        if not 0 < self.backoff_base_ms <= self.backoff_cap_ms:
            raise ValueError("need 0 < backoff_base_ms <= backoff_cap_ms")
        if self.heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat_interval_ms must be positive")
        if not 0 <= self.backoff_jitter <= 1:
            raise ValueError("backoff_jitter must be a fraction in [0, 1]")


class Phase(enum.Enum):
    DISCONNECTED = "disconnected"
    CONNECTING = "connecting"
    AUTHENTICATING = "authenticating"
    ONLINE = "online"


@dataclass(frozen=True)
class DeviceState:
    phase: Phase = Phase.DISCONNECTED
    next_message_id: int = 1
    consecutive_failures: int = 0
    pending_auth_id: int | None = None
    last_publish_ms: int | None = None
    last_heartbeat_ms: int | None = None  # last outbound traffic of any kind
    retry_at_ms: int | None = None
    retries: int = 0
    clock_ms: int = 0
    auth_rejected: bool = False


# events


@dataclass(frozen=True)
class TimerTick:
    now_ms: int


# ``now_ms`` on non-timer events is optional; when given it advances the
# state's notion of time so backoff is measured from the real event time.


@dataclass(frozen=True)
class ConnectionOpened:
    now_ms: int | None = None


@dataclass(frozen=True)
class ConnectionClosed:
    now_ms: int | None = None


@dataclass(frozen=True)
class MessageReceived:
    message: ProtocolMessage
    now_ms: int | None = None


@dataclass(frozen=True)
class SampleReady:
    """Result of a :class:`TakeSample` action, fed back by the runtime."""

    reading: Reading


DeviceEvent = Union[TimerTick, ConnectionOpened, ConnectionClosed, MessageReceived, SampleReady]


# actions


@dataclass(frozen=True)
class OpenConnection:
    pass


@dataclass(frozen=True)
class Send:
    message: ProtocolMessage


@dataclass(frozen=True)
class CloseConnection:
    pass


@dataclass(frozen=True)
class ScheduleRetry:
    delay_ms: int


@dataclass(frozen=True)
class TakeSample:
    now_ms: int


DeviceAction = Union[OpenConnection, Send, CloseConnection, ScheduleRetry, TakeSample]


def next_backoff(consecutive_failures: int, config: DeviceConfig, rng: random.Random | None = None) -> int:
    """Capped exponential delay plus up to ``backoff_jitter`` of it as uniform jitter."""
    if consecutive_failures < 1:
        raise ValueError("consecutive_failures must be >= 1")
    exponent = min(consecutive_failures - 1, 62)
    delay = min(config.backoff_base_ms << exponent, config.backoff_cap_ms)
    if rng is not None and config.backoff_jitter > 0:
        delay += int(rng.uniform(0.0, config.backoff_jitter) * delay)
    return delay


def _jitter_rng(config: DeviceConfig, retries: int) -> random.Random:
    return random.Random(f"{config.rng_seed}/{config.device_id}/{retries}")


def _bump(message_id: int) -> int:
    return 1 if message_id >= 0xFFFF else message_id + 1


def _send(state: DeviceState, make) -> tuple[DeviceState, Send]:
    msg = make(state.next_message_id)
    return replace(state, next_message_id=_bump(state.next_message_id), last_heartbeat_ms=state.clock_ms), Send(msg)


def _fail(state: DeviceState, config: DeviceConfig, actions: list) -> tuple[DeviceState, list]:
    failures = state.consecutive_failures + 1
    delay = next_backoff(failures, config, _jitter_rng(config, state.retries))
    state = replace(
        state,
        phase=Phase.DISCONNECTED,
        consecutive_failures=failures,
        pending_auth_id=None,
        retry_at_ms=state.clock_ms + delay,
        retries=state.retries + 1,
    )
    return state, actions + [ScheduleRetry(delay)]


def step(state: DeviceState, config: DeviceConfig, event: DeviceEvent) -> tuple[DeviceState, list[DeviceAction]]:
    if state.auth_rejected:
        return state, []

    event_ms = getattr(event, "now_ms", None)
    if event_ms is not None and event_ms > state.clock_ms:
        state = replace(state, clock_ms=event_ms)

    if isinstance(event, TimerTick):
        now = state.clock_ms
        if state.phase is Phase.DISCONNECTED:
            if state.retry_at_ms is None or now >= state.retry_at_ms:
                return replace(state, phase=Phase.CONNECTING, retry_at_ms=None), [OpenConnection()]
            return state, []
        if state.phase is not Phase.ONLINE:
            return state, []
        if state.last_publish_ms is None or now - state.last_publish_ms >= config.sample_interval_ms:
            return replace(state, last_publish_ms=now), [TakeSample(now)]
        if state.last_heartbeat_ms is None or now - state.last_heartbeat_ms >= config.heartbeat_interval_ms:
            state, action = _send(state, ProtocolMessage.ping)
            return state, [action]
        return state, []

    if isinstance(event, SampleReady):
        if state.phase is not Phase.ONLINE:
            return state, []
        r = event.reading
        state, temp = _send(state, lambda i: ProtocolMessage.hardware(i, TEMPERATURE_PIN, format_tenths(r.temperature_c)))
        state, hum = _send(state, lambda i: ProtocolMessage.hardware(i, HUMIDITY_PIN, format_tenths(r.humidity_rh)))
        return state, [temp, hum]

    if isinstance(event, ConnectionOpened):
        if state.phase is not Phase.CONNECTING:
            return state, []
        auth_id = state.next_message_id
        state, action = _send(state, lambda i: ProtocolMessage.login(i, config.auth_token))
        return replace(state, phase=Phase.AUTHENTICATING, pending_auth_id=auth_id), [action]

    if isinstance(event, ConnectionClosed):
        if state.phase is Phase.DISCONNECTED:
            return state, []
        return _fail(state, config, [])

    if isinstance(event, MessageReceived):
        msg = event.message
        if msg.command is not Command.RSP or state.phase is not Phase.AUTHENTICATING:
            return state, []
        if msg.message_id != state.pending_auth_id:
            return state, []
        try:
            status = msg.status
        except ValueError:
            status = None
        if status == Status.OK:
            return replace(state, phase=Phase.ONLINE, consecutive_failures=0, pending_auth_id=None), []
        if status == Status.INVALID_TOKEN:
            return replace(state, phase=Phase.DISCONNECTED, pending_auth_id=None, auth_rejected=True), [CloseConnection()]
        return _fail(state, config, [CloseConnection()])

    raise TypeError(f"unknown event {event!r}")


def next_deadline(state: DeviceState, config: DeviceConfig) -> int | None:
    """Earliest time at which a TimerTick can produce an action, or None."""
    if state.auth_rejected:
        return None
    if state.phase is Phase.DISCONNECTED:
        return state.retry_at_ms if state.retry_at_ms is not None else state.clock_ms
    if state.phase is not Phase.ONLINE:
        return None
    publish = state.clock_ms if state.last_publish_ms is None else state.last_publish_ms + config.sample_interval_ms
    beat = state.clock_ms if state.last_heartbeat_ms is None else state.last_heartbeat_ms + config.heartbeat_interval_ms
    return min(publish, beat)


# runtime


class Transport(Protocol):
    async def open(self) -> None: ...

    async def send(self, data: bytes) -> None: ...

    async def receive(self) -> bytes:
        """Next chunk of inbound octets; ``b""`` once the peer has closed."""
        ...

    async def close(self) -> None: ...


class Clock(Protocol):
    def now_ms(self) -> int: ...

    async def sleep_until(self, deadline_ms: int) -> None: ...


def read_sensor(sensor: SensorState, now_ms: int) -> Reading:
    """Sample the sensor and pass the result through the frame codec, as the firmware would."""
    reading = sensor_codec.sample(sensor, now_ms)
    frame = sensor_codec.encode_frame(reading)
    return sensor_codec.decode_frame(frame, reading.timestamp_ms)


@dataclass
class DeviceRunner:
    """Drives :func:`step` with a transport, a sensor and a clock.

    ``sent`` and ``trace`` keep what was sent and every (event, actions) pair
    so tests can inspect a run afterwards.
    """

    config: DeviceConfig
    sensor: SensorState
    transport: Transport
    clock: Clock
    state: DeviceState = field(default_factory=DeviceState)
    sent: list[tuple[int, ProtocolMessage]] = field(default_factory=list)
    trace: list[tuple[DeviceEvent, list[DeviceAction]]] = field(default_factory=list)
    _connected: bool = False
    _reader: asyncio.Task | None = None
    _decoder: StreamDecoder = field(default_factory=StreamDecoder)

    async def _dispatch(self, event: DeviceEvent) -> None:
        queue = [event]
        while queue:
            ev = queue.pop(0)
            self.state, actions = step(self.state, self.config, ev)
            self.trace.append((ev, actions))
            for action in actions:
                follow = await self._execute(action)
                if follow is not None:
                    queue.append(follow)

    async def _execute(self, action: DeviceAction) -> DeviceEvent | None:
        if isinstance(action, OpenConnection):
            try:
                await self.transport.open()
            except OSError as exc:
                log.info("device=%s event=connect_failed error=%s", self.config.device_id, exc)
                return ConnectionClosed(self.clock.now_ms())
            self._connected = True
            self._decoder = StreamDecoder()
            log.info("device=%s event=connected", self.config.device_id)
            return ConnectionOpened(self.clock.now_ms())
        if isinstance(action, Send):
            if not self._connected:
                return None
            try:
                await self.transport.send(encode_message(action.message))
            except OSError:
                await self._drop()
                return ConnectionClosed(self.clock.now_ms())
            self.sent.append((self.clock.now_ms(), action.message))
            return None
        if isinstance(action, CloseConnection):
            await self._drop()
            return None
        if isinstance(action, ScheduleRetry):
            log.info("device=%s event=retry delay_ms=%d", self.config.device_id, action.delay_ms)
            return None
        if isinstance(action, TakeSample):
            try:
                return SampleReady(read_sensor(self.sensor, action.now_ms))
            except TooSoon:
                return None
        raise TypeError(f"unknown action {action!r}")

    async def _drop(self) -> None:
        if self._reader is not None:
            self._reader.cancel()
            self._reader = None
        if self._connected:
            self._connected = False
            try:
                await self.transport.close()
            except OSError:
                pass

    async def _on_chunk(self, chunk: bytes) -> None:
        if not chunk:
            self._connected = False
            self._reader = None
            await self.transport.close()
            await self._dispatch(ConnectionClosed(self.clock.now_ms()))
            return
        try:
            messages = self._decoder.feed(chunk)
        except ProtocolError:
            await self._drop()
            await self._dispatch(ConnectionClosed(self.clock.now_ms()))
            return
        for msg in messages:
            await self._dispatch(MessageReceived(msg, self.clock.now_ms()))

    async def run(self, until_ms: int | None = None) -> None:
        """Run until ``until_ms`` (clock time) or forever. Raises :class:`AuthRejected`."""
        try:
            while True:
                now = self.clock.now_ms()
                if until_ms is not None and now >= until_ms:
                    return
                await self._dispatch(TimerTick(now))
                if self.state.auth_rejected:
                    raise AuthRejected(f"broker rejected token for device {self.config.device_id!r}")

                deadline = next_deadline(self.state, self.config)
                if until_ms is not None:
                    deadline = until_ms if deadline is None else min(deadline, until_ms)
                if deadline is not None and deadline <= now:
                    await asyncio.sleep(0)
                    continue

                waiters = set()
                if self._connected and self._reader is None:
                    self._reader = asyncio.ensure_future(self.transport.receive())
                if self._reader is not None:
                    waiters.add(self._reader)
                timer = None
                if deadline is not None:
                    timer = asyncio.ensure_future(self.clock.sleep_until(deadline))
                    waiters.add(timer)
                if not waiters:
                    # nothing can wake us; happens only while a connect is stuck
                    await asyncio.sleep(0.01)
                    continue
                done, _ = await asyncio.wait(waiters, return_when=asyncio.FIRST_COMPLETED)
                if timer is not None and timer not in done:
                    timer.cancel()
                if self._reader is not None and self._reader in done:
                    reader, self._reader = self._reader, None
                    try:
                        chunk = reader.result()
                    except (OSError, asyncio.IncompleteReadError):
                        chunk = b""
                    await self._on_chunk(chunk)
                    if self.state.auth_rejected:
                        raise AuthRejected(f"broker rejected token for device {self.config.device_id!r}")
        finally:
            await self._drop()


async def run_device(
    config: DeviceConfig,
    sensor_state: SensorState,
    transport: Transport,
    clock: Clock | None = None,
    *,
    until_ms: int | None = None,
) -> DeviceRunner:
    """Run one device until ``until_ms`` (or forever). Raises :class:`AuthRejected`."""
    from .clock import RealClock

    runner = DeviceRunner(config, sensor_state, transport, clock or RealClock())
    await runner.run(until_ms)
    return runner
