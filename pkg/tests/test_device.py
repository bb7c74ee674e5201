import asyncio
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envmon.broker import Broker, BrokerConfig, LoopbackHub
from envmon.clock import SimulatedClock
from envmon.device import (
    CloseConnection,
    ConnectionClosed,
    ConnectionOpened,
    DeviceConfig,
    DeviceRunner,
    DeviceState,
    MessageReceived,
    OpenConnection,
    Phase,
    SampleReady,
    ScheduleRetry,
    Send,
    TakeSample,
    TimerTick,
    next_backoff,
    run_device,
    step,
)
from envmon.errors import AuthRejected
from envmon.sensor_codec import EnvironmentProfile, Reading, SensorState
from envmon.wire_protocol import Command, ProtocolMessage, Status

from simdriver import actions_of, drive

CFG = DeviceConfig("station-1", "secret")
NO_JITTER = DeviceConfig("station-1", "secret", backoff_jitter=0.0)


def online(config=CFG, **kw):
    state = DeviceState()
    state, _ = step(state, config, TimerTick(0))
    state, _ = step(state, config, ConnectionOpened())
    state, _ = step(state, config, MessageReceived(ProtocolMessage.response(state.pending_auth_id, Status.OK)))
    assert state.phase is Phase.ONLINE
    return state


def test_disconnected_tick_opens_connection():
    state, actions = step(DeviceState(), CFG, TimerTick(0))
    assert state.phase is Phase.CONNECTING
    assert actions == [OpenConnection()]


def test_login_then_online():
    state, _ = step(DeviceState(), CFG, TimerTick(0))
    state, actions = step(state, CFG, ConnectionOpened())
    assert state.phase is Phase.AUTHENTICATING
    assert actions == [Send(ProtocolMessage.login(1, "secret"))]
    assert state.pending_auth_id == 1
    # a stray response id does not authenticate
    same, actions = step(state, CFG, MessageReceived(ProtocolMessage.response(9, Status.OK)))
    assert same.phase is Phase.AUTHENTICATING and actions == []
    state, actions = step(state, CFG, MessageReceived(ProtocolMessage.response(1, Status.OK)))
    assert state.phase is Phase.ONLINE and state.consecutive_failures == 0


def test_online_only_via_ok_login():
    state, _ = step(DeviceState(), CFG, TimerTick(0))
    state, _ = step(state, CFG, ConnectionOpened())
    state, actions = step(state, CFG, MessageReceived(ProtocolMessage.response(1, Status.ILLEGAL_COMMAND)))
    assert state.phase is Phase.DISCONNECTED
    assert actions[0] == CloseConnection() and isinstance(actions[1], ScheduleRetry)


def test_invalid_token_is_terminal():
    state, _ = step(DeviceState(), CFG, TimerTick(0))
    state, _ = step(state, CFG, ConnectionOpened())
    state, actions = step(state, CFG, MessageReceived(ProtocolMessage.response(1, Status.INVALID_TOKEN)))
    assert state.auth_rejected and actions == [CloseConnection()]
    assert step(state, CFG, TimerTick(99_999)) == (state, [])


def test_publish_v0_then_v1():
    state = online()
    state, actions = step(state, CFG, TimerTick(0))
    assert actions == [TakeSample(0)]
    state, actions = step(state, CFG, SampleReady(Reading(23.4, 56.0, 0)))
    assert [a.message.body for a in actions] == [b"vw\x000\x0023.4", b"vw\x001\x0056.0"]
    assert [a.message.message_id for a in actions] == [2, 3]
    # next sample only once the interval has elapsed
    _, actions = step(state, CFG, TimerTick(1999))
    assert actions == []
    state, actions = step(state, CFG, TimerTick(2000))
    assert actions == [TakeSample(2000)]
    state, actions = step(state, CFG, SampleReady(Reading(23.4, 56.0, 2000)))
    assert b"vw\x000\x0023.4" in [a.message.body for a in actions]
    assert b"vw\x001\x0056.0" in [a.message.body for a in actions]


def test_negative_temperature_on_wire():
    state, _ = step(online(), CFG, TimerTick(0))
    _, actions = step(state, CFG, SampleReady(Reading(-3.0, 80.5)))
    assert actions[0].message.body == b"vw\x000\x00-3.0"


def test_heartbeat_when_idle():
    config = DeviceConfig("d", "t", sample_interval_ms=60_000, heartbeat_interval_ms=10_000)
    state = online(config)
    state, _ = step(state, config, TimerTick(0))
    state, _ = step(state, config, SampleReady(Reading(20.0, 50.0)))
    _, actions = step(state, config, TimerTick(9_999))
    assert actions == []
    state, actions = step(state, config, TimerTick(10_000))
    assert len(actions) == 1 and actions[0].message.command is Command.PING


def test_message_ids_wrap_to_one():
    state = replace(online(), next_message_id=0xFFFF)
    state, _ = step(state, CFG, TimerTick(0))
    _, actions = step(state, CFG, SampleReady(Reading(1.0, 2.0)))
    assert [a.message.message_id for a in actions] == [0xFFFF, 1]


@pytest.mark.parametrize("failures, expected", [(1, 1000), (2, 2000), (3, 4000), (4, 8000), (5, 16000), (6, 32000), (10, 32000)])
def test_backoff_without_jitter(failures, expected):
    assert next_backoff(failures, NO_JITTER, random.Random(0)) == expected
    assert next_backoff(failures, CFG, None) == expected


def test_backoff_jitter_bounds_and_determinism():
    for failures in range(1, 12):
        base = next_backoff(failures, CFG)
        for seed in range(20):
            d = next_backoff(failures, CFG, random.Random(seed))
            assert base <= d <= base * 1.1
            assert d == next_backoff(failures, CFG, random.Random(seed))


def test_backoff_requires_failure():
    with pytest.raises(ValueError):
        next_backoff(0, CFG)


def test_fourth_consecutive_close_waits_8000():
    state, delays = DeviceState(), []
    for _ in range(4):
        state, actions = step(state, CFG, TimerTick(state.retry_at_ms or 0))
        assert actions == [OpenConnection()]
        state, actions = step(state, CFG, ConnectionClosed())
        delays.append(actions[-1].delay_ms)
    oracle = [1000 * 2 ** (n - 1) for n in range(1, 5)]
    for d, o in zip(delays, oracle):
        assert o <= d <= o * 1.1
    assert 8000 <= delays[-1] <= 8800


def test_retry_not_before_backoff():
    state, _ = step(DeviceState(), NO_JITTER, TimerTick(0))
    state, _ = step(state, NO_JITTER, ConnectionClosed())
    assert step(state, NO_JITTER, TimerTick(999))[1] == []
    assert step(state, NO_JITTER, TimerTick(1000))[1] == [OpenConnection()]


def test_config_invariants():
    with pytest.raises(ValueError):
        DeviceConfig("d", "t", sample_interval_ms=1999)
    with pytest.raises(ValueError):
        DeviceConfig("d", "t", backoff_base_ms=5000, backoff_cap_ms=1000)


events = st.one_of(
    st.integers(0, 200_000).map(TimerTick),
    st.just(ConnectionOpened()),
    st.just(ConnectionClosed()),
    st.integers(1, 12).map(lambda i: MessageReceived(ProtocolMessage.response(i, Status.OK))),
    st.builds(lambda t, h: SampleReady(Reading(t / 10, h / 10)), st.integers(-400, 800), st.integers(0, 1000)),
)


@given(st.lists(events, max_size=60))
def test_replay_reproduces_actions(seq):
    def run():
        state, out = DeviceState(), []
        for ev in seq:
            state, actions = step(state, CFG, ev)
            out.append(actions)
        return out

    assert run() == run()


@given(st.lists(events, max_size=80))
def test_message_ids_strictly_sequential_and_v0_before_v1(seq):
    state, sent = DeviceState(), []
    for ev in seq:
        state, actions = step(state, CFG, ev)
        sent.extend(a.message for a in actions if isinstance(a, Send))
    ids = [m.message_id for m in sent]
    assert ids == list(range(1, len(ids) + 1))
    hw = [m for m in sent if m.command is Command.HW]
    assert [m.body.split(b"\x00")[1] for m in hw] == [b"0", b"1"] * (len(hw) // 2)


@settings(max_examples=40)
@given(st.lists(st.booleans(), min_size=1, max_size=15))
def test_reaches_online_under_flaky_transport(outcomes):
    """Each retry's open fails or succeeds per ``outcomes``; the last always succeeds."""
    outcomes = outcomes + [True]
    state, now = DeviceState(), 0
    for ok in outcomes:
        state, actions = step(state, CFG, TimerTick(now))
        assert actions == [OpenConnection()]
        if not ok:
            state, actions = step(state, CFG, ConnectionClosed())
            now = state.retry_at_ms
            continue
        state, actions = step(state, CFG, ConnectionOpened())
        state, _ = step(state, CFG, MessageReceived(ProtocolMessage.response(actions[0].message.message_id, Status.OK)))
        break
    assert state.phase is Phase.ONLINE


def test_sample_spacing_over_drive():
    sensor = SensorState(EnvironmentProfile("constant", 20.0, 50.0))
    trace, _ = drive(CFG, sensor, 60_000, drop_at=(7_000, 23_500))
    stamps = [t for t, _ in actions_of(trace, TakeSample)]
    assert all(b - a >= 2000 for a, b in zip(stamps, stamps[1:]))
    assert len(stamps) >= 25


def test_step_rejects_unknown_event():
    with pytest.raises(TypeError):
        step(DeviceState(), CFG, object())


# runtime against the in-memory loopback broker


def _loopback(tmp_path, tokens=None):
    clock = SimulatedClock()
    broker = Broker(BrokerConfig(tokens or {"secret": "station-1"}, history_path=str(tmp_path)), clock)
    return clock, broker, LoopbackHub(broker)


def test_run_device_publishes_three_in_seven_seconds(tmp_path):
    clock, broker, hub = _loopback(tmp_path)
    sensor = SensorState(EnvironmentProfile("constant", 22.0, 55.0))

    async def main():
        return await run_device(CFG, sensor, hub.transport(), clock, until_ms=7_000)

    runner = asyncio.run(main())
    samples = broker.get_history("station-1", 0, 0, 7_000)
    # interval arithmetic: samples at 0, 2000, 4000, 6000
    assert len(samples) == 7_000 // 2_000 + 1 >= 3
    assert [e.timestamp_ms for e in samples] == [0, 2000, 4000, 6000]
    assert broker.get_latest("station-1", 1).value == "55.0"
    assert sum(1 for _, m in runner.sent if m.command is Command.HW) == 8


def test_run_device_survives_broker_restart(tmp_path):
    clock, broker, hub = _loopback(tmp_path)
    sensor = SensorState(EnvironmentProfile("constant", 22.0, 55.0))

    async def chaos():
        await clock.sleep_until(5_000)
        hub.kill()
        broker.store.close()
        await clock.sleep_until(9_000)
        hub.revive(Broker(broker.config, clock))

    async def main():
        runner = DeviceRunner(NO_JITTER, sensor, hub.transport(), clock)
        await asyncio.gather(runner.run(until_ms=20_000), chaos())
        return runner

    runner = asyncio.run(main())
    stamps = [e.timestamp_ms for e in hub.broker.get_history("station-1", 0, 0, 2**40)]
    assert stamps[:3] == [0, 2000, 4000]
    # down 5000..9000: retries at 6000, 8000 fail; the 4000 ms retry lands at 12000
    assert stamps[3:] == [12_000, 14_000, 16_000, 18_000]
    logins = [m for _, m in runner.sent if m.command is Command.LOGIN]
    assert len(logins) == 2


def test_run_device_wrong_token(tmp_path):
    clock, broker, hub = _loopback(tmp_path)
    sensor = SensorState(EnvironmentProfile("constant", 22.0, 55.0))
    bad = DeviceConfig("station-1", "wrong")

    async def main():
        await run_device(bad, sensor, hub.transport(), clock, until_ms=60_000)

    with pytest.raises(AuthRejected):
        asyncio.run(main())
    assert broker.store.entry_count() == 0
