import asyncio
import json
import threading
import urllib.error
import urllib.request

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envmon.broker import (
    Broker,
    BrokerConfig,
    BrokerServer,
    DeviceSession,
    HistoryEntry,
    PinStore,
    QueryServer,
    handle_message,
    read_history_file,
)
from envmon.errors import BadRange, NotFound
from envmon.wire_protocol import Command, ProtocolMessage, Status, decode_stream, encode_message

TOKENS = {"secret": "station-1", "other": "station-2"}


class ManualClock:
    def __init__(self, now=0):
        self.now = now

    def now_ms(self):
        return self.now


def test_login_known_token():
    session = DeviceSession(1)
    out = handle_message(session, ProtocolMessage.login(1, "secret"), 0, TOKENS)
    assert out.responses == [ProtocolMessage.response(1, Status.OK)]
    assert out.responses[0].status == 200
    assert session.authenticated and session.device_id == "station-1"
    assert not out.close and out.writes == []


def test_login_unknown_token_disconnects():
    session = DeviceSession(1)
    out = handle_message(session, ProtocolMessage.login(4, "nope"), 0, TOKENS)
    assert out.responses == [ProtocolMessage.response(4, Status.INVALID_TOKEN)]
    assert out.close and not session.authenticated


@pytest.mark.parametrize("msg", [ProtocolMessage.hardware(1, 0, "1.0"), ProtocolMessage.ping(1), ProtocolMessage.response(1, Status.OK)])
def test_auth_gate(msg):
    session = DeviceSession(1)
    out = handle_message(session, msg, 0, TOKENS)
    assert out.responses == [ProtocolMessage.response(1, Status.ILLEGAL_COMMAND)]
    assert out.close and out.writes == []


def test_hardware_write_after_login():
    session = DeviceSession(1)
    handle_message(session, ProtocolMessage.login(1, "secret"), 0, TOKENS)
    out = handle_message(session, ProtocolMessage(Command.HW, 2, b"vw\x001\x0098"), 500, TOKENS)
    assert out.responses == [] and not out.close
    [w] = out.writes
    assert (w.device_id, w.pin, w.value, w.timestamp_ms) == ("station-1", 1, "98", 500)
    assert session.last_seen_ms == 500


def test_malformed_body_disconnects():
    session = DeviceSession(1)
    handle_message(session, ProtocolMessage.login(1, "secret"), 0, TOKENS)
    out = handle_message(session, ProtocolMessage(Command.HW, 2, b"vr\x000"), 0, TOKENS)
    assert out.responses == [ProtocolMessage.response(2, Status.ILLEGAL_COMMAND)]
    assert out.close and out.writes == []


def test_ping_ok():
    session = DeviceSession(1)
    handle_message(session, ProtocolMessage.login(1, "secret"), 0, TOKENS)
    out = handle_message(session, ProtocolMessage.ping(2), 9, TOKENS)
    assert out.responses == [ProtocolMessage.response(2, Status.OK)]


def _broker(tmp_path=None, clock=None):
    return Broker(BrokerConfig(TOKENS, history_path=str(tmp_path) if tmp_path else None), clock or ManualClock())


def _login(broker):
    session = broker.open_session()
    out, close = broker.receive(session, encode_message(ProtocolMessage.login(1, "secret")))
    assert not close
    return session


def test_get_latest_examples(tmp_path):
    clock = ManualClock(1000)
    broker = _broker(tmp_path, clock)
    session = _login(broker)
    broker.receive(session, encode_message(ProtocolMessage(Command.HW, 2, b"vw\x001\x0098")))
    record = broker.get_latest("station-1", 1)
    assert (record.value, record.updated_at_ms, record.stale) == ("98", 1000, False)
    with pytest.raises(NotFound):
        broker.get_latest("station-1", 200)
    with pytest.raises(NotFound):
        broker.get_latest("ghost", 0)
    broker.receive(session, encode_message(ProtocolMessage.hardware(3, 0, "23.4")))
    broker.receive(session, encode_message(ProtocolMessage.hardware(4, 0, "24.0")))
    assert broker.get_latest("station-1", 0).value == "24.0"
    clock.now = 1000 + 30_001
    assert broker.get_latest("station-1", 1).stale


def test_get_history_examples():
    store = PinStore()
    assert store.get_history("d", 0, 0, 10) == []
    for t in (0, 2000, 4000):
        store.write("d", 0, str(t), t)
    assert [e.timestamp_ms for e in store.get_history("d", 0, 0, 3000)] == [0, 2000]
    assert store.get_history("d", 0, 5000, 5000) == []
    with pytest.raises(BadRange):
        store.get_history("d", 0, 10, 9)


def test_list_devices():
    clock = ManualClock(0)
    broker = _broker(clock=clock)
    assert broker.list_devices() == []
    session = _login(broker)
    for t in range(0, 60_001, 10_000):
        clock.now = t
        broker.receive(session, encode_message(ProtocolMessage.ping(2 + t // 10_000)))
        assert broker.list_devices() == [("station-1", True, t)]
    assert broker.list_devices(60_000 + 30_000) == [("station-1", True, 60_000)]
    assert broker.list_devices(60_000 + 31_000) == [("station-1", False, 60_000)]


def test_broker_drops_stream_on_unknown_command():
    broker = _broker()
    session = broker.open_session()
    out, close = broker.receive(session, bytes.fromhex("FF00010000"))
    assert close and out == b""


def test_unauthenticated_session_never_mutates():
    broker = _broker()
    session = broker.open_session()
    out, close = broker.receive(session, encode_message(ProtocolMessage.hardware(1, 0, "1.0")))
    assert close
    assert decode_stream(out)[0] == [ProtocolMessage.response(1, Status.ILLEGAL_COMMAND)]
    assert broker.store.entry_count() == 0


def test_history_file_format_and_durability(tmp_path):
    broker = _broker(tmp_path, ManualClock(42))
    session = _login(broker)
    broker.receive(session, encode_message(ProtocolMessage(Command.HW, 2, b"vw\x001\x0098")))
    broker.store.close()
    lines = (tmp_path / "station-1.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == [{"ts": 42, "device": "station-1", "pin": 1, "value": "98"}]

    reborn = _broker(tmp_path, ManualClock(50))
    assert reborn.get_latest("station-1", 1).value == "98"
    assert reborn.get_history("station-1", 1, 0, 100) == [HistoryEntry(42, "station-1", 1, "98")]


def test_torn_tail_line_is_skipped(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"ts":1,"device":"d","pin":0,"value":"1.0"}\n{"ts":2,"dev')
    assert read_history_file(path) == [HistoryEntry(1, "d", 0, "1.0")]
    store = PinStore(tmp_path)
    assert store.get_latest("d", 0).value == "1.0"


def test_store_rejects_unsafe_device_ids(tmp_path):
    store = PinStore(tmp_path)
    with pytest.raises(ValueError):
        store.write("../evil", 0, "1", 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]), st.integers(0, 3), st.integers(-500, 500)), max_size=60))
def test_last_write_wins(writes):
    store = PinStore()
    for i, (device, pin, value) in enumerate(writes):
        store.write(device, pin, str(value), i)
    final = {}
    for device, pin, value in writes:
        final[(device, pin)] = str(value)
    for (device, pin), value in final.items():
        assert store.get_latest(device, pin).value == value


def test_concurrent_writers_keep_per_device_order(tmp_path):
    store = PinStore(tmp_path)

    def writer(device):
        for i in range(300):
            store.write(device, 0, str(i), i)

    threads = [threading.Thread(target=writer, args=(f"dev{k}",)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    store.close()
    for k in range(4):
        entries = read_history_file(tmp_path / f"dev{k}.jsonl")
        assert [e.value for e in entries] == [str(i) for i in range(300)]


# network front ends


def _get(url):
    try:
        with urllib.request.urlopen(url, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_http_query_api(tmp_path):
    clock = ManualClock(1000)
    broker = _broker(tmp_path, clock)
    session = _login(broker)
    for i, t in enumerate((1000, 3000, 5000)):
        clock.now = t
        broker.receive(session, encode_message(ProtocolMessage.hardware(2 + i, 1, f"9{i}")))
    server = QueryServer(broker)
    server.start()
    try:
        base = server.url
        assert _get(f"{base}/devices") == (200, [{"device": "station-1", "online": True, "last_seen_ms": 5000}])
        assert _get(f"{base}/devices/station-1/pins/1/latest") == (200, {"pin": 1, "value": "92", "updated_at_ms": 5000, "stale": False})
        assert _get(f"{base}/devices/station-1/pins/1/history?from=0&to=4000") == (200, [{"ts": 1000, "value": "90"}, {"ts": 3000, "value": "91"}])
        assert _get(f"{base}/devices/station-1/pins/1/history?from=5000&to=5000") == (200, [])
        assert _get(f"{base}/devices/station-1/pins/7/latest")[0] == 404
        assert _get(f"{base}/devices/ghost/pins/0/latest")[0] == 404
        assert _get(f"{base}/devices/station-1/pins/1/history?from=9&to=1")[0] == 400
        assert _get(f"{base}/nope")[0] == 404
    finally:
        server.stop()


def test_tcp_server_round_trip(tmp_path):
    broker = _broker(tmp_path, ManualClock(7))

    async def main():
        server = BrokerServer(broker)
        await server.start()
        reader, writer = await asyncio.open_connection("127.0.0.1", server.port)
        writer.write(encode_message(ProtocolMessage.login(1, "secret")) + encode_message(ProtocolMessage.hardware(2, 0, "23.4")))
        await writer.drain()
        reply = await reader.readexactly(7)
        # unknown command: the broker hangs up
        writer.write(bytes.fromhex("FF00030000"))
        await writer.drain()
        tail = await reader.read()
        writer.close()
        await server.stop()
        return reply, tail

    reply, tail = asyncio.run(main())
    assert decode_stream(reply)[0] == [ProtocolMessage.response(1, Status.OK)]
    assert tail == b""
    assert broker.get_latest("station-1", 0).value == "23.4"


def test_tcp_sessions_are_isolated(tmp_path):
    broker = _broker(tmp_path, ManualClock(0))

    async def client(port, token, n):
        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        writer.write(encode_message(ProtocolMessage.login(1, token)))
        await writer.drain()
        await reader.readexactly(7)
        for i in range(n):
            # byte-at-a-time writes stress the decode buffers
            for b in encode_message(ProtocolMessage.hardware(2 + i, 0, f"{i}.0")):
                writer.write(bytes([b]))
            if i % 10 == 0:
                await writer.drain()
        await writer.drain()
        writer.close()

    async def main():
        server = BrokerServer(broker)
        await server.start()
        await asyncio.gather(client(server.port, "secret", 200), client(server.port, "other", 200))
        for _ in range(200):
            if broker.store.entry_count() == 400:
                break
            await asyncio.sleep(0.01)
        await server.stop()

    asyncio.run(main())
    for device in ("station-1", "station-2"):
        values = [e.value for e in broker.get_history(device, 0, 0, 1)]
        assert values == [f"{i}.0" for i in range(200)]
