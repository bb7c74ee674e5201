"""Network front ends for :class:`~envmon.broker.core.Broker`."""

from __future__ import annotations

import asyncio
import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..errors import BadRange, NotFound
from .core import Broker

log = logging.getLogger(__name__)

READ_CHUNK = 4096


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class BrokerServer:
    """Device-facing TCP listener speaking the wire protocol."""

    def __init__(self, broker: Broker) -> None:
        self.broker = broker
        self._server: asyncio.base_events.Server | None = None
        self._writers: set[asyncio.StreamWriter] = set()

    @property
    def port(self) -> int:
        return self._server.sockets[0].getsockname()[1]

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._server = await asyncio.start_server(self._handle, host, port)
        log.info("event=listening address=%s:%d", host, self.port)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session = self.broker.open_session()
        self._writers.add(writer)
        try:
            while True:
                data = await reader.read(READ_CHUNK)
                if not data:
                    break
                out, close = self.broker.receive(session, data)
                if out:
                    writer.write(out)
                    await writer.drain()
                if close:
                    break
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self._writers.discard(writer)
            writer.close()
            log.info("session=%d event=closed device=%s", session.session_id, session.device_id)

    async def stop(self) -> None:
        """Stop listening and drop every open connection."""
        if self._server is None:
            return
        self._server.close()
        for writer in list(self._writers):
            writer.close()
        await self._server.wait_closed()
        self._server = None


class _QueryHandler(BaseHTTPRequestHandler):
    broker: Broker  # injected per server subclass

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        log.debug("http " + format, *args)

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802
        url = urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts == ["devices"]:
                self._reply(
                    HTTPStatus.OK,
                    [{"device": d, "online": online, "last_seen_ms": seen} for d, online, seen in self.broker.list_devices()],
                )
            elif len(parts) == 5 and parts[0] == "devices" and parts[2] == "pins" and parts[4] == "latest":
                record = self.broker.get_latest(parts[1], _pin(parts[3]))
                self._reply(
                    HTTPStatus.OK,
                    {"pin": record.pin, "value": record.value, "updated_at_ms": record.updated_at_ms, "stale": record.stale},
                )
            elif len(parts) == 5 and parts[0] == "devices" and parts[2] == "pins" and parts[4] == "history":
                query = parse_qs(url.query)
                from_ms = int(query.get("from", ["0"])[0])
                to_ms = int(query.get("to", [str(2**63 - 1)])[0])
                entries = self.broker.get_history(parts[1], _pin(parts[3]), from_ms, to_ms)
                self._reply(HTTPStatus.OK, [{"ts": e.timestamp_ms, "value": e.value} for e in entries])
            else:
                self._reply(HTTPStatus.NOT_FOUND, {"error": "not found"})
        except NotFound as exc:
            self._reply(HTTPStatus.NOT_FOUND, {"error": str(exc)})
        except (BadRange, ValueError) as exc:
            self._reply(HTTPStatus.BAD_REQUEST, {"error": str(exc)})


def _pin(text: str) -> int:
    pin = int(text)
    if not 0 <= pin <= 255:
        raise NotFound(f"pin {pin} out of range")
    return pin


class QueryServer:
    """HTTP/JSON query interface served from a background thread."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0) -> None:
        handler = type("QueryHandler", (_QueryHandler,), {"broker": broker})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="envmon-http", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join()


class LoopbackHub:
    """In-process stand-in for the TCP listener.

    :meth:`transport` hands out device transports whose octets go straight
    through :meth:`Broker.receive`. :meth:`kill` drops every connection and
    refuses new ones until :meth:`revive`.
    """

    def __init__(self, broker: Broker) -> None:
        self.broker = broker
        self.alive = True
        self._open: set[LoopbackTransport] = set()

    def transport(self) -> LoopbackTransport:
        return LoopbackTransport(self)

    def kill(self) -> None:
        self.alive = False
        for t in list(self._open):
            t._peer_closed()

    def revive(self, broker: Broker | None = None) -> None:
        if broker is not None:
            self.broker = broker
        self.alive = True


class LoopbackTransport:
    def __init__(self, hub: LoopbackHub) -> None:
        self._hub = hub
        self._inbox: asyncio.Queue[bytes] = asyncio.Queue()
        self._session = None

    async def open(self) -> None:
        if not self._hub.alive:
            raise ConnectionRefusedError("loopback broker is down")
        self._inbox = asyncio.Queue()
        self._session = self._hub.broker.open_session()
        self._hub._open.add(self)

    async def send(self, data: bytes) -> None:
        if self._session is None:
            raise ConnectionResetError("not connected")
        out, close = self._hub.broker.receive(self._session, data)
        if out:
            self._inbox.put_nowait(out)
        if close:
            self._peer_closed()

    async def receive(self) -> bytes:
        return await self._inbox.get()

    async def close(self) -> None:
        self._session = None
        self._hub._open.discard(self)

    def _peer_closed(self) -> None:
        self._session = None
        self._hub._open.discard(self)
        self._inbox.put_nowait(b"")
