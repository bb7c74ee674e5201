"""Command-line entry point: ``envmon {broker,device,query,codec,eval}``.

Exit codes: 0 success, 1 domain failure, 2 config/usage error,
3 environment error (bind, unreachable broker), 4 auth rejection.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import re
import signal
import sys
import time
import urllib.error
import urllib.request
from pathlib import Path

from . import analytics, sensor_codec
from .broker import Broker, BrokerServer, QueryServer, read_history_file, split_address
from .clock import RealClock, SimulatedClock
from .config import StationConfig, load_config
from .device import DeviceRunner
from .errors import AuthRejected, ChecksumMismatch, ConfigInvalid, EmptyOverlap, OutOfRange
from .sensor_codec import SensorState
from .transport import TcpTransport

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_ENV = 3
EXIT_AUTH = 4

log = logging.getLogger("envmon")

_DURATION_RE = re.compile(r"(\d+(?:\.\d+)?)(ms|s|m|h)?")
_UNIT_MS = {"ms": 1, "s": 1000, "m": 60_000, "h": 3_600_000, None: 1000}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def parse_duration(text: str) -> int:
    """``7s`` / ``500ms`` / ``2m`` / bare seconds -> milliseconds."""
    m = _DURATION_RE.fullmatch(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    return int(float(m.group(1)) * _UNIT_MS[m.group(2)])


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
    )


def _load(path: str) -> StationConfig:
    try:
        return load_config(path)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE) from None


# broker


async def _serve_broker(config: StationConfig) -> int:
    bc = config.broker
    broker = Broker(bc, RealClock())
    server = BrokerServer(broker)
    try:
        host, port = split_address(bc.listen_address)
        http_host, http_port = split_address(bc.http_listen_address)
        await server.start(host, port)
        query = QueryServer(broker, http_host, http_port)
    except OSError as exc:
        await server.stop()
        print(f"bind failure: {exc}", file=sys.stderr)
        return EXIT_ENV
    query.start()
    log.info("event=http_listening url=%s", query.url)

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        await stop.wait()
    finally:
        log.info("event=shutdown")
        query.stop()
        await server.stop()
        broker.store.close()
    return EXIT_OK


def cmd_broker(args) -> int:
    config = _load(args.config)
    if config.broker is None:
        print("config error: field 'broker': section missing", file=sys.stderr)
        return EXIT_USAGE
    try:
        split_address(config.broker.listen_address)
        split_address(config.broker.http_listen_address)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return asyncio.run(_serve_broker(config))


# device


async def _run_devices(config: StationConfig, device_ids: list[str], duration_ms: int | None, clock) -> int:
    runners = []
    for device_id in device_ids:
        entry = config.device(device_id)
        host, port = split_address(entry.device.broker_address)
        runners.append(DeviceRunner(entry.device, SensorState(entry.profile), TcpTransport(host, port), clock))
    until = None if duration_ms is None else clock.now_ms() + duration_ms
    tasks = [asyncio.ensure_future(r.run(until)) for r in runners]
    stop = asyncio.get_running_loop().create_future()
    for sig in (signal.SIGINT, signal.SIGTERM):
        asyncio.get_running_loop().add_signal_handler(sig, lambda: stop.done() or stop.set_result(None))
    pending = set(tasks) | {stop}
    code = EXIT_OK
    while pending - {stop}:
        done, pending = await asyncio.wait(pending, return_when=asyncio.FIRST_COMPLETED)
        if stop in done:
            break
        for task in done:
            if isinstance(task.exception(), AuthRejected):
                log.error("event=auth_rejected error=%s", task.exception())
                code = EXIT_AUTH
            elif task.exception() is not None:
                raise task.exception()
        if code == EXIT_AUTH:
            break
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)
    for r in runners:
        published = sum(1 for _, m in r.sent if m.command.name == "HW") // 2
        log.info("device=%s event=stopped samples_published=%d", r.config.device_id, published)
    return code


def cmd_device(args) -> int:
    config = _load(args.config)
    for device_id in args.device_id:
        try:
            config.device(device_id)
        except ConfigInvalid as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    clock = SimulatedClock(start_ms=int(time.time() * 1000)) if args.clock == "sim" else RealClock()
    return asyncio.run(_run_devices(config, args.device_id, args.duration, clock))


# query


def _http_get(url: str):
    try:
        with urllib.request.urlopen(url, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"{}")


def cmd_query(args) -> int:
    base = args.broker_http.rstrip("/")
    if "://" not in base:
        base = "http://" + base
    pin_url = f"{base}/devices/{args.device_id}/pins/{args.pin}"
    url = f"{pin_url}/history?from={args.history[0]}&to={args.history[1]}" if args.history else f"{pin_url}/latest"
    try:
        status, payload = _http_get(url)
    except (urllib.error.URLError, OSError) as exc:
        print(f"broker unreachable: {exc}", file=sys.stderr)
        return EXIT_ENV
    if status == 404:
        print("not found", file=sys.stderr)
        return EXIT_DOMAIN
    if status == 400:
        print(f"bad range: {payload.get('error', '')}", file=sys.stderr)
        return EXIT_USAGE
    if args.history:
        print(json.dumps(payload))
    elif args.json:
        print(json.dumps(payload))
    else:
        print(payload["value"])
    return EXIT_OK


# codec


def cmd_codec(args) -> int:
    if args.verb == "encode":
        if len(args.values) != 2:
            print("usage: codec encode TEMPERATURE_C HUMIDITY_RH", file=sys.stderr)
            return EXIT_USAGE
        try:
            temperature, humidity = (float(v) for v in args.values)
            frame = sensor_codec.encode_frame(sensor_codec.Reading(temperature, humidity))
        except ValueError as exc:
            print(f"out of range: {exc}", file=sys.stderr)
            return EXIT_DOMAIN
        print(frame.to_hex())
        return EXIT_OK

    if len(args.values) != 1:
        print("usage: codec decode HEXFRAME", file=sys.stderr)
        return EXIT_USAGE
    try:
        frame = sensor_codec.RawFrame.from_hex(args.values[0])
    except ValueError as exc:
        print(f"bad frame: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        reading = sensor_codec.decode_frame(frame)
    except ChecksumMismatch:
        print("checksum mismatch", file=sys.stderr)
        return EXIT_DOMAIN
    except OutOfRange as exc:
        print(f"out of range: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(f"{reading.humidity_rh:.1f} %RH {reading.temperature_c:.1f} C ok")
    return EXIT_OK


# eval


def _measured_from_entries(entries) -> tuple[list, list]:
    temperature = [(e["ts"], float(e["value"])) for e in entries if e["pin"] == 0]
    humidity = [(e["ts"], float(e["value"])) for e in entries if e["pin"] == 1]
    return temperature, humidity


def load_measured(source: str, device_id: str | None) -> tuple[list, list]:
    """Measured (temperature, humidity) series from a history log, a CSV or a broker URL."""
    if source.startswith(("http://", "https://")):
        if not device_id:
            raise ConfigInvalid("--device is required with a broker URL", field="--device")
        base = source.rstrip("/")
        series = []
        for pin in (0, 1):
            status, payload = _http_get(f"{base}/devices/{device_id}/pins/{pin}/history?from=0&to={2**63 - 1}")
            series.append([] if status == 404 else [(e["ts"], float(e["value"])) for e in payload])
        return series[0], series[1]
    path = Path(source)
    if path.suffix == ".csv":
        ref = analytics.load_reference_csv(path)
        return [(p.timestamp_ms, p.temperature_c) for p in ref], [(p.timestamp_ms, p.humidity_rh) for p in ref]
    entries = [
        {"ts": e.timestamp_ms, "pin": e.pin, "value": e.value}
        for e in read_history_file(path)
        if device_id is None or e.device_id == device_id
    ]
    return _measured_from_entries(entries)


def cmd_eval(args) -> int:
    thresholds = analytics.DEFAULT_THRESHOLDS
    skew = args.skew
    if args.config:
        cfg = _load(args.config)
        thresholds = cfg.analytics.thresholds
        if skew is None:
            skew = cfg.analytics.max_skew_ms
    if skew is None:
        skew = 60_000
    try:
        reference = analytics.load_reference_csv(args.reference_csv)
        temperature, humidity = load_measured(args.measured, args.device)
    except ConfigInvalid as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = analytics.build_report(reference, temperature, humidity, skew, thresholds)
    except EmptyOverlap as exc:
        print(f"EmptyOverlap: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="envmon", description="Simulated temperature/humidity station")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("broker", help="run the broker (device port + HTTP query port)")
    p.add_argument("config")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("device", help="run simulated device(s) from the config")
    p.add_argument("config")
    p.add_argument("device_id", nargs="+")
    p.add_argument("--duration", type=parse_duration, default=None, help="e.g. 7s, 500ms, 2m")
    p.add_argument("--clock", choices=("real", "sim"), default="real", help="sim advances time virtually")
    p.set_defaults(func=cmd_device)

    p = sub.add_parser("query", help="read a pin from a running broker")
    p.add_argument("broker_http")
    p.add_argument("device_id")
    p.add_argument("pin", type=int)
    p.add_argument("--history", nargs=2, type=int, metavar=("FROM", "TO"))
    p.add_argument("--json", action="store_true", help="print the full latest record")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("codec", help="encode/decode 40-bit sensor frames")
    p.add_argument("verb", choices=("encode", "decode"))
    p.add_argument("values", nargs="+")
    p.set_defaults(func=cmd_codec)

    p = sub.add_parser("eval", help="percentage-error report against reference observations")
    p.add_argument("reference_csv")
    p.add_argument("measured", help="history .jsonl, measured .csv, or broker http URL")
    p.add_argument("--device", help="device id (required for a broker URL)")
    p.add_argument("--skew", type=int, default=None, help="max time skew in ms")
    p.add_argument("--config", help="station config for analytics defaults")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
