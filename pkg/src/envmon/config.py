"""Station configuration file (TOML).

Layout::

    [broker]                      # optional for device-only files
    listen_address = "127.0.0.1:8442"
    http_listen_address = "127.0.0.1:8080"
    history_path = "history"      # relative to the config file
    heartbeat_timeout_ms = 30000

    [broker.token_table]
    "token-1" = "station-1"

    [[devices]]
    device_id = "station-1"
    auth_token = "token-1"
    broker_address = "127.0.0.1:8442"
    sample_interval_ms = 2000

    [devices.profile]
    kind = "diurnal"
    base_temperature_c = 20.0

    [analytics]
    partly_cloudy_from_rh = 60.0
    cloudy_from_rh = 85.0
    max_skew_ms = 60000
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analytics import ClarityThresholds
from .broker.core import BrokerConfig
from .device import DeviceConfig
from .errors import ConfigInvalid
from .sensor_codec import EnvironmentProfile

_LINE_RE = re.compile(r"line (\d+)")


@dataclass(frozen=True)
class AnalyticsConfig:
    thresholds: ClarityThresholds = field(default_factory=ClarityThresholds)
    max_skew_ms: int = 60_000


@dataclass(frozen=True)
class DeviceEntry:
    device: DeviceConfig
    profile: EnvironmentProfile


@dataclass(frozen=True)
class StationConfig:
    broker: BrokerConfig | None
    devices: tuple[DeviceEntry, ...] = ()
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)

    def device(self, device_id: str) -> DeviceEntry:
        for entry in self.devices:
            if entry.device.device_id == device_id:
                return entry
        raise ConfigInvalid(f"no device {device_id!r} in config", field="devices")


def _build(cls, table: dict, where: str, skip: tuple[str, ...] = ()):
    if not isinstance(table, dict):
        raise ConfigInvalid("expected a table", field=where)
    known = {f.name for f in fields(cls) if f.init and not f.name.startswith("_")}
    for key in table:
        if key not in known and key not in skip:
            raise ConfigInvalid("unknown key", field=f"{where}.{key}")
    kwargs = {k: v for k, v in table.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc), field=where) from exc


def parse_config(text: str, base_dir: str | Path = ".") -> StationConfig:
    base = Path(base_dir)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _LINE_RE.search(str(exc))
        raise ConfigInvalid(f"malformed config: {exc}", line=int(m.group(1)) if m else None) from exc

    for key in data:
        if key not in {"broker", "devices", "analytics"}:
            raise ConfigInvalid("unknown section", field=key)

    broker = None
    if "broker" in data:
        table = dict(data["broker"])
        if not isinstance(table.get("token_table", {}), dict):
            raise ConfigInvalid("expected a table of token = device_id", field="broker.token_table")
        if "history_path" in table:
            table["history_path"] = str(base / table["history_path"])
        broker = _build(BrokerConfig, table, "broker")
        for token, device_id in broker.token_table.items():
            if not isinstance(device_id, str):
                raise ConfigInvalid("device id must be a string", field=f"broker.token_table.{token}")

    devices = []
    raw_devices = data.get("devices", [])
    if not isinstance(raw_devices, list):
        raise ConfigInvalid("expected an array of tables ([[devices]])", field="devices")
    for i, raw in enumerate(raw_devices):
        where = f"devices[{i}]"
        if not isinstance(raw, dict):
            raise ConfigInvalid("expected a table", field=where)
        device = _build(DeviceConfig, raw, where, skip=("profile",))
        profile_table = dict(raw.get("profile", {}))
        if profile_table.get("replay_path") is not None:
            profile_table["replay_path"] = str(base / profile_table["replay_path"])
        profile = _build(EnvironmentProfile, profile_table, f"{where}.profile")
        devices.append(DeviceEntry(device, profile))

    ids = [d.device.device_id for d in devices]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ConfigInvalid(f"duplicate device ids {dupes}", field="devices")
    if broker is not None:
        for i, entry in enumerate(devices):
            if entry.device.auth_token not in broker.token_table:
                raise ConfigInvalid("auth_token not present in broker.token_table", field=f"devices[{i}].auth_token")

    analytics_table = dict(data.get("analytics", {}))
    max_skew = analytics_table.pop("max_skew_ms", 60_000)
    thresholds = _build(ClarityThresholds, analytics_table, "analytics")
    if not isinstance(max_skew, int) or max_skew < 0:
        raise ConfigInvalid("must be a non-negative integer", field="analytics.max_skew_ms")
    return StationConfig(broker, tuple(devices), AnalyticsConfig(thresholds, max_skew))


def load_config(path: str | Path) -> StationConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, path.parent)
