"""Latest-value cache plus append-only JSONL history, one file per device."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from ..errors import BadRange, NotFound

log = logging.getLogger(__name__)

_SAFE_ID = re.compile(r"[A-Za-z0-9_.-]+")


@dataclass(frozen=True)
class PinRecord:
    device_id: str
    pin: int
    value: str
    updated_at_ms: int
    stale: bool = False


@dataclass(frozen=True)
class HistoryEntry:
    timestamp_ms: int
    device_id: str
    pin: int
    value: str

    def to_json(self) -> str:
        return json.dumps(
            {"ts": self.timestamp_ms, "device": self.device_id, "pin": self.pin, "value": self.value},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> HistoryEntry:
        obj = json.loads(line)
        return cls(int(obj["ts"]), str(obj["device"]), int(obj["pin"]), str(obj["value"]))


def history_file(root: str | Path, device_id: str) -> Path:
    if not _SAFE_ID.fullmatch(device_id) or device_id in {".", ".."}:
        raise ValueError(f"device id {device_id!r} is not usable as a file name")
    return Path(root) / f"{device_id}.jsonl"


def read_history_file(path: str | Path) -> list[HistoryEntry]:
    """Parse one history log; a torn final line from a crash is skipped."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            entries.append(HistoryEntry.from_json(line))
        except (ValueError, KeyError):
            if lineno == len(lines):
                log.warning("skipping torn tail line in %s", path)
                continue
            raise
    return entries


class PinStore:
    """Thread-safe pin store. Mutations are serialized under one lock.

    With ``history_path`` set, every write is appended to
    ``<history_path>/<device_id>.jsonl`` before it becomes visible, and the
    latest-value cache is rebuilt from those files on construction.
    """

    def __init__(self, history_path: str | Path | None = None, *, fsync: bool = False) -> None:
        self._root = Path(history_path) if history_path is not None else None
        self._fsync = fsync
        self._lock = threading.Lock()
        self._latest: dict[tuple[str, int], PinRecord] = {}
        self._history: dict[tuple[str, int], list[HistoryEntry]] = defaultdict(list)
        self._files: dict[str, object] = {}
        if self._root is not None:
            self._root.mkdir(parents=True, exist_ok=True)
            self._load()

    def _load(self) -> None:
        for path in sorted(self._root.glob("*.jsonl")):
            for entry in read_history_file(path):
                self._apply(entry)

    def _apply(self, entry: HistoryEntry) -> None:
        key = (entry.device_id, entry.pin)
        self._history[key].append(entry)
        prev = self._latest.get(key)
        ts = entry.timestamp_ms if prev is None else max(prev.updated_at_ms, entry.timestamp_ms)
        self._latest[key] = PinRecord(entry.device_id, entry.pin, entry.value, ts)

    def _file(self, device_id: str):
        fh = self._files.get(device_id)
        if fh is None:
            fh = open(history_file(self._root, device_id), "a", encoding="utf-8")
            self._files[device_id] = fh
        return fh

    def write(self, device_id: str, pin: int, value: str, timestamp_ms: int) -> HistoryEntry:
        entry = HistoryEntry(timestamp_ms, device_id, pin, value)
        with self._lock:
            if self._root is not None:
                fh = self._file(device_id)
                fh.write(entry.to_json() + "\n")
                fh.flush()
                if self._fsync:
                    os.fsync(fh.fileno())
            self._apply(entry)
        return entry

    def get_latest(self, device_id: str, pin: int, now_ms: int | None = None, stale_after_ms: int | None = None) -> PinRecord:
        with self._lock:
            record = self._latest.get((device_id, pin))
        if record is None:
            raise NotFound(f"no value for device {device_id!r} pin {pin}")
        if now_ms is not None and stale_after_ms is not None:
            stale = now_ms - record.updated_at_ms > stale_after_ms
            record = PinRecord(record.device_id, record.pin, record.value, record.updated_at_ms, stale)
        return record

    def get_history(self, device_id: str, pin: int, from_ms: int, to_ms: int) -> list[HistoryEntry]:
        """Entries with ``from_ms <= ts < to_ms`` in arrival order."""
        if from_ms > to_ms:
            raise BadRange(f"from {from_ms} > to {to_ms}")
        with self._lock:
            entries = list(self._history.get((device_id, pin), ()))
        return [e for e in entries if from_ms <= e.timestamp_ms < to_ms]

    def devices(self) -> list[str]:
        with self._lock:
            return sorted({d for d, _ in self._latest})

    def entry_count(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._history.values())

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()
