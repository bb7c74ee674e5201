"""DHT22 frame codec and a seeded environment that stands in for the sensor.

Frame layout (40 bits, most significant octet first)::

    +--------+--------+--------+--------+----------+
    | RH hi  | RH lo  | T hi   | T lo   | checksum |
    +--------+--------+--------+--------+----------+

    RH word   = relative humidity x 10
    T word    = |temperature| x 10 in bits 0..14, bit 15 set for negatives
    checksum  = (RH hi + RH lo + T hi + T lo) mod 256
"""

from __future__ import annotations

import bisect
import csv
import enum
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ChecksumMismatch, OutOfRange, ReplayExhausted, TooSoon

FRAME_SIZE = 5
MIN_INTERVAL_MS = 2000

TEMPERATURE_MIN_C = -40.0
TEMPERATURE_MAX_C = 80.0
HUMIDITY_MIN_RH = 0.0
HUMIDITY_MAX_RH = 100.0

MAX_HUMIDITY_WORD = 1000
MAX_TEMPERATURE_MAGNITUDE = 800
_SIGN_BIT = 0x8000
_MAGNITUDE_MASK = 0x7FFF

REPLAY_COLUMNS = ("timestamp_ms", "temperature_c", "humidity_rh")


def to_tenths(value: float) -> int:
    """Round to an integer count of tenths, halves away from zero."""
    n = math.floor(abs(value) * 10.0 + 0.5)
    return -n if value < 0 else n


def quantize(value: float) -> float:
    """Snap ``value`` onto the 0.1 grid (round half away from zero)."""
    n = to_tenths(value)
    return 0.0 if n == 0 else n / 10


def _on_grid(value: float) -> bool:
    return abs(value * 10.0 - round(value * 10.0)) < 1e-6


@dataclass(frozen=True)
class Reading:
    """A decoded sensor sample."""

    temperature_c: float
    humidity_rh: float
    timestamp_ms: int = 0

    def check(self) -> None:
        """Raise :class:`OutOfRange` unless both values are in span and on the 0.1 grid."""
        t, h = self.temperature_c, self.humidity_rh
        if not (math.isfinite(t) and TEMPERATURE_MIN_C <= t <= TEMPERATURE_MAX_C):
            raise OutOfRange(f"temperature {t} C outside [{TEMPERATURE_MIN_C}, {TEMPERATURE_MAX_C}]")
        if not (math.isfinite(h) and HUMIDITY_MIN_RH <= h <= HUMIDITY_MAX_RH):
            raise OutOfRange(f"humidity {h} %RH outside [{HUMIDITY_MIN_RH}, {HUMIDITY_MAX_RH}]")
        if not (_on_grid(t) and _on_grid(h)):
            raise OutOfRange(f"reading ({t}, {h}) is not on the 0.1 grid")


@dataclass(frozen=True)
class RawFrame:
    octets: bytes

    def __post_init__(self) -> None:
        if len(self.octets) != FRAME_SIZE:
            raise ValueError(f"frame must be {FRAME_SIZE} octets, got {len(self.octets)}")
        object.__setattr__(self, "octets", bytes(self.octets))

    @property
    def humidity_word(self) -> int:
        return (self.octets[0] << 8) | self.octets[1]

    @property
    def temperature_word(self) -> int:
        return (self.octets[2] << 8) | self.octets[3]

    @property
    def checksum(self) -> int:
        return self.octets[4]

    def expected_checksum(self) -> int:
        return sum(self.octets[:4]) & 0xFF

    def to_hex(self) -> str:
        return self.octets.hex().upper()

    @classmethod
    def from_hex(cls, text: str) -> RawFrame:
        text = text.strip()
        if len(text) != 2 * FRAME_SIZE:
            raise ValueError(f"expected {2 * FRAME_SIZE} hex digits, got {len(text)}")
        return cls(bytes.fromhex(text))


def encode_frame(reading: Reading) -> RawFrame:
    reading.check()
    humidity = to_tenths(reading.humidity_rh)
    temp_mag = abs(to_tenths(reading.temperature_c))
    temp_word = temp_mag | (_SIGN_BIT if reading.temperature_c < 0 and temp_mag else 0)
    data = bytes((humidity >> 8, humidity & 0xFF, temp_word >> 8, temp_word & 0xFF))
    return RawFrame(data + bytes((sum(data) & 0xFF,)))


def decode_frame(frame: RawFrame | bytes, timestamp_ms: int = 0) -> Reading:
    """Decode a frame into a :class:`Reading`.

    Raises:
        ChecksumMismatch: the checksum octet disagrees with the data octets.
        OutOfRange: the humidity word exceeds 1000, the temperature magnitude
            exceeds 800, or the value falls outside the sensor span.
    """
    if not isinstance(frame, RawFrame):
        frame = RawFrame(bytes(frame))
    expected = frame.expected_checksum()
    if expected != frame.checksum:
        raise ChecksumMismatch(expected, frame.checksum)
    humidity = frame.humidity_word
    if humidity > MAX_HUMIDITY_WORD:
        raise OutOfRange(f"humidity word {humidity} > {MAX_HUMIDITY_WORD}")
    magnitude = frame.temperature_word & _MAGNITUDE_MASK
    if magnitude > MAX_TEMPERATURE_MAGNITUDE:
        raise OutOfRange(f"temperature magnitude {magnitude} > {MAX_TEMPERATURE_MAGNITUDE}")
    negative = bool(frame.temperature_word & _SIGN_BIT)
    temperature = (-magnitude if negative else magnitude) / 10 if magnitude else 0.0
    reading = Reading(temperature, humidity / 10, timestamp_ms)
    reading.check()
    return reading


class ProfileKind(str, enum.Enum):
    CONSTANT = "constant"
    DIURNAL = "diurnal"
    REPLAY = "replay"


@dataclass(frozen=True)
class EnvironmentProfile:
    """Ground-truth generator parameters.

    ``diurnal`` follows ``base + amplitude * sin(2*pi*t/period)`` on both
    channels; ``replay`` interpolates linearly between rows of a CSV file with
    header ``timestamp_ms,temperature_c,humidity_rh``.
    """

    kind: ProfileKind = ProfileKind.CONSTANT
    base_temperature_c: float = 20.0
    base_humidity_rh: float = 50.0
    amplitude_temperature_c: float = 0.0
    amplitude_humidity_rh: float = 0.0
    period_ms: int = 86_400_000
    noise_stddev_temperature: float = 0.0
    noise_stddev_humidity: float = 0.0
    rng_seed: int = 0
    replay_path: str | None = None
    _replay: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ProfileKind(self.kind))
        if self.kind is ProfileKind.DIURNAL and self.period_ms <= 0:
            raise ValueError("diurnal profile needs period_ms > 0")
        if (self.kind is ProfileKind.REPLAY) != (self.replay_path is not None):
            raise ValueError("replay_path must be given exactly when kind is 'replay'")
        if self.noise_stddev_temperature < 0 or self.noise_stddev_humidity < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def replay_points(self) -> tuple[tuple[int, float, float], ...]:
        if not self._replay and self.replay_path is not None:
            object.__setattr__(self, "_replay", load_replay(self.replay_path))
        return self._replay


def load_replay(path: str | Path) -> tuple[tuple[int, float, float], ...]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != REPLAY_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(REPLAY_COLUMNS)}")
        points = [
            (int(row["timestamp_ms"]), float(row["temperature_c"]), float(row["humidity_rh"]))
            for row in reader
        ]
    if not points:
        raise ValueError(f"{path}: replay file has no rows")
    if any(b[0] <= a[0] for a, b in zip(points, points[1:])):
        raise ValueError(f"{path}: timestamps must be strictly increasing")
    return tuple(points)


def _interpolate(points, t_ms: int) -> tuple[float, float]:
    first, last = points[0][0], points[-1][0]
    if t_ms < first or t_ms > last:
        raise ReplayExhausted(f"t={t_ms} outside replay span [{first}, {last}]")
    times = [p[0] for p in points]
    i = bisect.bisect_left(times, t_ms)
    if times[i] == t_ms:
        return points[i][1], points[i][2]
    (t0, a0, b0), (t1, a1, b1) = points[i - 1], points[i]
    w = (t_ms - t0) / (t1 - t0)
    return a0 + w * (a1 - a0), b0 + w * (b1 - b0)


def _noise_rng(seed: int, t_ms: int) -> random.Random:
    return random.Random((seed << 64) | (t_ms & 0xFFFF_FFFF_FFFF_FFFF))


def ground_truth(profile: EnvironmentProfile, t_ms: int) -> tuple[float, float]:
    """Unquantized (temperature, humidity) at ``t_ms``; noise depends only on (seed, t)."""
    if profile.kind is ProfileKind.CONSTANT:
        temperature, humidity = profile.base_temperature_c, profile.base_humidity_rh
    elif profile.kind is ProfileKind.DIURNAL:
        s = math.sin(2.0 * math.pi * t_ms / profile.period_ms)
        temperature = profile.base_temperature_c + profile.amplitude_temperature_c * s
        humidity = profile.base_humidity_rh + profile.amplitude_humidity_rh * s
    else:
        temperature, humidity = _interpolate(profile.replay_points(), t_ms)

    if profile.noise_stddev_temperature or profile.noise_stddev_humidity:
        rng = _noise_rng(profile.rng_seed, t_ms)
        temperature += rng.gauss(0.0, profile.noise_stddev_temperature)
        humidity += rng.gauss(0.0, profile.noise_stddev_humidity)
    return temperature, humidity


@dataclass
class SensorState:
    profile: EnvironmentProfile
    last_sample_ms: int | None = None
    min_interval_ms: int = MIN_INTERVAL_MS


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def sample(state: SensorState, now_ms: int) -> Reading:
    """Poll the simulated sensor.

    Raises :class:`TooSoon` if fewer than ``min_interval_ms`` have passed
    since the last accepted sample; the state is left untouched in that case.
    """
    if state.last_sample_ms is not None:
        elapsed = now_ms - state.last_sample_ms
        if elapsed < state.min_interval_ms:
            raise TooSoon(state.min_interval_ms - elapsed)
    temperature, humidity = ground_truth(state.profile, now_ms)
    temperature = quantize(_clamp(temperature, TEMPERATURE_MIN_C, TEMPERATURE_MAX_C))
    humidity = quantize(_clamp(humidity, HUMIDITY_MIN_RH, HUMIDITY_MAX_RH))
    state.last_sample_ms = now_ms
    return Reading(temperature, humidity, now_ms)
