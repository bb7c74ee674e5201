"""Comparison of station readings against reference observations.

Percentage error is taken relative to the reference value::

    pct = |measured - reference| / |reference| * 100

and reported to two decimals (half-up). Clarity labels come from relative
humidity bands; see :class:`ClarityThresholds`.
"""

from __future__ import annotations

import bisect
import csv
import enum
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyOverlap, OutOfRange, ZeroReference
from .sensor_codec import HUMIDITY_MAX_RH, HUMIDITY_MIN_RH, TEMPERATURE_MAX_C, TEMPERATURE_MIN_C

REFERENCE_COLUMNS = ("timestamp_ms", "temperature_c", "humidity_rh")

# Published snapshot that cannot be reproduced by either common definition.
PUBLISHED_SNAPSHOT_NOTE = (
    "note: the published snapshot comparison (reference 6 C, measured 4 C) lists a temperature "
    "error of 20; no standard percentage-error definition yields 20 for that pair "
    "(reference-relative 33.33, measured-relative 50.00). This report uses the reference-relative definition."
)

_CENT = Decimal("0.01")


def _dec(x) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(repr(x)) if isinstance(x, float) else Decimal(x)


def _round2(x: Decimal) -> float:
    return float(x.quantize(_CENT, rounding=ROUND_HALF_UP))


def _raw_percentage_error(reference, measured) -> Decimal:
    ref = _dec(reference)
    if ref == 0:
        raise ZeroReference("percentage error is undefined for a zero reference")
    return abs(_dec(measured) - ref) / abs(ref) * 100


def percentage_error(reference, measured) -> float:
    """``|measured - reference| / |reference| * 100`` rounded half-up to 2 decimals.

    >>> percentage_error(96, 98)
    2.08
    >>> percentage_error(6, 4)
    33.33
    """
    return _round2(_raw_percentage_error(reference, measured))


class ClarityLabel(str, enum.Enum):
    CLEAR = "Clear"
    PARTLY_CLOUDY = "PartlyCloudy"
    CLOUDY = "Cloudy"


@dataclass(frozen=True)
class ClarityThresholds:
    """Humidity band edges in %RH. Lower edge of each upper band is inclusive."""

    partly_cloudy_from_rh: float = 60.0
    cloudy_from_rh: float = 85.0

    def __post_init__(self) -> None:
        if not self.partly_cloudy_from_rh < self.cloudy_from_rh:
            raise ValueError("partly_cloudy_from_rh must be below cloudy_from_rh")


DEFAULT_THRESHOLDS = ClarityThresholds()


def classify_clarity(temperature_c: float, humidity_rh: float, thresholds: ClarityThresholds = DEFAULT_THRESHOLDS) -> ClarityLabel:
    if not TEMPERATURE_MIN_C <= temperature_c <= TEMPERATURE_MAX_C:
        raise OutOfRange(f"temperature {temperature_c} C outside sensor span")
    if not HUMIDITY_MIN_RH <= humidity_rh <= HUMIDITY_MAX_RH:
        raise OutOfRange(f"humidity {humidity_rh} %RH outside sensor span")
    if humidity_rh >= thresholds.cloudy_from_rh:
        # freezing fog is still Cloudy; temperature only guards this band
        return ClarityLabel.CLOUDY
    if humidity_rh >= thresholds.partly_cloudy_from_rh:
        return ClarityLabel.PARTLY_CLOUDY
    return ClarityLabel.CLEAR


@dataclass(frozen=True)
class ReferencePoint:
    timestamp_ms: int
    temperature_c: float
    humidity_rh: float


class ReferenceSeries(tuple):
    """Reference observations with strictly increasing timestamps."""

    def __new__(cls, points: Iterable[ReferencePoint | tuple]):
        pts = tuple(p if isinstance(p, ReferencePoint) else ReferencePoint(*p) for p in points)
        for a, b in zip(pts, pts[1:]):
            if b.timestamp_ms <= a.timestamp_ms:
                raise ValueError(f"reference timestamps must be strictly increasing ({a.timestamp_ms} then {b.timestamp_ms})")
        return super().__new__(cls, pts)


def load_reference_csv(path: str | Path) -> ReferenceSeries:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != REFERENCE_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(REFERENCE_COLUMNS)}")
        return ReferenceSeries(
            ReferencePoint(int(row["timestamp_ms"]), float(row["temperature_c"]), float(row["humidity_rh"]))
            for row in reader
        )


@dataclass(frozen=True)
class AlignedPair:
    reference: ReferencePoint
    measured_ms: int
    measured_value: float

    @property
    def skew_ms(self) -> int:
        return abs(self.measured_ms - self.reference.timestamp_ms)


@dataclass
class Alignment:
    pairs: list[AlignedPair] = field(default_factory=list)
    dropped: int = 0


def align_series(reference: Sequence[ReferencePoint], measured: Sequence[tuple[int, float]], max_skew_ms: int) -> Alignment:
    """Greedy nearest-neighbour pairing in measured-time order.

    Each measured point takes the closest still-unused reference point within
    ``max_skew_ms`` (ties go to the earlier reference); each reference point
    is used at most once. Measured points with no candidate are dropped.
    """
    times = [r.timestamp_ms for r in reference]
    used = [False] * len(reference)
    result = Alignment()
    for t, value in measured:
        i = bisect.bisect_left(times, t)
        best = None
        lo, hi = i - 1, i
        # nearest unused on each side
        while lo >= 0 and used[lo]:
            lo -= 1
        while hi < len(times) and used[hi]:
            hi += 1
        for j in (lo, hi):
            if 0 <= j < len(times) and abs(times[j] - t) <= max_skew_ms:
                if best is None or abs(times[j] - t) < abs(times[best] - t):
                    best = j
        if best is None:
            result.dropped += 1
            continue
        used[best] = True
        result.pairs.append(AlignedPair(reference[best], t, value))
    return result


@dataclass(frozen=True)
class ChannelError:
    reference_value: float
    measured_value: float
    mean_pct_error: float
    pairs: int
    skipped_zero_reference: int = 0


@dataclass(frozen=True)
class PairLabel:
    timestamp_ms: int
    temperature_c: float
    humidity_rh: float
    label: ClarityLabel


@dataclass(frozen=True)
class ErrorReport:
    temperature: ChannelError | None
    humidity: ChannelError | None
    pairs: int
    dropped: int
    max_skew_ms: int
    labels: tuple[PairLabel, ...] = ()
    notes: tuple[str, ...] = (PUBLISHED_SNAPSHOT_NOTE,)

    def to_dict(self) -> dict:
        def channel(c: ChannelError | None):
            if c is None:
                return None
            return {
                "reference_value": c.reference_value,
                "measured_value": c.measured_value,
                "mean_pct_error": c.mean_pct_error,
                "pairs": c.pairs,
            }

        return {
            "temperature": channel(self.temperature),
            "humidity": channel(self.humidity),
            "pairs": self.pairs,
            "dropped": self.dropped,
            "max_skew_ms": self.max_skew_ms,
            "labels": [{"ts": p.timestamp_ms, "label": p.label.value} for p in self.labels],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [("Sensor", "Reference", "Measured", "Percentage Error")]
        for name, c in (("Temperature", self.temperature), ("Humidity", self.humidity)):
            if c is None:
                rows.append((name, "-", "-", "-"))
            else:
                rows.append((name, f"{c.reference_value:g}", f"{c.measured_value:g}", f"{c.mean_pct_error:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.append("")
        lines.append(f"pairs={self.pairs} dropped={self.dropped} max_skew_ms={self.max_skew_ms}")
        for p in self.labels:
            lines.append(f"clarity ts={p.timestamp_ms} temperature={p.temperature_c:g} humidity={p.humidity_rh:g} label={p.label.value}")
        lines.extend(self.notes)
        return "\n".join(lines)


def _channel(alignment: Alignment, pick) -> ChannelError | None:
    errors, refs, meas, skipped = [], [], [], 0
    for pair in alignment.pairs:
        ref = pick(pair.reference)
        try:
            errors.append(_raw_percentage_error(ref, pair.measured_value))
        except ZeroReference:
            skipped += 1
            continue
        refs.append(_dec(ref))
        meas.append(_dec(pair.measured_value))
    if not errors:
        return None
    n = len(errors)
    return ChannelError(
        reference_value=float(sum(refs) / n),
        measured_value=float(sum(meas) / n),
        mean_pct_error=_round2(sum(errors) / n),
        pairs=n,
        skipped_zero_reference=skipped,
    )


def build_report(
    reference: Sequence[ReferencePoint],
    measured_temperature: Sequence[tuple[int, float]],
    measured_humidity: Sequence[tuple[int, float]],
    max_skew_ms: int,
    thresholds: ClarityThresholds = DEFAULT_THRESHOLDS,
) -> ErrorReport:
    """Align both channels to ``reference`` and average the per-pair errors.

    Raises :class:`EmptyOverlap` when neither channel forms a single pair.
    """
    temp = align_series(reference, measured_temperature, max_skew_ms)
    hum = align_series(reference, measured_humidity, max_skew_ms)
    temp_channel = _channel(temp, lambda r: r.temperature_c)
    hum_channel = _channel(hum, lambda r: r.humidity_rh)
    if temp_channel is None and hum_channel is None:
        raise EmptyOverlap("no measured point lies within the allowed skew of a reference point")

    by_ref = {p.reference.timestamp_ms: p for p in temp.pairs}
    labels = []
    for h in hum.pairs:
        t = by_ref.get(h.reference.timestamp_ms)
        if t is None:
            continue
        try:
            label = classify_clarity(t.measured_value, h.measured_value, thresholds)
        except OutOfRange:
            continue
        labels.append(PairLabel(h.measured_ms, t.measured_value, h.measured_value, label))

    all_pairs = temp.pairs + hum.pairs
    return ErrorReport(
        temperature=temp_channel,
        humidity=hum_channel,
        pairs=len({p.reference.timestamp_ms for p in all_pairs}),
        dropped=temp.dropped + hum.dropped,
        max_skew_ms=max((p.skew_ms for p in all_pairs), default=0),
        labels=tuple(labels),
    )
