"""Decode and validate raw AIS position reports.

Input records are already-decoded position reports, either as comma-delimited
text with a fixed column order::

    entity_id,timestamp,lat,lon,sog,cog[,vessel_type]

or as JSON lines keyed by the same lowercase field names. NMEA/AIVDM binary
decoding is out of scope; upstream decoders produce these records.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

# AIS encodes speed over ground in 0.1 kn steps up to 102.2; anything above
# is the "not available" sentinel and must not reach the model unclamped.
SOG_SENTINEL_KN = 102.2
DEFAULT_SOG_CLAMP_KN = 40.0

CSV_FIELDS = ("entity_id", "timestamp", "lat", "lon", "sog", "cog", "vessel_type")


class IngestError(ValueError):
    """Base class for record-level ingest failures. Names one field."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class MalformedRecord(IngestError):
    """Wrong field count or an unparsable value."""


class RangeViolation(IngestError):
    """A parsed value lies outside its documented bounds."""


@dataclass(frozen=True, slots=True)
class AisMessage:
    """One decoded AIS position report.

    ``sog_clamped`` marks messages whose speed carried the AIS "not
    available" sentinel and was clamped during normalization; it is not part
    of the wire format.
    """

    entity_id: str
    timestamp: int  # seconds since Unix epoch, UTC
    lat: float  # degrees, [-90, 90]
    lon: float  # degrees, [-180, 180]
    sog: float  # knots, >= 0
    cog: float  # degrees clockwise from true north, [0, 360)
    vessel_type: int | None = None
    sog_clamped: bool = False


def _reduce_course(cog: float) -> float:
    """Reduce a course into [0, 360). Plain modulo is not enough: for tiny
    negative inputs, cog % 360.0 rounds up to exactly 360.0."""
    cog %= 360.0
    return 0.0 if cog == 360.0 else cog


def _parse_float(field: str, raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise MalformedRecord(field, f"unparsable number {raw!r}") from None
    if not math.isfinite(value):
        raise MalformedRecord(field, f"non-finite value {raw!r}")
    return value


def _parse_timestamp(raw: str | int) -> int:
    try:
        value = int(raw)
    except (ValueError, TypeError):
        raise MalformedRecord("timestamp", f"unparsable integer {raw!r}") from None
    if value <= 0:
        raise RangeViolation("timestamp", f"must be positive, got {value}")
    return value


def _validated(
    entity_id: str,
    timestamp: int,
    lat: float,
    lon: float,
    sog: float,
    cog: float,
    vessel_type: int | None,
) -> AisMessage:
    if not entity_id:
        raise MalformedRecord("entity_id", "empty identifier")
    if not -90.0 <= lat <= 90.0:
        raise RangeViolation("lat", f"{lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise RangeViolation("lon", f"{lon} outside [-180, 180]")
    if not sog >= 0.0:
        raise RangeViolation("sog", f"{sog} is negative")
    # Course encoders emit both 0.0 and 360.0 for due north; reduce modulo
    # 360 rather than rejecting.
    cog = _reduce_course(cog)
    return AisMessage(entity_id, timestamp, lat, lon, sog, cog, vessel_type)


def parse_record(line: str, fmt: str = "csv") -> AisMessage:
    """Parse one delimited text record into a validated message.

    Raises MalformedRecord for structural problems and RangeViolation for
    out-of-bounds lat/lon/sog/timestamp; both name the offending field.
    """
    if fmt == "csv":
        return _parse_csv(line)
    if fmt == "jsonl":
        return _parse_jsonl(line)
    raise ValueError(f"unknown record format {fmt!r}")


def _parse_csv(line: str) -> AisMessage:
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) not in (6, 7):
        raise MalformedRecord("record", f"expected 6 or 7 fields, got {len(parts)}")
    entity_id = parts[0]
    timestamp = _parse_timestamp(parts[1])
    lat = _parse_float("lat", parts[2])
    lon = _parse_float("lon", parts[3])
    sog = _parse_float("sog", parts[4])
    cog = _parse_float("cog", parts[5])
    vessel_type: int | None = None
    if len(parts) == 7 and parts[6] != "":
        try:
            vessel_type = int(parts[6])
        except ValueError:
            raise MalformedRecord("vessel_type", f"unparsable integer {parts[6]!r}") from None
    return _validated(entity_id, timestamp, lat, lon, sog, cog, vessel_type)


def _parse_jsonl(line: str) -> AisMessage:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord("record", f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedRecord("record", "JSON record is not an object")
    missing = [f for f in CSV_FIELDS[:6] if f not in obj]
    if missing:
        raise MalformedRecord(missing[0], "missing field")
    timestamp = _parse_timestamp(obj["timestamp"])
    values = {}
    for field in ("lat", "lon", "sog", "cog"):
        raw = obj[field]
        if not isinstance(raw, (int, float)) or isinstance(raw, bool):
            raise MalformedRecord(field, f"expected number, got {raw!r}")
        if not math.isfinite(raw):
            raise MalformedRecord(field, f"non-finite value {raw!r}")
        values[field] = float(raw)
    vessel_type = obj.get("vessel_type")
    if vessel_type is not None:
        try:
            vessel_type = int(vessel_type)
        except (ValueError, TypeError):
            raise MalformedRecord("vessel_type", f"unparsable integer {vessel_type!r}") from None
    return _validated(
        str(obj["entity_id"]), timestamp,
        values["lat"], values["lon"], values["sog"], values["cog"], vessel_type,
    )


def format_record(msg: AisMessage, fmt: str = "csv") -> str:
    """Render a message back to its wire form; inverse of parse_record."""
    if fmt == "csv":
        fields = [msg.entity_id, str(msg.timestamp), repr(msg.lat), repr(msg.lon),
                  repr(msg.sog), repr(msg.cog)]
        if msg.vessel_type is not None:
            fields.append(str(msg.vessel_type))
        return ",".join(fields)
    if fmt == "jsonl":
        obj = {
            "entity_id": msg.entity_id,
            "timestamp": msg.timestamp,
            "lat": msg.lat,
            "lon": msg.lon,
            "sog": msg.sog,
            "cog": msg.cog,
        }
        if msg.vessel_type is not None:
            obj["vessel_type"] = msg.vessel_type
        return json.dumps(obj)
    raise ValueError(f"unknown record format {fmt!r}")


def normalize_message(msg: AisMessage, clamp_max_kn: float = DEFAULT_SOG_CLAMP_KN) -> AisMessage:
    """Reduce course modulo 360 and clamp sentinel speeds.

    Total and idempotent: an already-normal message comes back unchanged.
    """
    cog = _reduce_course(msg.cog)
    sog = msg.sog
    clamped = msg.sog_clamped
    if sog > SOG_SENTINEL_KN:
        sog = clamp_max_kn
        clamped = True
    if cog == msg.cog and sog == msg.sog and clamped == msg.sog_clamped:
        return msg
    return dataclasses.replace(msg, cog=cog, sog=sog, sog_clamped=clamped)


def iter_records(stream: TextIO | Iterable[str], fmt: str = "csv") -> Iterator[tuple[int, str]]:
    """Yield (line_number, stripped_line) for non-blank input lines."""
    for lineno, line in enumerate(stream, start=1):
        stripped = line.strip()
        if stripped:
            yield lineno, stripped
