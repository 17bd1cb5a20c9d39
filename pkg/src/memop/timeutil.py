"""RFC3339 timestamps and ISO-8601 durations."""

from __future__ import annotations

import re
from datetime import datetime, timedelta, timezone
from typing import Union

import isodate

UTC = timezone.utc

# open-interval sentinels for time ranges
NEG_INF = datetime.min.replace(tzinfo=UTC)
POS_INF = datetime.max.replace(tzinfo=UTC)

_RFC3339 = re.compile(
    r"^\d{4}-\d{2}-\d{2}[Tt]\d{2}:\d{2}:\d{2}(\.\d+)?([Zz]|[+-]\d{2}:\d{2})$"
)

Duration = Union[timedelta, isodate.Duration]


def is_timestamp(value: object) -> bool:
    if not isinstance(value, str) or not _RFC3339.match(value):
        return False
    try:
        isodate.parse_datetime(value)
    except (isodate.ISO8601Error, ValueError):
        return False
    return True


def parse_timestamp(value: str) -> datetime:
    """Parse an RFC3339 timestamp; the offset is mandatory."""
    if not isinstance(value, str) or not _RFC3339.match(value):
        raise ValueError(f"not an RFC3339 timestamp with offset: {value!r}")
    try:
        return isodate.parse_datetime(value)
    except isodate.ISO8601Error as exc:
        raise ValueError(str(exc)) from exc


def to_utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError("naive datetime")
    if dt in (NEG_INF, POS_INF):
        return dt
    return dt.astimezone(UTC)


def format_timestamp(dt: datetime) -> str:
    """Render as UTC RFC3339 with a trailing Z."""
    dt = to_utc(dt)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_duration(value: str) -> Duration:
    if not isinstance(value, str) or not value.startswith("P"):
        raise ValueError(f"not an ISO-8601 duration: {value!r}")
    try:
        return isodate.parse_duration(value)
    except isodate.ISO8601Error as exc:
        raise ValueError(str(exc)) from exc


def is_duration(value: object) -> bool:
    try:
        parse_duration(value)  # type: ignore[arg-type]
    except ValueError:
        return False
    return True


def wall_clock() -> datetime:
    return datetime.now(UTC)


def fixed_clock(at: datetime | str):
    """Return a clock callable pinned to ``at``."""
    if isinstance(at, str):
        at = parse_timestamp(at)
    pinned = to_utc(at)
    return lambda: pinned
