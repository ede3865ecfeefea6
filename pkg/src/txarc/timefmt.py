"""Datetime formatting helpers shared across the archive.

All archive timestamps are UTC with millisecond precision. Three encodings
are used on the wire and on disk:

* ISO 8601 with milliseconds and a ``Z`` suffix (store index files),
* RFC 1123 (``Memento-Datetime``, ``Accept-Datetime``, link ``datetime=``),
* ISO 8601 basic, second precision (memento URI path segments).
"""

from __future__ import annotations

from datetime import datetime, timezone
from email.utils import format_datetime, parsedate_to_datetime

ISO_MS = "%Y-%m-%dT%H:%M:%S.%f"
BASIC_SECONDS = "%Y%m%d%H%M%S"


def utc_now_ms() -> datetime:
    """Current UTC time truncated to millisecond precision."""
    return truncate_ms(datetime.now(timezone.utc))


def truncate_ms(dt: datetime) -> datetime:
    """Drop sub-millisecond precision; naive datetimes are taken as UTC."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def to_iso_ms(dt: datetime) -> str:
    """``2012-01-14T07:00:00.123Z``"""
    dt = truncate_ms(dt)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


def from_iso_ms(text: str) -> datetime:
    if not text.endswith("Z"):
        raise ValueError(f"expected trailing Z: {text!r}")
    dt = datetime.strptime(text[:-1], ISO_MS)
    return dt.replace(tzinfo=timezone.utc)


def to_rfc1123(dt: datetime) -> str:
    """``Sat, 14 Jan 2012 07:00:00 GMT`` (second precision, truncated)."""
    dt = truncate_ms(dt).replace(microsecond=0)
    return format_datetime(dt, usegmt=True)


def from_rfc1123(text: str) -> datetime:
    dt = parsedate_to_datetime(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def to_basic(dt: datetime) -> str:
    """``20120114070000`` (second precision, truncated)."""
    return truncate_ms(dt).strftime(BASIC_SECONDS)


def from_basic(text: str) -> datetime:
    dt = datetime.strptime(text, BASIC_SECONDS)
    return dt.replace(tzinfo=timezone.utc)


def to_warc_date(dt: datetime) -> str:
    """``2012-01-14T07:00:00Z`` (WARC-Date, second precision)."""
    dt = truncate_ms(dt).replace(microsecond=0)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def from_warc_date(text: str) -> datetime:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    return dt.replace(tzinfo=timezone.utc)
