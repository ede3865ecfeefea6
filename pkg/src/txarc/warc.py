"""WARC/1.0 serialization of archived representations, plus a strict parser
used as the round-trip check for exports.

Each export writes one ``warcinfo`` record followed by one ``response``
record per selected memento in (uri, datetime) order. The HTTP payload of a
response record is reconstructed deterministically:

    HTTP/1.1 <status> <reason>
    <archived headers, minus hop-by-hop and framing headers>
    Content-Length: <exact body length>

    <body bytes>

``WARC-Record-ID`` is a fresh UUID URN per export, so two exports of the
same store differ in bytes; comparisons go through :func:`verify_warc`,
which returns the content tuples.
"""

from __future__ import annotations

import hashlib
import io
import uuid
from dataclasses import dataclass
from datetime import datetime
from http.client import responses as _reason_phrases
from typing import BinaryIO, Optional

from .store import ArchiveStore
from .timefmt import from_warc_date, to_warc_date, utc_now_ms

CRLF = b"\r\n"

# Connection-level headers that make no sense in a reconstructed payload.
HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
}


class MalformedWarcError(ValueError):
    """Record framing violation, with the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class InvalidSelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ExportSelection:
    uri_prefix: Optional[str] = None
    from_datetime: Optional[datetime] = None
    until_datetime: Optional[datetime] = None

    def __post_init__(self) -> None:
        if (
            self.from_datetime is not None
            and self.until_datetime is not None
            and self.from_datetime > self.until_datetime
        ):
            raise InvalidSelectionError("selection from-datetime is after until-datetime")

    def matches(self, uri_r: str, capture_datetime: datetime) -> bool:
        if self.uri_prefix is not None and not uri_r.startswith(self.uri_prefix):
            return False
        if self.from_datetime is not None and capture_datetime < self.from_datetime:
            return False
        if self.until_datetime is not None and capture_datetime > self.until_datetime:
            return False
        return True


def reconstruct_http_response(status: int, headers, body: bytes) -> bytes:
    """Deterministic HTTP/1.1 response bytes for a stored representation."""
    reason = _reason_phrases.get(status, "Unknown")
    lines = [f"HTTP/1.1 {status} {reason}".encode("latin-1")]
    for name, value in headers:
        if name.lower() in HOP_BY_HOP or name.lower() == "content-length":
            continue
        lines.append(f"{name}: {value}".encode("latin-1"))
    lines.append(b"Content-Length: %d" % len(body))
    return CRLF.join(lines) + CRLF + CRLF + body


def _write_record(out: BinaryIO, warc_headers: list[tuple[str, str]], payload: bytes) -> None:
    out.write(b"WARC/1.0" + CRLF)
    for name, value in warc_headers:
        out.write(f"{name}: {value}".encode("latin-1") + CRLF)
    out.write(f"Content-Length: {len(payload)}".encode("ascii") + CRLF)
    out.write(CRLF)
    out.write(payload)
    out.write(CRLF + CRLF)


def _record_id() -> str:
    return f"<urn:uuid:{uuid.uuid4()}>"


def export_warc(store: ArchiveStore, selection: ExportSelection, destination: BinaryIO) -> int:
    """Write selected mementos as WARC/1.0; returns the response-record count."""
    info_payload = (
        b"software: txarc/0.1.0" + CRLF + b"format: WARC File Format 1.0" + CRLF
    )
    _write_record(
        destination,
        [
            ("WARC-Type", "warcinfo"),
            ("WARC-Record-ID", _record_id()),
            ("WARC-Date", to_warc_date(utc_now_ms())),
            ("Content-Type", "application/warc-fields"),
        ],
        info_payload,
    )
    count = 0
    for uri_r in store.uris():
        for memento in store.list_timemap(uri_r):
            if not selection.matches(memento.uri_r, memento.capture_datetime):
                continue
            body = store.get_body(memento.body_ref)
            payload = reconstruct_http_response(memento.status, memento.headers, body)
            _write_record(
                destination,
                [
                    ("WARC-Type", "response"),
                    ("WARC-Record-ID", _record_id()),
                    ("WARC-Target-URI", memento.uri_r),
                    ("WARC-Date", to_warc_date(memento.capture_datetime)),
                    ("Content-Type", "application/http; msgtype=response"),
                ],
                payload,
            )
            count += 1
    return count


def verify_warc(source: bytes | BinaryIO) -> list[tuple[str, datetime, str]]:
    """Parse a WARC/1.0 byte stream with strict framing.

    Returns one ``(uri, capture datetime, sha256 hex of body)`` tuple per
    response record; raises :class:`MalformedWarcError` on framing damage.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    results = []
    offset = 0
    while True:
        line = source.readline()
        if not line:
            return results
        if line.rstrip(b"\r\n") != b"WARC/1.0":
            raise MalformedWarcError(f"expected WARC/1.0 version line, got {line!r}", offset)
        record_start = offset
        offset += len(line)
        headers: dict[str, str] = {}
        while True:
            line = source.readline()
            if not line:
                raise MalformedWarcError("truncated record header", offset)
            offset += len(line)
            if line == CRLF:
                break
            if not line.endswith(CRLF):
                raise MalformedWarcError("header line missing CRLF", offset)
            name, sep, value = line[:-2].decode("latin-1").partition(":")
            if not sep:
                raise MalformedWarcError(f"malformed header line {line!r}", offset)
            headers[name.strip().lower()] = value.strip()
        try:
            length = int(headers["content-length"])
        except (KeyError, ValueError):
            raise MalformedWarcError("missing or bad Content-Length", record_start) from None
        payload = source.read(length)
        if len(payload) != length:
            raise MalformedWarcError("payload shorter than Content-Length", offset)
        offset += length
        trailer = source.read(4)
        if trailer != CRLF + CRLF:
            raise MalformedWarcError("record not followed by two CRLF pairs", offset)
        offset += 4
        if headers.get("warc-type") == "response":
            uri = headers.get("warc-target-uri")
            date = headers.get("warc-date")
            if uri is None or date is None:
                raise MalformedWarcError("response record missing URI or date", record_start)
            body = _payload_body(payload, record_start)
            results.append((uri, from_warc_date(date), hashlib.sha256(body).hexdigest()))


def _payload_body(payload: bytes, record_start: int) -> bytes:
    split = payload.find(CRLF + CRLF)
    if split < 0:
        raise MalformedWarcError("http payload has no header/body separator", record_start)
    return payload[split + 4:]
