"""Read-side HTTP service over the archive: TimeGate datetime negotiation,
TimeMap listing, and memento replay.

Endpoints (all GET):

    {base}/timegate/{uri_r}            302 -> Location: uri_m, Vary: accept-datetime
    {base}/timemap/link/{uri_r}        200, application/link-format
    {base}/memento/{datetime}/{uri_r}  replay of the archived representation

The memento datetime path segment is ISO 8601 basic format at second
precision (``YYYYMMDDHHMMSS``). When several mementos share a second the
generated URI appends ``.mmm`` milliseconds, and on a same-millisecond
collision additionally ``-<sequence>``; bare second-precision URIs written
by hand still resolve (nearest match).

Archived entity headers are replayed under an ``X-Archived-`` prefix; the
replay response's own transport headers (framing, Memento-Datetime, Link)
take precedence and archived framing is never re-emitted live.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import unquote

from .store import ArchiveStore, Memento, NotArchivedError, TimeMap, nearest_memento
from .timefmt import from_basic, from_rfc1123, to_basic, to_rfc1123

_SEGMENT_RE = re.compile(r"^(\d{14})(?:\.(\d{3})(?:-(\d+))?)?$")


class MalformedUriMError(ValueError):
    """The memento URI's datetime segment does not parse."""


@dataclass(frozen=True)
class Link:
    uri: str
    rel: str
    datetime: Optional[datetime] = None

    def format(self) -> str:
        parts = [f"<{self.uri}>", f'rel="{self.rel}"']
        if self.datetime is not None:
            parts.append(f'datetime="{to_rfc1123(self.datetime)}"')
        return "; ".join(parts)


@dataclass(frozen=True)
class NegotiationResult:
    chosen: Memento
    uri_m: str
    links: tuple[Link, ...]


class _SegmentIndex:
    """Per-timemap collision counts so URI segments stay O(1) per memento."""

    def __init__(self, timemap: TimeMap):
        self.by_second: dict[str, int] = {}
        self.by_instant: dict[datetime, int] = {}
        for m in timemap:
            second = to_basic(m.capture_datetime)
            self.by_second[second] = self.by_second.get(second, 0) + 1
            self.by_instant[m.capture_datetime] = self.by_instant.get(m.capture_datetime, 0) + 1

    def segment_for(self, memento: Memento) -> str:
        segment = to_basic(memento.capture_datetime)
        if self.by_second[segment] > 1:
            segment += f".{memento.capture_datetime.microsecond // 1000:03d}"
            if self.by_instant[memento.capture_datetime] > 1:
                segment += f"-{memento.sequence}"
        return segment


def uri_m_for(base: str, memento: Memento, timemap: TimeMap,
              index: Optional[_SegmentIndex] = None) -> str:
    """Shortest memento URI that resolves back to exactly this memento."""
    index = index or _SegmentIndex(timemap)
    return f"{base}/memento/{index.segment_for(memento)}/{memento.uri_r}"


def parse_datetime_segment(segment: str) -> tuple[datetime, timedelta, Optional[int]]:
    """-> (start instant, precision window, explicit sequence or None)."""
    m = _SEGMENT_RE.match(segment)
    if not m:
        raise MalformedUriMError(segment)
    try:
        start = from_basic(m.group(1))
    except ValueError as exc:
        raise MalformedUriMError(segment) from exc
    if m.group(2) is None:
        return start, timedelta(seconds=1), None
    start += timedelta(milliseconds=int(m.group(2)))
    seq = int(m.group(3)) if m.group(3) is not None else None
    return start, timedelta(milliseconds=1), seq


def select_memento(timemap: TimeMap, segment: str) -> Memento:
    """Memento addressed by a datetime path segment.

    Exact (window, sequence) matches win; otherwise the earliest memento in
    the addressed window; otherwise nearest-match like a TimeGate.
    """
    if not timemap.mementos:
        raise NotArchivedError(timemap.uri_r)
    start, window, seq = parse_datetime_segment(segment)
    in_window = [m for m in timemap if start <= m.capture_datetime < start + window]
    if seq is not None:
        for m in in_window:
            if m.sequence == seq:
                return m
    elif in_window:
        return in_window[0]
    return nearest_memento(timemap, start)


def timegate_negotiate(
    store: ArchiveStore, base: str, uri_r: str, accept_datetime: Optional[datetime] = None
) -> NegotiationResult:
    """Negotiate to the best memento; no accept-datetime means most recent."""
    timemap = store.list_timemap(uri_r)
    if not timemap.mementos:
        raise NotArchivedError(uri_r)
    if accept_datetime is None:
        chosen = timemap.mementos[-1]
    else:
        chosen = nearest_memento(timemap, accept_datetime)
    return NegotiationResult(
        chosen=chosen,
        uri_m=uri_m_for(base, chosen, timemap),
        links=tuple(memento_links(base, chosen, timemap)),
    )


def memento_links(base: str, chosen: Memento, timemap: TimeMap) -> list[Link]:
    """Link graph for one memento: original, timegate, timemap, neighbours."""
    index = _SegmentIndex(timemap)
    links = [
        Link(chosen.uri_r, "original"),
        Link(f"{base}/timegate/{chosen.uri_r}", "timegate"),
        Link(f"{base}/timemap/link/{chosen.uri_r}", "timemap"),
        Link(uri_m_for(base, chosen, timemap, index), "memento", chosen.capture_datetime),
    ]
    mementos = timemap.mementos
    idx = mementos.index(chosen)
    first, last = mementos[0], mementos[-1]

    def add(m: Memento, rel: str) -> None:
        links.append(Link(uri_m_for(base, m, timemap, index), rel, m.capture_datetime))

    if first is not chosen:
        add(first, "first memento")
    if last is not chosen:
        add(last, "last memento")
    if idx > 0:
        add(mementos[idx - 1], "prev memento")
    if idx < len(mementos) - 1:
        add(mementos[idx + 1], "next memento")
    return links


def serialize_timemap(timemap: TimeMap, base: str) -> str:
    """application/link-format document for one URI's mementos."""
    entries = [
        Link(timemap.uri_r, "original"),
        Link(f"{base}/timegate/{timemap.uri_r}", "timegate"),
    ]
    index = _SegmentIndex(timemap)
    mementos = timemap.mementos
    for i, m in enumerate(mementos):
        rel = "memento"
        if len(mementos) == 1:
            rel = "first last memento"
        elif i == 0:
            rel = "first memento"
        elif i == len(mementos) - 1:
            rel = "last memento"
        entries.append(Link(uri_m_for(base, m, timemap, index), rel, m.capture_datetime))
    return ",\n".join(e.format() for e in entries) + "\n"


class _AccessHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "txarc-access"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    @property
    def service(self) -> "MementoService":
        return self.server.service  # type: ignore[attr-defined]

    def do_GET(self):
        path = self.path
        if path.startswith("/timegate/"):
            self._timegate(unquote(path[len("/timegate/"):]))
        elif path.startswith("/timemap/link/"):
            self._timemap(unquote(path[len("/timemap/link/"):]))
        elif path.startswith("/memento/"):
            rest = path[len("/memento/"):]
            segment, _, uri_r = rest.partition("/")
            self._memento(segment, unquote(uri_r))
        else:
            self._plain(404, b"not found\n")

    def _timegate(self, uri_r: str) -> None:
        accept = None
        raw = self.headers.get("Accept-Datetime")
        if raw is not None:
            try:
                accept = from_rfc1123(raw)
            except (ValueError, TypeError):
                self._plain(400, b"bad Accept-Datetime\n")
                return
        try:
            result = timegate_negotiate(self.service.store, self.service.base, uri_r, accept)
        except NotArchivedError:
            self._plain(404, b"not archived\n")
            return
        body = b""
        self.send_response_only(302)
        self.send_header("Location", result.uri_m)
        self.send_header("Vary", "accept-datetime")
        self.send_header("Link", ", ".join(l.format() for l in result.links))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()

    def _timemap(self, uri_r: str) -> None:
        timemap = self.service.store.list_timemap(uri_r)
        body = serialize_timemap(timemap, self.service.base).encode("utf-8")
        self.send_response_only(200)
        self.send_header("Content-Type", "application/link-format")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _memento(self, segment: str, uri_r: str) -> None:
        store = self.service.store
        timemap = store.list_timemap(uri_r)
        try:
            memento = select_memento(timemap, segment)
        except MalformedUriMError:
            self._plain(400, b"bad datetime segment\n")
            return
        except NotArchivedError:
            self._plain(404, b"not archived\n")
            return
        body = store.get_body(memento.body_ref)
        self.send_response_only(memento.status)
        self.send_header("Memento-Datetime", to_rfc1123(memento.capture_datetime))
        self.send_header(
            "Link", ", ".join(l.format() for l in memento_links(self.service.base, memento, timemap))
        )
        for name, value in memento.headers:
            self.send_header(f"X-Archived-{name}", value)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _plain(self, status: int, body: bytes) -> None:
        self.send_response_only(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class MementoService:
    """Threaded HTTP server exposing timegate/timemap/memento endpoints."""

    def __init__(self, store: ArchiveStore, host: str = "127.0.0.1", port: int = 0,
                 public_base: Optional[str] = None):
        self.store = store
        self._httpd = ThreadingHTTPServer((host, port), _AccessHandler)
        self._httpd.daemon_threads = True
        self._httpd.service = self  # type: ignore[attr-defined]
        self.host, self.port = self._httpd.server_address[:2]
        self.base = public_base or f"http://{self.host}:{self.port}"
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "MementoService":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join()
