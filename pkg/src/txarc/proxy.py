"""Reverse proxy that serves origin responses unchanged, decorates them with
Memento discovery links, and forwards a copy of every capturable response to
the archive store off the client path.

The client-visible response is byte-identical to the origin's body and
status; headers differ only by the appended ``Link`` discovery header (and
exact ``Content-Length`` reframing). Capture happens after the response has
been written: the handler enqueues a :class:`CaptureEvent` and one or more
drain workers submit events to the store, so archive latency never shows up
in client latency. A bounded queue with drop-and-count overflow is the
default; completeness experiments configure an unbounded queue.

Operational counters are exposed at ``/-/stats`` as ``key:value`` lines.
"""

from __future__ import annotations

import http.client
import queue
import threading
from dataclasses import dataclass, field
from datetime import datetime
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .store import ArchivePolicy, ArchiveStore, Candidate
from .timefmt import utc_now_ms
from .warc import HOP_BY_HOP

DROP = "drop-and-count"
BLOCK = "block"

ACCEPTED = "accepted"
DROPPED = "dropped"

DEFAULT_QUEUE_CAPACITY = 10_000
DEFAULT_MAX_CAPTURE_BYTES = 16 * 1024 * 1024


@dataclass(frozen=True)
class ProxyConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    origin_host: str = "127.0.0.1"
    origin_port: int = 8081
    archive_base: str = "http://127.0.0.1:9999"
    policy: ArchivePolicy = field(default_factory=ArchivePolicy)
    capture_enabled: bool = True
    capture_queue_capacity: Optional[int] = DEFAULT_QUEUE_CAPACITY  # None = unbounded
    overflow_policy: str = DROP
    capturable_statuses: tuple[range, ...] = (range(200, 300),)
    max_capture_bytes: int = DEFAULT_MAX_CAPTURE_BYTES
    drain_workers: int = 1
    upstream_timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.capture_queue_capacity is not None and self.capture_queue_capacity < 1:
            raise ValueError("bounded queue capacity must be >= 1")
        if self.overflow_policy not in (DROP, BLOCK):
            raise ValueError(f"unknown overflow policy: {self.overflow_policy!r}")
        if self.drain_workers < 1:
            raise ValueError("need at least one drain worker")

    def is_capturable(self, status: int) -> bool:
        return any(status in r for r in self.capturable_statuses)


@dataclass(frozen=True)
class CaptureEvent:
    uri_r: str
    capture_datetime: datetime
    status: int
    headers: tuple[tuple[str, str], ...]
    body: bytes
    enqueued_at: datetime

    def candidate(self) -> Candidate:
        return Candidate(self.uri_r, self.status, self.headers, self.body,
                         self.capture_datetime)


class ProxyStats:
    """Thread-safe operational counters."""

    FIELDS = ("served", "captured", "dropped", "store_failures", "oversized",
              "origin_errors")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        for name in self.FIELDS:
            setattr(self, name, 0)

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {name: getattr(self, name) for name in self.FIELDS}

    def render(self) -> str:
        return "".join(f"{k}:{v}\n" for k, v in self.snapshot().items())


class _UpstreamPool:
    """Small LIFO pool of keep-alive connections to the origin."""

    def __init__(self, host: str, port: int, timeout: float):
        self.host, self.port, self.timeout = host, port, timeout
        self._pool: list[http.client.HTTPConnection] = []
        self._lock = threading.Lock()

    def get(self) -> tuple[http.client.HTTPConnection, bool]:
        with self._lock:
            if self._pool:
                return self._pool.pop(), True
        return http.client.HTTPConnection(self.host, self.port, timeout=self.timeout), False

    def put(self, conn: http.client.HTTPConnection) -> None:
        with self._lock:
            if len(self._pool) < 32:
                self._pool.append(conn)
                return
        conn.close()

    def close_all(self) -> None:
        with self._lock:
            for conn in self._pool:
                conn.close()
            self._pool.clear()


class _ProxyHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    @property
    def proxy(self) -> "CaptureProxy":
        return self.server.proxy  # type: ignore[attr-defined]

    def _relay(self, method: str) -> None:
        if self.path == "/-/stats":
            body = self.proxy.stats.render().encode("ascii")
            self.send_response_only(200)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if method != "HEAD":
                self.wfile.write(body)
            return

        request_body = b""
        length = self.headers.get("Content-Length")
        if length:
            request_body = self.rfile.read(int(length))

        result = self.proxy.fetch_upstream(method, self.path, self.headers.items(),
                                           request_body)
        if result is None:
            self.proxy.stats.bump("origin_errors")
            body = b"origin unreachable\n"
            self.send_response_only(502, "Bad Gateway")
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if method != "HEAD":
                self.wfile.write(body)
            return

        status, reason, headers, body = result
        completed_at = utc_now_ms()
        uri_r = self.proxy.uri_r_for(self.headers.get("Host"), self.path)

        out_headers = list(headers)
        out_headers.append(("Link", self.proxy.discovery_link(uri_r)))

        try:
            self.send_response_only(status, reason)
            has_body = method != "HEAD" and status != 304
            for name, value in out_headers:
                if has_body and name.lower() == "content-length":
                    continue  # reframed below with the exact relayed length
                self.send_header(name, value)
            if has_body:
                self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if has_body:
                self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            return
        finally:
            self.proxy.stats.bump("served")

        # Capture strictly after the client has its bytes.
        if (
            self.proxy.config.capture_enabled
            and method == "GET"
            and status != 304
            and self.proxy.config.is_capturable(status)
        ):
            if len(body) > self.proxy.config.max_capture_bytes:
                self.proxy.stats.bump("oversized")
            else:
                self.proxy.enqueue(CaptureEvent(
                    uri_r=uri_r,
                    capture_datetime=completed_at,
                    status=status,
                    headers=tuple(out_headers),
                    body=body,
                    enqueued_at=utc_now_ms(),
                ))

    def do_GET(self):
        self._relay("GET")

    def do_HEAD(self):
        self._relay("HEAD")

    def do_POST(self):
        self._relay("POST")

    def do_PUT(self):
        self._relay("PUT")

    def do_DELETE(self):
        self._relay("DELETE")

    def do_OPTIONS(self):
        self._relay("OPTIONS")


_SENTINEL = object()


class CaptureProxy:
    """Run a capture proxy in front of an origin, archiving into `store`."""

    def __init__(self, config: ProxyConfig, store: ArchiveStore):
        self.config = config
        self.store = store
        self.stats = ProxyStats()
        self._pool = _UpstreamPool(config.origin_host, config.origin_port,
                                   config.upstream_timeout)
        self._httpd = ThreadingHTTPServer((config.listen_host, config.listen_port),
                                          _ProxyHandler)
        self._httpd.daemon_threads = True
        self._httpd.proxy = self  # type: ignore[attr-defined]
        self.host, self.port = self._httpd.server_address[:2]
        self._drain_gate = threading.Event()
        self._drain_gate.set()
        workers = config.drain_workers
        per_queue = None
        if config.capture_queue_capacity is not None:
            per_queue = max(1, config.capture_queue_capacity // workers)
        self._queues = [queue.Queue(maxsize=per_queue or 0) for _ in range(workers)]
        self._drainers: list[threading.Thread] = []
        self._serve_thread: Optional[threading.Thread] = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "CaptureProxy":
        for q in self._queues:
            t = threading.Thread(target=self._drain, args=(q,), daemon=True)
            t.start()
            self._drainers.append(t)
        self._serve_thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._serve_thread.start()
        return self

    def stop(self, flush: bool = True) -> None:
        """Stop accepting requests; by default drain all queued captures first."""
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._serve_thread:
            self._serve_thread.join()
        if not flush:
            for q in self._queues:
                while True:
                    try:
                        q.get_nowait()
                    except queue.Empty:
                        break
        self._drain_gate.set()
        for q in self._queues:
            q.put(_SENTINEL)
        for t in self._drainers:
            t.join()
        self._drainers.clear()
        self._pool.close_all()

    def flush(self) -> None:
        """Block until every accepted capture so far has been submitted."""
        for q in self._queues:
            q.join()

    # test seam: hold the drain to observe queue-full behavior
    def pause_drain(self) -> None:
        self._drain_gate.clear()

    def resume_drain(self) -> None:
        self._drain_gate.set()

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    # -- request path ----------------------------------------------------------

    def fetch_upstream(self, method, path, req_headers, body):
        """Forward a request to the origin; one retry on a stale pooled link."""
        for attempt in (0, 1):
            conn, reused = self._pool.get()
            try:
                conn.putrequest(method, path, skip_host=True, skip_accept_encoding=True)
                sent_host = False
                for name, value in req_headers:
                    lname = name.lower()
                    if lname in HOP_BY_HOP:
                        continue
                    if lname == "host":
                        sent_host = True
                    if lname == "content-length":
                        continue
                    conn.putheader(name, value)
                if not sent_host:
                    conn.putheader("Host", f"{self.config.origin_host}:{self.config.origin_port}")
                if body:
                    conn.putheader("Content-Length", str(len(body)))
                conn.endheaders(body if body else None)
                resp = conn.getresponse()
                payload = resp.read()
                headers = [
                    (k, v) for k, v in resp.getheaders() if k.lower() not in HOP_BY_HOP
                ]
                if resp.will_close:
                    conn.close()
                else:
                    self._pool.put(conn)
                return resp.status, resp.reason, headers, payload
            except OSError:
                conn.close()
                if not reused or attempt == 1:
                    return None
        return None

    def uri_r_for(self, host_header: Optional[str], path: str) -> str:
        host = host_header or f"{self.host}:{self.port}"
        return f"http://{host}{path}"

    def discovery_link(self, uri_r: str) -> str:
        return f'<{self.config.archive_base}/timegate/{uri_r}>; rel="timegate"'

    # -- capture path ------------------------------------------------------------

    def enqueue(self, event: CaptureEvent) -> str:
        """Queue a capture; returns ``accepted`` or ``dropped``."""
        q = self._queues[hash(event.uri_r) % len(self._queues)]
        if self.config.overflow_policy == BLOCK:
            q.put(event)
        else:
            try:
                q.put_nowait(event)
            except queue.Full:
                self.stats.bump("dropped")
                return DROPPED
        self.stats.bump("captured")
        return ACCEPTED

    def _drain(self, q: "queue.Queue") -> None:
        while True:
            item = q.get()
            try:
                if item is _SENTINEL:
                    return
                self._drain_gate.wait()
                try:
                    self.store.submit(item.candidate(), self.config.policy)
                except Exception:
                    self.stats.bump("store_failures")
            finally:
                q.task_done()
