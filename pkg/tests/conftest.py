import http.client
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def http_get(host, port, path, headers=None, timeout=10, method="GET", body=None):
    """One-shot request; returns (status, header_items, body_bytes)."""
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request(method, path, body=body, headers=dict(headers or {}))
        resp = conn.getresponse()
        data = resp.read()
        return resp.status, resp.getheaders(), data
    finally:
        conn.close()


def header_values(header_items, name):
    return [v for k, v in header_items if k.lower() == name.lower()]


class ScriptedOrigin:
    """Tiny origin server: maps paths to (status, headers, body) responses.

    Optional per-request delay and a request log for audits.
    """

    def __init__(self, routes=None, delay=0.0):
        self.routes = dict(routes or {})
        self.delay = delay
        self.requests = []
        self._lock = threading.Lock()
        self.inflight = 0
        self.max_inflight = 0
        origin = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _serve(self, send_body=True):
                import time

                with origin._lock:
                    origin.inflight += 1
                    origin.max_inflight = max(origin.max_inflight, origin.inflight)
                    origin.requests.append(self.path)
                try:
                    if origin.delay:
                        time.sleep(origin.delay)
                    entry = origin.routes.get(self.path)
                    if entry is None:
                        status, headers, body = 404, [("Content-Type", "text/plain")], b"missing"
                    else:
                        status, headers, body = entry
                    self.send_response_only(status)
                    for k, v in headers:
                        self.send_header(k, v)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    if send_body:
                        self.wfile.write(body)
                finally:
                    with origin._lock:
                        origin.inflight -= 1

            def do_GET(self):
                self._serve()

            def do_HEAD(self):
                self._serve(send_body=False)

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self.host, self.port = self._httpd.server_address[:2]
        self._thread = None

    def __enter__(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join()
