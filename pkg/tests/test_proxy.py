import random
import threading
import time

import pytest

from conftest import ScriptedOrigin, header_values, http_get
from txarc.proxy import ACCEPTED, BLOCK, DROPPED, CaptureEvent, CaptureProxy, ProxyConfig
from txarc.store import ArchivePolicy, ArchiveStore
from txarc.timefmt import utc_now_ms

HTML = [("Content-Type", "text/html")]


def make_proxy(origin, store, **overrides):
    config = ProxyConfig(
        listen_port=0,
        origin_host=origin.host,
        origin_port=origin.port,
        archive_base="http://archive.example:9999",
        **overrides,
    )
    return CaptureProxy(config, store)


@pytest.fixture
def store(tmp_path):
    return ArchiveStore(tmp_path / "store")


def event(uri="http://h/p", body=b"x"):
    return CaptureEvent(uri, utc_now_ms(), 200, (), body, utc_now_ms())


class TestPassThrough:
    def test_body_and_status_identical_to_origin(self, store):
        body = random.Random(5).randbytes(3000)
        with ScriptedOrigin({"/page": (200, HTML, body)}) as origin:
            direct = http_get(origin.host, origin.port, "/page")
            proxy = make_proxy(origin, store).start()
            try:
                proxied = http_get(proxy.host, proxy.port, "/page")
            finally:
                proxy.stop()
        assert proxied[0] == direct[0] == 200
        assert proxied[2] == direct[2] == body

    def test_headers_differ_only_by_link(self, store):
        with ScriptedOrigin({"/page": (200, HTML + [("X-Custom", "v")], b"hi")}) as origin:
            direct = http_get(origin.host, origin.port, "/page")
            proxy = make_proxy(origin, store).start()
            try:
                proxied = http_get(proxy.host, proxy.port, "/page")
            finally:
                proxy.stop()

        def comparable(items):
            skip = {"date", "server", "link", "connection"}
            return sorted((k.lower(), v) for k, v in items if k.lower() not in skip)

        assert comparable(proxied[1]) == comparable(direct[1])
        assert len(header_values(proxied[1], "Link")) == 1

    def test_fidelity_independent_of_capture_flag(self, store):
        with ScriptedOrigin({"/page": (200, HTML, b"same-bytes")}) as origin:
            results = {}
            for flag in (True, False):
                proxy = make_proxy(origin, store, capture_enabled=flag).start()
                try:
                    results[flag] = http_get(proxy.host, proxy.port, "/page")
                finally:
                    proxy.stop()
        assert results[True][0] == results[False][0]
        assert results[True][2] == results[False][2]

    def test_post_and_head_relayed(self, store):
        with ScriptedOrigin({"/page": (200, HTML, b"content")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                status, headers, body = http_get(proxy.host, proxy.port, "/page",
                                                 method="HEAD")
                assert status == 200
                assert body == b""
                status, _, _ = http_get(proxy.host, proxy.port, "/page", method="POST",
                                        body=b"data")
                assert status == 200
            finally:
                proxy.stop()
        # Neither HEAD nor POST is a capturable representation.
        assert store.memento_count() == 0


class TestLinkDecoration:
    def test_link_appended(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"x")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                _, headers, _ = http_get(proxy.host, proxy.port, "/p")
                host = header_values(headers, "Link")
            finally:
                proxy.stop()
        assert len(host) == 1
        assert host[0].startswith("<http://archive.example:9999/timegate/http://")
        assert host[0].endswith('; rel="timegate"')

    def test_existing_link_preserved_original_first(self, store):
        with ScriptedOrigin(
            {"/p": (200, HTML + [("Link", '<http://x>; rel="other"')], b"x")}
        ) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                _, headers, _ = http_get(proxy.host, proxy.port, "/p")
            finally:
                proxy.stop()
        links = header_values(headers, "Link")
        assert len(links) == 2
        assert links[0] == '<http://x>; rel="other"'
        assert 'rel="timegate"' in links[1]

    def test_decoration_applied_with_capture_off(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"x")}) as origin:
            proxy = make_proxy(origin, store, capture_enabled=False).start()
            try:
                _, headers, _ = http_get(proxy.host, proxy.port, "/p")
            finally:
                proxy.stop()
        assert any('rel="timegate"' in v for v in header_values(headers, "Link"))


class TestCapture:
    def test_capture_on_stores_one_memento(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"payload")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                http_get(proxy.host, proxy.port, "/p")
                proxy.flush()
            finally:
                proxy.stop()
        uris = store.uris()
        assert len(uris) == 1
        tm = store.list_timemap(uris[0])
        assert len(tm) == 1
        assert store.get_body(tm.mementos[0].body_ref) == b"payload"

    def test_capture_off_stores_nothing(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"payload")}) as origin:
            proxy = make_proxy(origin, store, capture_enabled=False).start()
            try:
                for _ in range(5):
                    http_get(proxy.host, proxy.port, "/p")
            finally:
                proxy.stop()
        assert store.memento_count() == 0

    def test_non_2xx_not_captured_by_default(self, store):
        with ScriptedOrigin({"/missing": (404, HTML, b"gone")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                status, _, body = http_get(proxy.host, proxy.port, "/missing")
            finally:
                proxy.stop()
        assert (status, body) == (404, b"gone")
        assert store.memento_count() == 0

    def test_4xx_capturable_when_configured(self, store):
        with ScriptedOrigin({"/missing": (404, HTML, b"gone")}) as origin:
            proxy = make_proxy(origin, store,
                               capturable_statuses=(range(200, 300), range(400, 500))).start()
            try:
                http_get(proxy.host, proxy.port, "/missing")
                proxy.flush()
            finally:
                proxy.stop()
        assert store.memento_count() == 1

    def test_oversized_served_not_captured(self, store):
        big = b"x" * 5000
        with ScriptedOrigin({"/big": (200, HTML, big)}) as origin:
            proxy = make_proxy(origin, store, max_capture_bytes=1000).start()
            try:
                _, _, body = http_get(proxy.host, proxy.port, "/big")
                proxy.flush()
                stats = proxy.stats.snapshot()
            finally:
                proxy.stop()
        assert body == big
        assert store.memento_count() == 0
        assert stats["oversized"] == 1

    def test_origin_down_502_nothing_enqueued(self, store):
        with ScriptedOrigin({}) as origin:
            pass  # closed: port now refuses connections
        proxy = make_proxy(origin, store).start()
        try:
            status, _, _ = http_get(proxy.host, proxy.port, "/p")
            stats = proxy.stats.snapshot()
        finally:
            proxy.stop()
        assert status == 502
        assert stats["origin_errors"] == 1
        assert stats["captured"] == 0
        assert store.memento_count() == 0

    def test_capture_uses_configured_policy(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"same")}) as origin:
            proxy = make_proxy(origin, store, policy=ArchivePolicy("dedup")).start()
            try:
                for _ in range(4):
                    http_get(proxy.host, proxy.port, "/p")
                proxy.flush()
            finally:
                proxy.stop()
        assert store.memento_count() == 1


class TestQueue:
    def test_drop_policy_counts(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=1)
        proxy.start()
        try:
            proxy.pause_drain()
            first = proxy.enqueue(event(body=b"1"))
            second = proxy.enqueue(event(body=b"2"))
            stats = proxy.stats.snapshot()
        finally:
            proxy.resume_drain()
            proxy.stop()
        assert (first, second) == (ACCEPTED, DROPPED)
        assert stats["dropped"] == 1
        assert stats["captured"] == 1

    def test_unbounded_accepts_everything(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=None)
        proxy.start()
        try:
            outcomes = [proxy.enqueue(event(body=b"%d" % i)) for i in range(500)]
            proxy.flush()
        finally:
            proxy.stop()
        assert all(o == ACCEPTED for o in outcomes)
        assert store.memento_count() == 500

    def test_block_policy_waits_for_drain(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=1,
                           overflow_policy=BLOCK)
        proxy.start()
        try:
            proxy.pause_drain()
            proxy.enqueue(event(body=b"1"))
            done = threading.Event()

            def second_enqueue():
                proxy.enqueue(event(body=b"2"))
                done.set()

            t = threading.Thread(target=second_enqueue)
            t.start()
            assert not done.wait(0.3), "enqueue should block while the queue is full"
            proxy.resume_drain()
            assert done.wait(5), "enqueue should complete once the drain consumes"
            t.join()
        finally:
            proxy.stop()

    def test_accepted_plus_dropped_equals_capturable(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"x"), "/nope": (404, HTML, b"")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                for _ in range(7):
                    http_get(proxy.host, proxy.port, "/p")
                for _ in range(3):
                    http_get(proxy.host, proxy.port, "/nope")
                proxy.flush()
                stats = proxy.stats.snapshot()
            finally:
                proxy.stop()
        assert stats["captured"] + stats["dropped"] == 7
        assert stats["served"] == 10


class TestDrain:
    def test_per_uri_fifo_one_queue(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=None)
        proxy.start()
        try:
            for i in range(100):
                proxy.enqueue(event(uri="http://h/one", body=b"%03d" % i))
            proxy.flush()
        finally:
            proxy.stop()
        tm = store.list_timemap("http://h/one")
        assert [store.get_body(m.body_ref) for m in tm] == [b"%03d" % i for i in range(100)]

    def test_per_uri_order_with_worker_shards(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=None,
                           drain_workers=4)
        proxy.start()
        rng = random.Random(9)
        sent = {f"http://h/{k}": [] for k in range(6)}
        try:
            for i in range(300):
                uri = f"http://h/{rng.randrange(6)}"
                body = b"%s-%03d" % (uri.encode(), len(sent[uri]))
                sent[uri].append(body)
                proxy.enqueue(event(uri=uri, body=body))
            proxy.flush()
        finally:
            proxy.stop()
        for uri, bodies in sent.items():
            tm = store.list_timemap(uri)
            assert [store.get_body(m.body_ref) for m in tm] == bodies

    def test_store_failure_counted_not_propagated(self, store, monkeypatch):
        def boom(*args, **kwargs):
            raise OSError("disk on fire")

        monkeypatch.setattr(store, "submit", boom)
        with ScriptedOrigin({"/p": (200, HTML, b"x")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                status, _, _ = http_get(proxy.host, proxy.port, "/p")
                proxy.flush()
                stats = proxy.stats.snapshot()
            finally:
                proxy.stop()
        assert status == 200
        assert stats["store_failures"] == 1

    def test_client_latency_independent_of_store_latency(self, store, monkeypatch):
        real_submit = store.submit

        def slow_submit(*args, **kwargs):
            time.sleep(0.5)
            return real_submit(*args, **kwargs)

        monkeypatch.setattr(store, "submit", slow_submit)
        with ScriptedOrigin({"/p": (200, HTML, b"x")}) as origin:
            proxy = make_proxy(origin, store, capture_queue_capacity=None).start()
            try:
                latencies = []
                for _ in range(5):
                    t0 = time.perf_counter()
                    http_get(proxy.host, proxy.port, "/p")
                    latencies.append(time.perf_counter() - t0)
            finally:
                proxy.stop()
        assert max(latencies) < 0.3, latencies

    def test_sigstop_flush_persists_backlog(self, store):
        proxy = make_proxy(ScriptedOrigin(), store, capture_queue_capacity=None)
        proxy.start()
        proxy.pause_drain()
        for i in range(10):
            proxy.enqueue(event(body=b"%d" % i))
        proxy.resume_drain()
        proxy.stop(flush=True)
        assert store.memento_count() == 10


class TestStatsEndpoint:
    def test_stats_document(self, store):
        with ScriptedOrigin({"/p": (200, HTML, b"x")}) as origin:
            proxy = make_proxy(origin, store).start()
            try:
                http_get(proxy.host, proxy.port, "/p")
                proxy.flush()
                status, headers, body = http_get(proxy.host, proxy.port, "/-/stats")
            finally:
                proxy.stop()
        assert status == 200
        fields = dict(line.split(":") for line in body.decode().splitlines())
        assert fields["served"] == "1"
        assert fields["captured"] == "1"
        assert set(fields) >= {"served", "captured", "dropped", "store_failures"}
