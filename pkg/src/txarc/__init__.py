"""txarc: a transactional web archive with a capture proxy, Memento replay,
WARC export, and an ApacheBench-style load-test harness."""

__version__ = "0.1.0"

from .store import (  # noqa: F401
    ArchivePolicy,
    ArchiveStore,
    Candidate,
    ContentDigest,
    Memento,
    StoreOutcome,
    TimeMap,
    digest,
)
