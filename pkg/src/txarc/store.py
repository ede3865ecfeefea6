"""Versioned, content-deduplicating store of captured representations.

Bodies are kept as content-addressed blobs (one file per distinct digest);
per-URI index logs record the archived mementos in capture order. The
on-disk layout is versioned:

    <root>/store.meta            format version + digest algorithm id
    <root>/blobs/<hex-digest>    body bytes, written once per distinct body
    <root>/index/<enc-uri>.log   one line per memento:
                                 "<iso8601-ms> <sequence> <status> <algo>:<hex> <hdr-offset>"
    <root>/index/<enc-uri>.hdr   header blocks (JSON lines) addressed by offset
    <root>/counts/<enc-uri>      submission counter (every-nth policy only)

A new blob is fsync'd before its index line is appended, so a crash mid
submit can leave an orphan blob but never an index entry pointing at a
missing or partial body.

Submissions for the same URI are serialized; different URIs proceed in
parallel. Readers never block writers and see a prefix of the index.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional
from urllib.parse import quote, unquote

from .timefmt import from_iso_ms, to_iso_ms, truncate_ms, utc_now_ms

FORMAT_VERSION = 1
DEFAULT_ALGORITHM = "sha256"

_ALGORITHMS = {"sha256": (hashlib.sha256, 64)}


class StoreError(Exception):
    """Base class for storage failures."""


class NotArchivedError(StoreError):
    """The URI has no mementos."""


class MissingBlobError(StoreError):
    """A referenced body blob is absent or fails its digest check."""


@dataclass(frozen=True)
class ContentDigest:
    algorithm: str
    value: str  # lowercase hex

    def __post_init__(self) -> None:
        _, hexlen = _ALGORITHMS[self.algorithm]
        if len(self.value) != hexlen:
            raise ValueError(f"{self.algorithm} digest must be {hexlen} hex chars")

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "ContentDigest":
        algorithm, _, value = text.partition(":")
        return cls(algorithm, value)


def digest(body: bytes, algorithm: str = DEFAULT_ALGORITHM) -> ContentDigest:
    """Content digest of a body. Deterministic; headers play no part."""
    fn, _ = _ALGORITHMS[algorithm]
    return ContentDigest(algorithm, fn(body).hexdigest())


@dataclass(frozen=True)
class Memento:
    uri_r: str
    capture_datetime: datetime
    sequence: int
    status: int
    headers: tuple[tuple[str, str], ...]
    digest: ContentDigest
    body_ref: str  # blob key (hex digest)

    @property
    def sort_key(self) -> tuple[datetime, int]:
        return (self.capture_datetime, self.sequence)


@dataclass(frozen=True)
class TimeMap:
    uri_r: str
    mementos: tuple[Memento, ...]

    def __len__(self) -> int:
        return len(self.mementos)

    def __iter__(self):
        return iter(self.mementos)


ARCHIVE_ALL = "archive-all"
DEDUP = "dedup"
EVERY_NTH = "every-nth"


@dataclass(frozen=True)
class ArchivePolicy:
    variant: str = ARCHIVE_ALL
    n: int = 1

    def __post_init__(self) -> None:
        if self.variant not in (ARCHIVE_ALL, DEDUP, EVERY_NTH):
            raise ValueError(f"unknown policy variant: {self.variant!r}")
        if self.variant == EVERY_NTH and self.n < 1:
            raise ValueError("every-nth requires n >= 1")

    @classmethod
    def parse(cls, text: str) -> "ArchivePolicy":
        """Parse ``archive-all``, ``dedup``, or ``every-nth:N``."""
        if text.startswith(EVERY_NTH):
            _, _, n = text.partition(":")
            return cls(EVERY_NTH, int(n or 1))
        return cls(text)

    def __str__(self) -> str:
        if self.variant == EVERY_NTH:
            return f"{EVERY_NTH}:{self.n}"
        return self.variant


STORED = "stored"
DEDUPLICATED = "deduplicated"
SKIPPED = "skipped"


@dataclass(frozen=True)
class StoreOutcome:
    disposition: str  # stored | deduplicated | skipped
    memento: Optional[Memento] = None


@dataclass(frozen=True)
class Candidate:
    """A representation offered for archiving (a memento minus store-assigned fields)."""

    uri_r: str
    status: int
    headers: tuple[tuple[str, str], ...]
    body: bytes
    capture_datetime: Optional[datetime] = None

    def __post_init__(self) -> None:
        if not self.uri_r or "://" not in self.uri_r:
            raise ValueError(f"uri_r must be an absolute URI: {self.uri_r!r}")
        if not 100 <= self.status <= 599:
            raise ValueError(f"status out of range: {self.status}")


@dataclass
class _UriState:
    lock: threading.Lock = field(default_factory=threading.Lock)
    loaded: bool = False
    last_digest: Optional[str] = None
    last_datetime: Optional[datetime] = None
    next_sequence: int = 0
    submissions: int = 0


def encode_uri(uri_r: str) -> str:
    return quote(uri_r, safe="")


def decode_uri(name: str) -> str:
    return unquote(name)


def nearest_memento(timemap: TimeMap, accept_datetime: datetime) -> Memento:
    """Memento minimizing |capture - accept|; ties go to the earlier one.

    Out-of-range datetimes clamp to the first/last memento.
    """
    if not timemap.mementos:
        raise NotArchivedError(timemap.uri_r)
    accept = truncate_ms(accept_datetime)
    mementos = timemap.mementos
    keys = [m.capture_datetime for m in mementos]
    i = bisect.bisect_left(keys, accept)
    if i == 0:
        return mementos[0]
    if i == len(mementos):
        chosen = keys[-1]
    elif (accept - keys[i - 1]) <= (keys[i] - accept):
        # Equal deltas favor the earlier memento.
        chosen = keys[i - 1]
    else:
        chosen = keys[i]
    # Same-datetime groups resolve to their earliest (lowest-sequence) member.
    return mementos[bisect.bisect_left(keys, chosen)]


class ArchiveStore:
    """Thread-safe archive over a directory tree (see module docstring)."""

    def __init__(self, root: str | Path, algorithm: str = DEFAULT_ALGORITHM):
        self.root = Path(root)
        self.blobs_dir = self.root / "blobs"
        self.index_dir = self.root / "index"
        self.counts_dir = self.root / "counts"
        meta = self.root / "store.meta"
        if meta.exists():
            fields = _read_meta(meta)
            if int(fields.get("format", -1)) != FORMAT_VERSION:
                raise StoreError(f"unsupported store format: {fields.get('format')}")
            self.algorithm = fields["algorithm"]
        else:
            self.algorithm = algorithm
            for d in (self.root, self.blobs_dir, self.index_dir, self.counts_dir):
                d.mkdir(parents=True, exist_ok=True)
            meta.write_text(f"format={FORMAT_VERSION}\nalgorithm={algorithm}\n")
        if self.algorithm not in _ALGORITHMS:
            raise StoreError(f"unknown digest algorithm: {self.algorithm}")
        self._states: dict[str, _UriState] = {}
        self._states_lock = threading.Lock()

    # -- digesting ---------------------------------------------------------

    def digest(self, body: bytes) -> ContentDigest:
        return digest(body, self.algorithm)

    # -- write path --------------------------------------------------------

    def submit(self, capture: Candidate, policy: ArchivePolicy) -> StoreOutcome:
        """Archive a served representation according to `policy`.

        archive-all stores every submission; dedup stores only when the body
        digest differs from the most recent memento of the URI; every-nth(n)
        stores the k-th submission when k = 1 (mod n).
        """
        state = self._state_for(capture.uri_r)
        body_digest = self.digest(capture.body)
        with state.lock:
            if not state.loaded:
                self._load_state(capture.uri_r, state)
            state.submissions += 1
            if policy.variant == EVERY_NTH:
                self._persist_count(capture.uri_r, state.submissions)
                if (state.submissions - 1) % policy.n != 0:
                    return StoreOutcome(SKIPPED)
            elif policy.variant == DEDUP:
                if state.last_digest == body_digest.value:
                    return StoreOutcome(DEDUPLICATED)
            memento = self._store(capture, body_digest, state)
            return StoreOutcome(STORED, memento)

    def _store(self, capture: Candidate, body_digest: ContentDigest, state: _UriState) -> Memento:
        when = truncate_ms(capture.capture_datetime or utc_now_ms())
        if state.last_datetime is not None and when < state.last_datetime:
            # Wall-clock regressions must not break TimeMap ordering.
            when = state.last_datetime
        sequence = state.next_sequence

        self._write_blob(body_digest.value, capture.body)
        hdr_offset = self._append_headers(capture.uri_r, capture.headers)
        line = " ".join(
            (to_iso_ms(when), str(sequence), str(capture.status), str(body_digest), str(hdr_offset))
        )
        with open(self._index_path(capture.uri_r), "ab") as fh:
            fh.write(line.encode("ascii") + b"\n")

        state.last_digest = body_digest.value
        state.last_datetime = when
        state.next_sequence = sequence + 1
        return Memento(
            uri_r=capture.uri_r,
            capture_datetime=when,
            sequence=sequence,
            status=capture.status,
            headers=tuple(capture.headers),
            digest=body_digest,
            body_ref=body_digest.value,
        )

    def _write_blob(self, hexdigest: str, body: bytes) -> None:
        path = self.blobs_dir / hexdigest
        if path.exists():
            return
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(body)
                fh.flush()
                os.fsync(fh.fileno())  # durable before any index line references it
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StoreError(f"blob write failed: {exc}") from exc

    def _append_headers(self, uri_r: str, headers: Iterable[tuple[str, str]]) -> int:
        path = self._hdr_path(uri_r)
        block = json.dumps([[k, v] for k, v in headers]).encode("utf-8") + b"\n"
        with open(path, "ab") as fh:
            offset = fh.tell()
            fh.write(block)
        return offset

    def _persist_count(self, uri_r: str, count: int) -> None:
        path = self.counts_dir / encode_uri(uri_r)
        path.write_text(str(count))

    # -- read path ---------------------------------------------------------

    def list_timemap(self, uri_r: str) -> TimeMap:
        """All mementos for a URI, ascending by (datetime, sequence); empty if never archived."""
        index = self._index_path(uri_r)
        if not index.exists():
            return TimeMap(uri_r, ())
        hdr_path = self._hdr_path(uri_r)
        mementos = []
        with open(index, "rb") as fh, open(hdr_path, "rb") as hdr:
            for raw in fh:
                raw = raw.rstrip(b"\n")
                if not raw:
                    continue
                try:
                    iso, seq, status, dig, hdr_offset = raw.decode("ascii").split(" ")
                except ValueError:
                    continue  # torn tail line from an interrupted append
                hdr.seek(int(hdr_offset))
                headers = tuple((k, v) for k, v in json.loads(hdr.readline()))
                content_digest = ContentDigest.parse(dig)
                mementos.append(
                    Memento(
                        uri_r=uri_r,
                        capture_datetime=from_iso_ms(iso),
                        sequence=int(seq),
                        status=int(status),
                        headers=headers,
                        digest=content_digest,
                        body_ref=content_digest.value,
                    )
                )
        return TimeMap(uri_r, tuple(mementos))

    def resolve_memento(self, uri_r: str, accept_datetime: datetime) -> Memento:
        """Memento nearest to accept_datetime (tie -> earlier, out of range clamps)."""
        return nearest_memento(self.list_timemap(uri_r), accept_datetime)

    def get_body(self, ref: str) -> bytes:
        """Body bytes for a blob reference, verified against the digest it is keyed by."""
        path = self.blobs_dir / ref
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise MissingBlobError(f"blob {ref} missing") from None
        if self.digest(data).value != ref:
            raise MissingBlobError(f"blob {ref} corrupt: digest mismatch")
        return data

    def uris(self) -> list[str]:
        """All URIs with at least one memento, sorted."""
        return sorted(decode_uri(p.name[: -len(".log")]) for p in self.index_dir.glob("*.log"))

    def blob_count(self) -> int:
        return sum(1 for p in self.blobs_dir.iterdir() if not p.name.endswith(".tmp"))

    def memento_count(self) -> int:
        return sum(len(self.list_timemap(u)) for u in self.uris())

    # -- internals ---------------------------------------------------------

    def _index_path(self, uri_r: str) -> Path:
        return self.index_dir / (encode_uri(uri_r) + ".log")

    def _hdr_path(self, uri_r: str) -> Path:
        return self.index_dir / (encode_uri(uri_r) + ".hdr")

    def _state_for(self, uri_r: str) -> _UriState:
        with self._states_lock:
            state = self._states.get(uri_r)
            if state is None:
                state = self._states[uri_r] = _UriState()
            return state

    def _load_state(self, uri_r: str, state: _UriState) -> None:
        timemap = self.list_timemap(uri_r)
        if timemap.mementos:
            last = timemap.mementos[-1]
            state.last_digest = last.digest.value
            state.last_datetime = last.capture_datetime
            state.next_sequence = last.sequence + 1
        count_path = self.counts_dir / encode_uri(uri_r)
        if count_path.exists():
            state.submissions = int(count_path.read_text() or 0)
        else:
            state.submissions = len(timemap.mementos)
        state.loaded = True


def _read_meta(path: Path) -> dict[str, str]:
    fields = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            fields[k.strip()] = v.strip()
    return fields
