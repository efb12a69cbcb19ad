"""Encrypted data store and computation engine.

Both run on the untrusted side: they only ever see record headers (user id,
timestamp) in the clear and ciphertext residues.  No function here accepts
key material.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import struct
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence

from collapse.crypto import (
    DEFAULT_PARAMS,
    NUM_STATES,
    SQUARES_OFFSET,
    CryptoError,
    ModulusParams,
    Nonce,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
)

log = logging.getLogger(__name__)

DAY = 86400
DEFAULT_CADENCE = 60
FLAG_SQUARES = 0x01

_LEN = struct.Struct(">I")


class StoreError(Exception):
    pass


class DuplicateRecord(StoreError):
    pass


class MalformedRecord(StoreError):
    pass


class QueryError(StoreError):
    pass


class OverflowRisk(QueryError):
    """A requested sum could wrap around the modulus."""


@dataclass(frozen=True)
class CipherRecord:
    user_id: str
    timestamp: int
    ciphertexts: tuple[int, ...]
    squares: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.user_id:
            raise MalformedRecord("empty user id")
        if len(self.user_id.encode("utf-8")) > 0xFFFF:
            raise MalformedRecord("user id too long")
        if not 0 <= self.timestamp < 2**64:
            raise MalformedRecord(f"timestamp out of range: {self.timestamp}")
        if len(self.ciphertexts) != NUM_STATES:
            raise MalformedRecord(f"expected {NUM_STATES} ciphertexts, got {len(self.ciphertexts)}")
        if self.squares is not None and len(self.squares) != NUM_STATES:
            raise MalformedRecord(f"expected {NUM_STATES} squares, got {len(self.squares)}")

    def to_bytes(self, params: ModulusParams = DEFAULT_PARAMS) -> bytes:
        uid = self.user_id.encode("utf-8")
        flags = FLAG_SQUARES if self.squares is not None else 0
        parts = [bytes([flags]), len(uid).to_bytes(2, "big"), uid, self.timestamp.to_bytes(8, "big")]
        try:
            parts += [ciphertext_to_bytes(c, params) for c in self.ciphertexts]
            if self.squares is not None:
                parts += [ciphertext_to_bytes(c, params) for c in self.squares]
        except CryptoError as exc:
            raise MalformedRecord(str(exc)) from None
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, params: ModulusParams = DEFAULT_PARAMS) -> "CipherRecord":
        if len(raw) < 3:
            raise MalformedRecord("record too short")
        flags = raw[0]
        if flags & ~FLAG_SQUARES:
            raise MalformedRecord(f"unknown header flags {flags:#04x}")
        n = int.from_bytes(raw[1:3], "big")
        w = params.width
        count = NUM_STATES * (2 if flags & FLAG_SQUARES else 1)
        if len(raw) != 3 + n + 8 + count * w:
            raise MalformedRecord(f"record length {len(raw)} does not match header")
        try:
            uid = raw[3 : 3 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedRecord("user id is not UTF-8") from None
        pos = 3 + n
        ts = int.from_bytes(raw[pos : pos + 8], "big")
        pos += 8
        try:
            values = [ciphertext_from_bytes(raw[pos + k * w : pos + (k + 1) * w], params) for k in range(count)]
        except CryptoError as exc:
            raise MalformedRecord(str(exc)) from None
        squares = tuple(values[NUM_STATES:]) if flags & FLAG_SQUARES else None
        return cls(uid, ts, tuple(values[:NUM_STATES]), squares)


def write_records(fh: BinaryIO, records: Iterable[CipherRecord], params: ModulusParams = DEFAULT_PARAMS) -> int:
    """Length-prefixed record stream; also the store's log format."""
    n = 0
    for rec in records:
        raw = rec.to_bytes(params)
        fh.write(_LEN.pack(len(raw)) + raw)
        n += 1
    return n


def iter_raw_records(fh: BinaryIO) -> Iterator[bytes]:
    while True:
        head = fh.read(_LEN.size)
        if not head:
            return
        if len(head) < _LEN.size:
            raise MalformedRecord("truncated length prefix")
        (n,) = _LEN.unpack(head)
        raw = fh.read(n)
        if len(raw) < n:
            raise MalformedRecord("truncated record")
        yield raw


def read_records(fh: BinaryIO, params: ModulusParams = DEFAULT_PARAMS) -> list[CipherRecord]:
    return [CipherRecord.from_bytes(raw, params) for raw in iter_raw_records(fh)]


@dataclass(frozen=True)
class MissingRange:
    user_id: str
    start: int
    end: int


class _Stream:
    def __init__(self, cadence: int) -> None:
        self.cadence = cadence
        self.lock = threading.Lock()
        self.records: dict[int, CipherRecord] = {}
        self.times: list[int] = []


class EncryptedStore:
    """Append-only per-user logs with an in-memory index.

    With ``data_dir=None`` the store lives in memory only.
    """

    META = "store.json"

    def __init__(
        self,
        data_dir: str | os.PathLike | None = None,
        params: ModulusParams = DEFAULT_PARAMS,
        default_cadence: int = DEFAULT_CADENCE,
        fsync: bool = False,
    ) -> None:
        self.params = params
        self.default_cadence = default_cadence
        self.fsync = fsync
        self._streams: dict[str, _Stream] = {}
        self._streams_lock = threading.Lock()
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self._open()

    # -- persistence --

    def _log_path(self, user_id: str) -> Path:
        assert self.data_dir is not None
        return self.data_dir / f"{user_id.encode('utf-8').hex()}.log"

    def _write_meta(self) -> None:
        if self.data_dir is None:
            return
        meta = {
            "modulus": self.params.M,
            "cadence": {u: s.cadence for u, s in sorted(self._streams.items())},
        }
        tmp = self.data_dir / (self.META + ".tmp")
        tmp.write_text(json.dumps(meta, indent=1))
        tmp.replace(self.data_dir / self.META)

    def _open(self) -> None:
        assert self.data_dir is not None
        self.data_dir.mkdir(parents=True, exist_ok=True)
        meta_path = self.data_dir / self.META
        cadences: dict[str, int] = {}
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta["modulus"] != self.params.M:
                raise StoreError(f"store was created with modulus {meta['modulus']}, not {self.params.M}")
            cadences = meta.get("cadence", {})
        for path in sorted(self.data_dir.glob("*.log")):
            user_id = bytes.fromhex(path.stem).decode("utf-8")
            stream = self._stream(user_id, cadences.get(user_id))
            with path.open("rb") as fh:
                for raw in iter_raw_records(fh):
                    rec = CipherRecord.from_bytes(raw, self.params)
                    stream.records[rec.timestamp] = rec
            stream.times = sorted(stream.records)
        for user_id, cadence in cadences.items():
            self._stream(user_id, cadence)
        self._write_meta()
        log.info("opened store at %s with %d streams", self.data_dir, len(self._streams))

    def _stream(self, user_id: str, cadence: int | None = None) -> _Stream:
        stream = self._streams.get(user_id)
        if stream is None:
            with self._streams_lock:
                stream = self._streams.setdefault(user_id, _Stream(cadence or self.default_cadence))
        return stream

    # -- public surface --

    def declare_stream(self, user_id: str, cadence: int) -> None:
        if cadence < 1:
            raise StoreError("cadence must be positive")
        self._stream(user_id).cadence = cadence
        self._write_meta()

    def cadence(self, user_id: str) -> int:
        stream = self._streams.get(user_id)
        return stream.cadence if stream else self.default_cadence

    def users(self) -> list[str]:
        return sorted(self._streams)

    def ingest(self, record: CipherRecord) -> None:
        """Store *record*; a second record for the same (user, timestamp) is rejected."""
        raw = record.to_bytes(self.params)
        new_user = record.user_id not in self._streams
        stream = self._stream(record.user_id)
        with stream.lock:
            if record.timestamp in stream.records:
                raise DuplicateRecord(f"record for {record.user_id!r} at {record.timestamp} already stored")
            if self.data_dir is not None:
                with self._log_path(record.user_id).open("ab") as fh:
                    fh.write(_LEN.pack(len(raw)) + raw)
                    if self.fsync:
                        fh.flush()
                        os.fsync(fh.fileno())
            stream.records[record.timestamp] = record
            if not stream.times or record.timestamp > stream.times[-1]:
                stream.times.append(record.timestamp)
            else:
                bisect.insort(stream.times, record.timestamp)
        if new_user:
            self._write_meta()

    def ingest_bytes(self, raw: bytes) -> CipherRecord:
        record = CipherRecord.from_bytes(raw, self.params)
        self.ingest(record)
        return record

    def ingest_many(self, records: Iterable[CipherRecord]) -> tuple[int, int]:
        """Returns (stored, duplicates)."""
        stored = dup = 0
        for rec in records:
            try:
                self.ingest(rec)
                stored += 1
            except DuplicateRecord:
                dup += 1
        return stored, dup

    def delete(self, user_id: str, timestamp: int) -> None:
        """Drop a record from the in-memory index (test and repair tooling only)."""
        stream = self._streams[user_id]
        with stream.lock:
            del stream.records[timestamp]
            stream.times.remove(timestamp)

    def fetch_raw(self, user_id: str, start: int | None = None, end: int | None = None) -> list[CipherRecord]:
        """Records of *user_id* with start <= timestamp < end, ascending."""
        stream = self._streams.get(user_id)
        if stream is None:
            return []
        with stream.lock:
            lo = 0 if start is None else bisect.bisect_left(stream.times, start)
            hi = len(stream.times) if end is None else bisect.bisect_left(stream.times, end)
            return [stream.records[t] for t in stream.times[lo:hi]]

    def snapshot(self, user_id: str) -> dict[int, CipherRecord]:
        stream = self._streams.get(user_id)
        if stream is None:
            return {}
        with stream.lock:
            return dict(stream.records)

    def missing_ranges(self, user_id: str) -> list[MissingRange]:
        """Gaps between consecutive stored records at the stream's cadence."""
        stream = self._streams.get(user_id)
        if stream is None:
            return []
        with stream.lock:
            times = list(stream.times)
            cadence = stream.cadence
        return [
            MissingRange(user_id, a + cadence, b)
            for a, b in zip(times, times[1:])
            if b - a > cadence
        ]


@dataclass(frozen=True)
class AggregateQuery:
    """Encrypted sums over a set of user streams.

    Expected timestamps are the multiples of ``cadence`` in ``[start, end)``.
    With ``fold`` a timestamp falls in daily bin ``(t % 86400) // bin_width``
    (UTC); otherwise in ``(t - start) // bin_width``, or a single bin 0 when
    ``bin_width`` is None.  ``weights`` maps timestamps to non-negative
    integer weights; unlisted timestamps weigh 1.
    """

    users: tuple[str, ...]
    start: int
    end: int
    cadence: int = DEFAULT_CADENCE
    states: tuple[int, ...] = tuple(range(NUM_STATES))
    bin_width: int | None = None
    fold: bool = False
    weights: Mapping[int, int] | None = None
    squares: bool = False
    max_value: int = 1

    def __post_init__(self) -> None:
        if not self.users:
            raise QueryError("query names no users")
        if len(set(self.users)) != len(self.users):
            raise QueryError("duplicate users in query")
        if self.cadence < 1:
            raise QueryError("cadence must be positive")
        if not 0 <= self.start <= self.end:
            raise QueryError("need 0 <= start <= end")
        if not self.states or len(set(self.states)) != len(self.states):
            raise QueryError("states must be a non-empty set")
        if any(not 0 <= s < NUM_STATES for s in self.states):
            raise QueryError(f"state indices must be in [0, {NUM_STATES})")
        if self.bin_width is not None and self.bin_width < 1:
            raise QueryError("bin width must be positive")
        if self.fold and (self.bin_width is None or DAY % self.bin_width):
            raise QueryError("folding needs a bin width dividing 86400")
        if self.weights and any(w < 0 for w in self.weights.values()):
            raise QueryError("weights must be non-negative")
        if self.max_value < 1:
            raise QueryError("max_value must be positive")

    def timestamps(self) -> range:
        first = -(-self.start // self.cadence) * self.cadence
        return range(first, self.end, self.cadence)

    def bin_of(self, t: int) -> int:
        if self.bin_width is None:
            return 0
        if self.fold:
            return (t % DAY) // self.bin_width
        return (t - self.start) // self.bin_width

    def bin_start(self, b: int) -> int:
        """Seconds-of-day for folded bins, absolute seconds otherwise."""
        if self.bin_width is None:
            return self.start
        return b * self.bin_width if self.fold else self.start + b * self.bin_width

    def weight(self, t: int) -> int:
        if not self.weights:
            return 1
        return self.weights.get(t, 1)

    def nonce_index(self, state: int) -> int:
        return state + SQUARES_OFFSET if self.squares else state

    def bins(self) -> list[int]:
        return sorted({self.bin_of(t) for t in self.timestamps()})

    def to_json(self) -> dict:
        body = {
            "users": list(self.users),
            "from": self.start,
            "to": self.end,
            "cadence": self.cadence,
            "states": list(self.states),
            "bin_width": self.bin_width,
            "fold": self.fold,
        }
        if self.weights:
            body["weights"] = {str(t): w for t, w in sorted(self.weights.items())}
        if self.squares:
            body["squares"] = True
        if self.max_value != 1:
            body["max_value"] = self.max_value
        return body

    @classmethod
    def from_json(cls, body: Mapping) -> "AggregateQuery":
        weights = body.get("weights")
        return cls(
            users=tuple(body["users"]),
            start=int(body["from"]),
            end=int(body["to"]),
            cadence=int(body.get("cadence", DEFAULT_CADENCE)),
            states=tuple(body.get("states", range(NUM_STATES))),
            bin_width=body.get("bin_width"),
            fold=bool(body.get("fold", False)),
            weights={int(t): int(w) for t, w in weights.items()} if weights else None,
            squares=bool(body.get("squares", False)),
            max_value=int(body.get("max_value", 1)),
        )


MissingTriple = tuple[int, str, int]  # (timestamp, user_id, state)


@dataclass(frozen=True)
class BinSum:
    bin: int
    state: int
    cipher: int
    count: int


@dataclass
class EncryptedAggregate:
    sums: dict[tuple[int, int], BinSum]
    missing: list[MissingTriple] = field(default_factory=list)

    @property
    def contributing_count(self) -> int:
        return sum(b.count for b in self.sums.values())

    def to_json(self, params: ModulusParams = DEFAULT_PARAMS) -> dict:
        return {
            "bins": [
                {
                    "bin": b.bin,
                    "state": b.state,
                    "cipher_hex": ciphertext_to_bytes(b.cipher, params).hex(),
                    "count": b.count,
                }
                for _, b in sorted(self.sums.items())
            ],
            "missing": [{"timestamp": t, "user": u, "state": s} for t, u, s in self.missing],
        }

    @classmethod
    def from_json(cls, body: Mapping, params: ModulusParams = DEFAULT_PARAMS) -> "EncryptedAggregate":
        sums = {}
        for b in body["bins"]:
            cipher = ciphertext_from_bytes(bytes.fromhex(b["cipher_hex"]), params)
            sums[(b["bin"], b["state"])] = BinSum(b["bin"], b["state"], cipher, b["count"])
        missing = [(m["timestamp"], m["user"], m["state"]) for m in body["missing"]]
        return cls(sums, missing)


def expected_nonces(
    query: AggregateQuery, missing: Iterable[MissingTriple] = ()
) -> list[tuple[Nonce, str, int]]:
    """(nonce, user, weight) for every value the engine summed.

    This is what a decryptor must turn into pads: the full expected grid
    minus the reported missing triples.
    """
    gone = set(missing)
    out = []
    for user in query.users:
        for t in query.timestamps():
            w = query.weight(t)
            for s in query.states:
                if (t, user, s) not in gone:
                    out.append((Nonce(t, query.nonce_index(s)), user, w))
    return out


class ComputationEngine:
    """Computes modular (weighted, binned) ciphertext sums over the store."""

    def __init__(self, store: EncryptedStore, workers: int = 1) -> None:
        self.store = store
        self.params = store.params
        self.workers = workers

    def check_overflow(self, query: AggregateQuery) -> None:
        """Reject queries whose largest possible per-bin plaintext reaches M.

        Counts every expected timestamp, present or not, so the guard errs on
        rejection.
        """
        peak = query.max_value**2 if query.squares else query.max_value
        per_bin: dict[int, int] = defaultdict(int)
        for t in query.timestamps():
            per_bin[query.bin_of(t)] += query.weight(t)
        worst = max(per_bin.values(), default=0) * len(query.users) * peak
        if worst >= self.params.M:
            raise OverflowRisk(
                f"a bin could sum to {worst}, which does not fit modulus {self.params.M}"
            )

    def _partial(self, query: AggregateQuery, user: str):
        records = self.store.snapshot(user)
        acc: dict[tuple[int, int], list[int]] = {}
        missing: list[MissingTriple] = []
        for t in query.timestamps():
            b = query.bin_of(t)
            rec = records.get(t)
            if rec is None:
                missing.extend((t, user, s) for s in query.states)
                for s in query.states:
                    acc.setdefault((b, s), [0, 0])
                continue
            values = rec.squares if query.squares else rec.ciphertexts
            if values is None:
                missing.extend((t, user, s) for s in query.states)
                for s in query.states:
                    acc.setdefault((b, s), [0, 0])
                continue
            w = query.weight(t)
            for s in query.states:
                slot = acc.setdefault((b, s), [0, 0])
                slot[0] += w * values[s]
                slot[1] += 1
        return acc, missing

    def query_sum(self, query: AggregateQuery) -> EncryptedAggregate:
        self.check_overflow(query)
        if self.workers > 1 and len(query.users) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(lambda u: self._partial(query, u), query.users))
        else:
            parts = [self._partial(query, u) for u in query.users]
        M = self.params.M
        total: dict[tuple[int, int], list[int]] = {}
        missing: list[MissingTriple] = []
        for acc, miss in parts:
            for key, (c, n) in acc.items():
                slot = total.setdefault(key, [0, 0])
                slot[0] += c
                slot[1] += n
            missing.extend(miss)
        missing.sort()
        sums = {key: BinSum(key[0], key[1], c % M, n) for key, (c, n) in sorted(total.items())}
        return EncryptedAggregate(sums, missing)

    def expected_nonces(self, query: AggregateQuery) -> list[tuple[Nonce, str, int]]:
        return expected_nonces(query, self.query_sum(query).missing)


def group_nonces_by_bin(
    query: AggregateQuery, missing: Sequence[MissingTriple] = ()
) -> dict[tuple[int, int], list[tuple[Nonce, str, int]]]:
    """expected_nonces split by (bin, state) for per-bin pad sums."""
    out: dict[tuple[int, int], list[tuple[Nonce, str, int]]] = defaultdict(list)
    for nonce, user, w in expected_nonces(query, missing):
        state = nonce.state_index - SQUARES_OFFSET if query.squares else nonce.state_index
        out[(query.bin_of(nonce.timestamp), state)].append((nonce, user, w))
    return dict(out)
