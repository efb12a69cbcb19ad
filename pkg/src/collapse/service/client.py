"""Trusted-side clients: the per-user fuser submitter and the analyst querier.

Keys stay in these objects; requests carry only records and query metadata.
"""

from __future__ import annotations

import base64
import logging
import time
from collections import deque
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Mapping

import httpx

from collapse.crypto import DEFAULT_PARAMS, SQUARES_OFFSET, ModulusParams, Nonce, pad, unpad
from collapse.presence import PresenceState, encode_state
from collapse.protocols import (
    KeyPlan,
    KeyRing,
    KeyRingError,
    PlanError,
    encrypt_member,
    net_coefficients,
    statistics,
)
from collapse.store import (
    AggregateQuery,
    CipherRecord,
    EncryptedAggregate,
    MissingTriple,
    OverflowRisk,
    QueryError,
    expected_nonces,
)

log = logging.getLogger(__name__)


class ServiceError(Exception):
    pass


class CancellationError(KeyRingError):
    """Missing records leave uncancelled pads in a group sum."""


def encrypt_record(
    plan: KeyPlan,
    member: int,
    ring: KeyRing,
    timestamp: int,
    state: PresenceState | str,
    params: ModulusParams = DEFAULT_PARAMS,
    squares: bool = False,
) -> CipherRecord:
    """Encrypt the five presence bits of one timestep under *plan*'s rule for *member*."""
    bits = encode_state(state)
    cts = tuple(
        encrypt_member(plan, member, b, ring, Nonce(timestamp, s), params) for s, b in enumerate(bits)
    )
    sq = None
    if squares:
        sq = tuple(
            encrypt_member(plan, member, b * b, ring, Nonce(timestamp, s + SQUARES_OFFSET), params)
            for s, b in enumerate(bits)
        )
    return CipherRecord(plan.user_ids[member], timestamp, cts, sq)


def _raise_for(resp: httpx.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        body = resp.json()
    except ValueError:
        body = {}
    detail = body.get("detail", resp.text)
    if body.get("error") == "overflow":
        raise OverflowRisk(detail)
    if body.get("error") == "query" or resp.status_code == 422:
        raise QueryError(str(detail))
    raise ServiceError(f"HTTP {resp.status_code}: {detail}")


class FuserClient:
    """Encrypts one user's presence states and submits them at least once.

    Failed submissions stay queued and are retried on the next flush; the
    server's duplicate rejection (409) makes retries safe.
    """

    def __init__(
        self,
        http: httpx.Client,
        plan: KeyPlan,
        member: int,
        ring: KeyRing,
        params: ModulusParams = DEFAULT_PARAMS,
        squares: bool = False,
    ) -> None:
        missing = {k for k, _ in plan.terms.get(member, ())} - set(ring.keys)
        if member not in plan.terms or missing:
            raise KeyRingError(f"ring of {ring.owner!r} does not match member {member} of the plan")
        self.http = http
        self.plan = plan
        self.member = member
        self.ring = ring
        self.params = params
        self.squares = squares
        self.queue: deque[CipherRecord] = deque()
        self.stored = 0
        self.duplicates = 0

    @property
    def user_id(self) -> str:
        return self.plan.user_ids[self.member]

    def submit(self, timestamp: int, state: PresenceState | str) -> None:
        rec = encrypt_record(self.plan, self.member, self.ring, timestamp, state, self.params, self.squares)
        self.queue.append(rec)
        self.flush()

    def flush(self) -> bool:
        """Send queued records in order; stop at the first transport failure."""
        while self.queue:
            rec = self.queue[0]
            body = {"record": base64.b64encode(rec.to_bytes(self.params)).decode("ascii")}
            try:
                resp = self.http.post("/records", json=body)
            except httpx.TransportError as exc:
                log.warning("submission for %s at %d failed: %s", rec.user_id, rec.timestamp, exc)
                return False
            if resp.status_code == 201:
                self.stored += 1
            elif resp.status_code == 409:
                self.duplicates += 1
            elif resp.status_code >= 500:
                log.warning("server error %d; will retry", resp.status_code)
                return False
            else:
                _raise_for(resp)
            self.queue.popleft()
        return True

    def run(
        self,
        source: Iterable[tuple[int, PresenceState | str]],
        retries: int = 5,
        backoff: float = 0.05,
    ) -> int:
        """Submit every (timestamp, state) from *source*; returns records acknowledged."""
        for timestamp, state in source:
            self.submit(timestamp, state)
        for attempt in range(retries):
            if self.flush():
                break
            time.sleep(backoff * 2**attempt)
        if self.queue:
            raise ServiceError(f"{len(self.queue)} records still unsent for {self.user_id}")
        return self.stored + self.duplicates


@dataclass
class AnalystSession:
    ring: KeyRing
    plan: KeyPlan
    params: ModulusParams = DEFAULT_PARAMS
    with_squares: bool = False

    def members(self, users: Iterable[str]) -> list[int]:
        return [self.plan.member_for_user(u) for u in users]

    def holds_individual_keys(self, users: Iterable[str]) -> bool:
        """True when the ring can strip every queried user's pads one by one."""
        return all(
            all(k in self.ring for k, _ in self.plan.terms[i]) for i in self.members(users)
        )


@dataclass(frozen=True)
class DecryptedBin:
    bin: int
    state: int
    bin_start: int
    total: int
    count: int
    average: Fraction | None
    variance: Fraction | None


PadTable = dict[tuple[int, int], int]


def _member_pad(session: AnalystSession, member: int, nonce: Nonce) -> int:
    params = session.params
    return sum(sign * pad(session.ring[k], nonce, params) for k, sign in session.plan.terms[member])


def _state_of(query: AggregateQuery, nonce: Nonce) -> int:
    return nonce.state_index - SQUARES_OFFSET if query.squares else nonce.state_index


def _individual_pads(session: AnalystSession, query: AggregateQuery, missing: Iterable[MissingTriple]) -> PadTable:
    members = {u: session.plan.member_for_user(u) for u in query.users}
    pads: PadTable = {}
    for nonce, user, w in expected_nonces(query, missing):
        key = (query.bin_of(nonce.timestamp), _state_of(query, nonce))
        pads[key] = pads.get(key, 0) + w * _member_pad(session, members[user], nonce)
    return pads


def _weight_totals(query: AggregateQuery, missing: Iterable[MissingTriple]) -> dict[tuple[int, int], int]:
    totals: dict[tuple[int, int], int] = {}
    for nonce, _, w in expected_nonces(query, missing):
        key = (query.bin_of(nonce.timestamp), _state_of(query, nonce))
        totals[key] = totals.get(key, 0) + w
    return totals


def _group_coefficients(session: AnalystSession, query: AggregateQuery) -> dict[str, int]:
    if query.weights:
        raise PlanError(f"weighted sums are not supported under {session.plan.kind} plans")
    coef = net_coefficients(session.plan, session.members(query.users))
    lacking = sorted(set(coef) - set(session.ring.keys))
    if lacking:
        raise KeyRingError(
            f"ring of {session.ring.owner!r} cannot decrypt sums over {sorted(query.users)}; "
            f"lacks {', '.join(lacking)}"
        )
    return coef


def _group_pads(session: AnalystSession, query: AggregateQuery) -> PadTable:
    coef = _group_coefficients(session, query)
    pads: PadTable = {}
    for t in query.timestamps():
        b = query.bin_of(t)
        for s in query.states:
            nonce = Nonce(t, query.nonce_index(s))
            r = sum(c * pad(session.ring[k], nonce, session.params) for k, c in coef.items())
            pads[(b, s)] = pads.get((b, s), 0) + r
    return pads


def precompute_pads(session: AnalystSession, query: AggregateQuery) -> PadTable:
    """Pad sums for every expected value, computable before the engine answers."""
    if session.holds_individual_keys(query.users):
        return _individual_pads(session, query, ())
    return _group_pads(session, query)


def _strip(
    session: AnalystSession,
    query: AggregateQuery,
    aggregate: EncryptedAggregate,
    precomputed: PadTable | None,
) -> PadTable:
    if session.holds_individual_keys(query.users):
        if precomputed is None:
            return _individual_pads(session, query, aggregate.missing)
        pads = dict(precomputed)
        members = {u: session.plan.member_for_user(u) for u in query.users}
        for t, user, s in aggregate.missing:
            nonce = Nonce(t, query.nonce_index(s))
            pads[(query.bin_of(t), s)] -= query.weight(t) * _member_pad(session, members[user], nonce)
        return pads
    if aggregate.missing:
        raise CancellationError(
            f"{len(aggregate.missing)} missing values; group pads do not cancel, refusing to decrypt"
        )
    return precomputed if precomputed is not None else _group_pads(session, query)


def decrypt_aggregate(
    session: AnalystSession,
    query: AggregateQuery,
    aggregate: EncryptedAggregate,
    precomputed: PadTable | None = None,
    squares: EncryptedAggregate | None = None,
) -> dict[tuple[int, int], DecryptedBin]:
    """Strip pads from each (bin, state) sum and derive averages and variances.

    With individual keys for every queried user, missing triples are simply
    left out of the pad sum (or subtracted from a precomputed table).  Under
    group keys a missing value leaves pads that never cancel, so decryption
    is refused.
    """
    params = session.params
    pads = _strip(session, query, aggregate, precomputed)
    weights = _weight_totals(query, aggregate.missing) if query.weights else None

    sq_values: dict[tuple[int, int], int] = {}
    if squares is not None:
        sq_pads = _strip(session, replace(query, squares=True), squares, None)
        for key, b in squares.sums.items():
            sq_values[key] = unpad(b.cipher, sq_pads.get(key, 0), params)

    out = {}
    for key, b in sorted(aggregate.sums.items()):
        total = unpad(b.cipher, pads.get(key, 0), params)
        count = weights.get(key, 0) if weights is not None else b.count
        avg = var = None
        if count:
            st = statistics(total, count, sq_values.get(key))
            avg, var = st.average, st.variance
        out[key] = DecryptedBin(b.bin, b.state, query.bin_start(b.bin), total, count, avg, var)
    return out


class AnalystClient:
    """Fetches encrypted aggregates and decrypts them locally."""

    def __init__(self, http: httpx.Client, params: ModulusParams = DEFAULT_PARAMS) -> None:
        self.http = http
        self.params = params

    def health(self) -> dict:
        resp = self.http.get("/health")
        _raise_for(resp)
        return resp.json()

    def query_sum_json(self, query: AggregateQuery) -> dict:
        resp = self.http.post("/query/sum", json=query.to_json())
        _raise_for(resp)
        return resp.json()

    def query_sum(self, query: AggregateQuery) -> EncryptedAggregate:
        return EncryptedAggregate.from_json(self.query_sum_json(query), self.params)

    def fetch_raw(self, user: str, start: int | None = None, end: int | None = None) -> list[CipherRecord]:
        params: dict[str, object] = {"user": user}
        if start is not None:
            params["from"] = start
        if end is not None:
            params["to"] = end
        resp = self.http.get("/records", params=params)
        _raise_for(resp)
        return [CipherRecord.from_bytes(base64.b64decode(r), self.params) for r in resp.json()["records"]]

    def missing_ranges(self, user: str) -> list[tuple[int, int]]:
        resp = self.http.get("/missing", params={"user": user})
        _raise_for(resp)
        return [(r["from"], r["to"]) for r in resp.json()["ranges"]]

    def query(
        self,
        session: AnalystSession,
        query: AggregateQuery,
        precompute: bool = True,
    ) -> dict[tuple[int, int], DecryptedBin]:
        """Decrypted per-(bin, state) statistics for *query*.

        With *precompute* the pad table is built before the request goes
        out, so only one subtraction per bin remains once the sums arrive.
        """
        if session.params.M != self.params.M:
            raise ServiceError("session and client disagree on the modulus")
        if not session.holds_individual_keys(query.users):
            # fail before any network traffic when the ring cannot cover the query
            _group_coefficients(session, query)
        table = precompute_pads(session, query) if precompute else None
        aggregate = self.query_sum(query)
        squares = None
        if session.with_squares:
            squares = self.query_sum(replace(query, squares=True))
        return decrypt_aggregate(session, query, aggregate, table, squares)


def statistics_table(bins: Mapping[tuple[int, int], DecryptedBin]) -> list[dict]:
    return [
        {
            "bin": b.bin,
            "state": b.state,
            "bin_start": b.bin_start,
            "total": b.total,
            "count": b.count,
            "average": None if b.average is None else float(b.average),
            "variance": None if b.variance is None else float(b.variance),
        }
        for _, b in sorted(bins.items())
    ]
