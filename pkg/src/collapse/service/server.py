"""HTTP surface of the untrusted side: feed routing, store and computation engine.

Request and response schemas only carry ciphertexts and public metadata
(user ids, timestamps, counts); unknown fields are rejected, so key
material or plaintexts cannot ride along.
"""

from __future__ import annotations

import base64
import binascii
import logging
import os

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from collapse.crypto import NUM_STATES
from collapse.store import (
    DEFAULT_CADENCE,
    AggregateQuery,
    ComputationEngine,
    DuplicateRecord,
    EncryptedStore,
    MalformedRecord,
    OverflowRisk,
    QueryError,
)

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class RecordIn(_Strict):
    record: str = Field(description="base64 of the binary record wire format")


class QueryIn(_Strict):
    users: list[str]
    from_: int = Field(alias="from", ge=0)
    to: int = Field(ge=0)
    cadence: int = Field(DEFAULT_CADENCE, ge=1)
    states: list[int] = Field(default_factory=lambda: list(range(NUM_STATES)))
    bin_width: int | None = None
    fold: bool = False
    weights: dict[str, int] | None = None
    squares: bool = False
    max_value: int = Field(1, ge=1)


class BinOut(_Strict):
    bin: int
    state: int
    cipher_hex: str
    count: int


class MissingOut(_Strict):
    timestamp: int
    user: str
    state: int


class QueryOut(_Strict):
    bins: list[BinOut]
    missing: list[MissingOut]


class RecordsOut(_Strict):
    records: list[str]


class RangeOut(_Strict):
    from_: int = Field(alias="from")
    to: int


class MissingRangesOut(_Strict):
    user: str
    cadence: int
    ranges: list[RangeOut]


def _error(status: int, kind: str, detail: str) -> JSONResponse:
    return JSONResponse({"error": kind, "detail": detail}, status_code=status)


def create_app(store: EncryptedStore, engine: ComputationEngine | None = None) -> FastAPI:
    engine = engine or ComputationEngine(store)
    params = store.params
    app = FastAPI(title="encrypted presence store", version="0.1.0")
    app.state.store = store
    app.state.engine = engine

    @app.exception_handler(OverflowRisk)
    async def _overflow(request: Request, exc: OverflowRisk):
        return _error(400, "overflow", str(exc))

    @app.exception_handler(QueryError)
    async def _bad_query(request: Request, exc: QueryError):
        return _error(400, "query", str(exc))

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/records", status_code=201)
    def post_record(body: RecordIn):
        try:
            raw = base64.b64decode(body.record, validate=True)
        except (binascii.Error, ValueError):
            return _error(400, "malformed", "record is not valid base64")
        try:
            rec = store.ingest_bytes(raw)
        except MalformedRecord as exc:
            return _error(400, "malformed", str(exc))
        except DuplicateRecord as exc:
            return _error(409, "duplicate", str(exc))
        return {"status": "stored", "user": rec.user_id, "timestamp": rec.timestamp}

    @app.post("/query/sum", response_model=QueryOut)
    def query_sum(body: QueryIn):
        query = AggregateQuery.from_json(body.model_dump(by_alias=True))
        return engine.query_sum(query).to_json(params)

    @app.get("/records", response_model=RecordsOut)
    def get_records(
        user: str,
        from_: int | None = Query(None, alias="from"),
        to: int | None = None,
    ):
        recs = store.fetch_raw(user, from_, to)
        return {"records": [base64.b64encode(r.to_bytes(params)).decode("ascii") for r in recs]}

    @app.get("/missing", response_model=MissingRangesOut)
    def get_missing(user: str):
        ranges = store.missing_ranges(user)
        return {
            "user": user,
            "cadence": store.cadence(user),
            "ranges": [{"from": r.start, "to": r.end} for r in ranges],
        }

    return app


def serve(store: EncryptedStore, host: str = "127.0.0.1", port: int = 8080, workers: int = 1) -> None:
    """Run the service until interrupted."""
    import uvicorn

    app = create_app(store, ComputationEngine(store, workers=workers))
    log.info("serving %s on %s:%d", store.data_dir or "in-memory store", host, port)
    uvicorn.run(app, host=host, port=port, log_level=os.environ.get("COLLAPSE_LOG_LEVEL", "info"))
