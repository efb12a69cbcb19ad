"""Command-line entry points.

Exit codes: 0 ok, 2 validation error, 3 crypto or keyring error,
4 overflow guard rejection.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import sys
from pathlib import Path

import httpx

from collapse import bench, histogram
from collapse.crypto import (
    DEFAULT_MODULUS,
    SUPPORTED_SECURITY_PARAMS,
    CryptoError,
    ModulusParams,
    generate_key,
)
from collapse.keyfiles import check_ring, load_plan, load_ring, save_plan
from collapse.presence import ARCHETYPES, DEFAULT_START, SENSORS, SimulationConfig, simulate, write_oracle_csv
from collapse.protocols import (
    KeyRingError,
    PlanError,
    collusion_audit,
    exposing_coalitions,
    plan_base,
    plan_chain,
    plan_graph,
    plan_nested,
)
from collapse.service.client import (
    AnalystClient,
    AnalystSession,
    FuserClient,
    ServiceError,
    decrypt_aggregate,
    encrypt_record,
    precompute_pads,
    statistics_table,
)
from collapse.store import (
    AggregateQuery,
    ComputationEngine,
    EncryptedAggregate,
    EncryptedStore,
    MalformedRecord,
    OverflowRisk,
    QueryError,
    StoreError,
    read_records,
    write_records,
)

EXIT_OK, EXIT_VALIDATION, EXIT_CRYPTO, EXIT_OVERFLOW = 0, 2, 3, 4

log = logging.getLogger("collapse")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _party_arg(text: str):
    return int(text) if text.isdigit() else text


def _params(args) -> ModulusParams:
    return ModulusParams(args.modulus)


def _weights(specs: list[str] | None) -> dict[int, int] | None:
    """``FROM:TO:W`` epochs at the query cadence become a timestamp->weight map."""
    if not specs:
        return None
    out: dict[int, int] = {}
    for spec in specs:
        try:
            a, b, w = (int(x) for x in spec.split(":"))
        except ValueError:
            raise QueryError(f"bad weight epoch {spec!r}; expected FROM:TO:WEIGHT") from None
        out.update({t: w for t in range(a, b)})
    return out


def _query_from_args(args, users: list[str]) -> AggregateQuery:
    weights = _weights(args.weight_epoch)
    if weights:
        # keep only grid timestamps
        weights = {t: w for t, w in weights.items() if t % args.cadence == 0}
    return AggregateQuery(
        users=tuple(users),
        start=args.start,
        end=args.end,
        cadence=args.cadence,
        states=tuple(args.states),
        bin_width=args.bin_width,
        fold=args.fold,
        weights=weights,
    )


def _aggregate(args, query: AggregateQuery, params: ModulusParams) -> EncryptedAggregate:
    if args.server:
        with httpx.Client(base_url=args.server, timeout=args.timeout) as http:
            return AnalystClient(http, params).query_sum(query)
    store = EncryptedStore(args.data_dir, params)
    return ComputationEngine(store).query_sum(query)


# -- commands -----------------------------------------------------------------


def cmd_keygen(args) -> int:
    key = generate_key(args.bits)
    if args.out:
        fd = os.open(args.out, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(key.hex() + "\n")
        print(f"wrote {args.bits}-bit key to {args.out}")
    else:
        print(key.hex())
    return EXIT_OK


def cmd_plan(args) -> int:
    users = _csv_strs(args.users) if args.users else None
    common = {"user_ids": users, "security_param": args.bits}
    if args.kind == "base":
        plan, rings = plan_base(args.n, analyst=not args.no_analyst, **common)
    elif args.kind == "chain":
        plan, rings = plan_chain(args.n, **common)
    elif args.kind == "graph":
        plan, rings = plan_graph(args.n, args.s, **common)
    else:
        if not args.teams:
            raise PlanError("nested plans need --teams, e.g. --teams 3,3")
        plan, rings = plan_nested(args.teams, **common)
    paths = save_plan(args.out, plan, rings)
    print(f"{plan.kind} plan for {plan.n} members: wrote {len(paths)} files to {args.out}")
    for party in plan.parties:
        print(f"  party {party}: {', '.join(sorted(plan.entitlements[party]))}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = _params(args)
    plan = load_plan(args.plan_dir) if args.plan_dir else None
    users = plan.n if plan else args.users
    user_ids = tuple(plan.user_ids[i] for i in plan.members) if plan else None
    config = SimulationConfig(
        users=users,
        days=args.days,
        cadence=args.cadence,
        seed=args.seed,
        start=args.start,
        archetypes=tuple(args.archetypes),
        disabled_sensors=(frozenset(args.disable),) if args.disable else (),
        dropout=args.dropout,
        dropout_count=args.drop_count,
        user_ids=user_ids,
    )
    streams = simulate(config)
    if args.oracle:
        with open(args.oracle, "w", newline="") as fh:
            rows = write_oracle_csv(streams, fh)
        print(f"wrote {rows} oracle rows to {args.oracle}")
    if plan is None:
        return EXIT_OK
    if not (args.records or args.server):
        raise PlanError("with --plan-dir, give --records FILE or --server URL")
    total = 0
    if args.server:
        with httpx.Client(base_url=args.server, timeout=args.timeout) as http:
            for i, stream in zip(plan.members, streams):
                ring = load_ring(args.plan_dir, i)
                check_ring(plan, ring)
                fuser = FuserClient(http, plan, i, ring, params)
                total += fuser.run((s.timestamp, s.state) for s in stream.samples)
        print(f"submitted {total} records ({5 * total} ciphertexts) to {args.server}")
    else:
        with open(args.records, "wb") as fh:
            for i, stream in zip(plan.members, streams):
                ring = load_ring(args.plan_dir, i)
                check_ring(plan, ring)
                recs = (encrypt_record(plan, i, ring, s.timestamp, s.state, params) for s in stream.samples)
                total += write_records(fh, recs, params)
        print(f"wrote {total} records ({5 * total} ciphertexts) to {args.records}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    params = _params(args)
    with open(args.records, "rb") as fh:
        records = read_records(fh, params)
    if args.server:
        stored = dup = 0
        with httpx.Client(base_url=args.server, timeout=args.timeout) as http:
            for rec in records:
                body = {"record": base64.b64encode(rec.to_bytes(params)).decode("ascii")}
                resp = http.post("/records", json=body)
                if resp.status_code == 201:
                    stored += 1
                elif resp.status_code == 409:
                    dup += 1
                else:
                    raise ServiceError(f"HTTP {resp.status_code}: {resp.text}")
    else:
        store = EncryptedStore(args.data_dir, params, default_cadence=args.cadence)
        stored, dup = store.ingest_many(records)
    print(f"stored {stored} records, {dup} duplicates rejected")
    return EXIT_OK


def cmd_serve(args) -> int:
    from collapse.service.server import serve

    store = EncryptedStore(args.data_dir, _params(args), default_cadence=args.cadence)
    serve(store, args.host, args.port, workers=args.workers)
    return EXIT_OK


def cmd_query(args) -> int:
    params = _params(args)
    query = _query_from_args(args, _csv_strs(args.users))
    agg = _aggregate(args, query, params)
    doc = {"modulus": params.M, "query": query.to_json(), "response": agg.to_json(params)}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"{len(agg.sums)} encrypted sums, {len(agg.missing)} missing triples -> {args.out}")
    else:
        print(text)
    return EXIT_OK


def _session(args, params: ModulusParams) -> AnalystSession:
    plan = load_plan(args.plan_dir)
    ring = load_ring(args.keyring) if args.keyring else load_ring(args.plan_dir, args.party)
    check_ring(plan, ring)
    return AnalystSession(ring, plan, params)


def cmd_decrypt(args) -> int:
    doc = json.loads(Path(args.aggregate).read_text())
    params = ModulusParams(doc.get("modulus", args.modulus))
    session = _session(args, params)
    query = AggregateQuery.from_json(doc["query"])
    agg = EncryptedAggregate.from_json(doc["response"], params)
    table = statistics_table(decrypt_aggregate(session, query, agg))
    text = json.dumps({"bins": table, "missing": len(agg.missing)}, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"decrypted {len(table)} sums -> {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_histogram(args) -> int:
    params = _params(args)
    session = _session(args, params)
    users = _csv_strs(args.users) if args.users else [session.plan.user_ids[i] for i in session.plan.members]
    args.fold = True
    query = _query_from_args(args, users)
    table = precompute_pads(session, query)
    agg = _aggregate(args, query, params)
    bins = decrypt_aggregate(session, query, agg, table)
    averages = {k: b.average for k, b in bins.items()}
    rows = histogram.histogram_rows(averages, args.bin_width, args.smooth, tuple(args.states))
    with open(args.out, "w", newline="") as fh:
        histogram.write_csv(rows, fh)
    if args.gnuplot:
        with open(args.gnuplot, "w") as fh:
            histogram.write_gnuplot(rows, fh)
    print(f"{len(bins)} sums decrypted ({len(agg.missing)} missing triples) -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    for line in bench.run_all(args.n, tuple(args.chain_sizes)):
        print(line)
    return EXIT_OK


def cmd_audit(args) -> int:
    plan = load_plan(args.plan_dir)
    if args.coalition is not None:
        print(collusion_audit(plan, [_party_arg(p) for p in _csv_strs(args.coalition)]))
        return EXIT_OK
    max_size = args.max_size or ((plan.s or 1) + 1)
    found = 0
    smallest = None
    for report in exposing_coalitions(plan, max_size):
        found += 1
        smallest = smallest or len(report.coalition)
        if not args.quiet:
            print(report)
    print(
        f"{plan.kind} plan, N={plan.n}: {found} coalitions of size <= {max_size} expose a member"
        + (f"; smallest has {smallest} parties" if smallest else "")
    )
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    env_modulus = int(os.environ.get("COLLAPSE_MODULUS", DEFAULT_MODULUS))
    env_bind = os.environ.get("COLLAPSE_BIND", "127.0.0.1:8080")
    env_data = os.environ.get("COLLAPSE_DATA_DIR")

    parser = argparse.ArgumentParser(prog="collapse", description="Encrypted presence histories with group-only statistics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def modulus(p):
        p.add_argument("--modulus", type=int, default=env_modulus, help="power-of-two modulus M (default %(default)s)")

    def source(p):
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--server", help="base URL of a running service")
        g.add_argument("--data-dir", default=None, help="open a local store directly")
        p.add_argument("--timeout", type=float, default=60.0)

    def query_flags(p, fold_default=False):
        p.add_argument("--from", dest="start", type=int, required=True, help="range start (epoch seconds)")
        p.add_argument("--to", dest="end", type=int, required=True, help="range end, exclusive")
        p.add_argument("--cadence", type=int, default=60)
        p.add_argument("--states", type=_csv_ints, default=list(range(5)), help="state indices, e.g. 0,2")
        p.add_argument("--bin-width", type=int, default=900 if fold_default else None)
        p.add_argument("--weight-epoch", action="append", metavar="FROM:TO:W", help="weight timestamps in [FROM, TO)")

    def analyst(p):
        p.add_argument("--plan-dir", required=True)
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--party", type=_party_arg, help="party whose keyring in --plan-dir to use")
        g.add_argument("--keyring", help="explicit keyring file")

    p = sub.add_parser("keygen", help="generate one secret key")
    p.add_argument("--bits", type=int, choices=SUPPORTED_SECURITY_PARAMS, default=128)
    p.add_argument("--out")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("plan", help="create a key plan and per-party keyrings")
    p.add_argument("kind", choices=("base", "chain", "graph", "nested"))
    p.add_argument("--out", required=True, help="directory for plan.json and keyring files")
    p.add_argument("-n", type=int, default=3, help="team size N")
    p.add_argument("-s", type=int, default=1, help="collusion parameter (graph, odd)")
    p.add_argument("--teams", type=_csv_ints, help="nested team sizes, e.g. 3,3")
    p.add_argument("--users", help="comma-separated user ids")
    p.add_argument("--bits", type=int, choices=SUPPORTED_SECURITY_PARAMS, default=128)
    p.add_argument("--no-analyst", action="store_true", help="base plan without an all-keys analyst")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate presence streams; optionally encrypt them")
    p.add_argument("--users", type=int, default=1)
    p.add_argument("--days", type=int, default=21)
    p.add_argument("--cadence", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=DEFAULT_START)
    p.add_argument("--archetypes", type=_csv_strs, default=["office"], help=f"from {', '.join(ARCHETYPES)}")
    p.add_argument("--disable", type=_csv_strs, default=[], help=f"sensors to turn off: {', '.join(SENSORS)}")
    p.add_argument("--dropout", type=float, default=0.0, help="per-record drop probability")
    p.add_argument("--drop-count", type=int, help="drop exactly this many records per user")
    p.add_argument("--oracle", help="write plaintext oracle CSV here (keep it off the store)")
    p.add_argument("--plan-dir", help="encrypt with this plan's member keyrings")
    p.add_argument("--records", help="write encrypted records to this file")
    p.add_argument("--server", help="submit encrypted records through fuser clients")
    p.add_argument("--timeout", type=float, default=60.0)
    modulus(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="load a records file into a store")
    p.add_argument("--records", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--server")
    g.add_argument("--data-dir")
    p.add_argument("--cadence", type=int, default=60)
    p.add_argument("--timeout", type=float, default=60.0)
    modulus(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("serve", help="run the untrusted store and computation service")
    host, _, port = env_bind.rpartition(":")
    p.add_argument("--host", default=host or "127.0.0.1")
    p.add_argument("--port", type=int, default=int(port or 8080))
    p.add_argument("--data-dir", default=env_data, help="omit for an in-memory store")
    p.add_argument("--cadence", type=int, default=60)
    p.add_argument("--workers", type=int, default=1)
    modulus(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="request encrypted sums (no keys involved)")
    source(p)
    p.add_argument("--users", required=True, help="comma-separated user ids")
    query_flags(p)
    p.add_argument("--fold", action="store_true", help="fold bins by time of day (UTC)")
    p.add_argument("--out")
    modulus(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("decrypt", help="decrypt a saved query response")
    p.add_argument("--aggregate", required=True, help="output of `collapse query --out`")
    analyst(p)
    p.add_argument("--out")
    modulus(p)
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("histogram", help="daily presence histogram CSV from encrypted history")
    source(p)
    analyst(p)
    p.add_argument("--users", help="defaults to every plan member")
    query_flags(p, fold_default=True)
    p.add_argument("--smooth", type=int, default=3, help="centered moving-average window (odd)")
    p.add_argument("--out", required=True)
    p.add_argument("--gnuplot", help="also write a gnuplot data file")
    modulus(p)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("bench", help="time encryption, pads, sums and chain decryption")
    p.add_argument("-n", type=int, default=20000)
    p.add_argument("--chain-sizes", type=_csv_ints, default=[10, 1000])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit", help="collusion audit of a plan")
    p.add_argument("--plan-dir", required=True)
    p.add_argument("--coalition", help="comma-separated parties; omit to search all coalitions")
    p.add_argument("--max-size", type=int, help="largest coalition to search (default s+1)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OverflowRisk as exc:
        print(f"error: overflow guard: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW
    except (CryptoError, KeyRingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CRYPTO
    except (PlanError, QueryError, MalformedRecord, StoreError, ServiceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except httpx.HTTPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
