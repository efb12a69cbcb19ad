import io
from collections import defaultdict

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collapse.crypto import ModulusParams, Nonce, SecretKey, encrypt, pad, unpad
from collapse.store import (
    AggregateQuery,
    CipherRecord,
    ComputationEngine,
    DuplicateRecord,
    EncryptedAggregate,
    EncryptedStore,
    MalformedRecord,
    MissingRange,
    OverflowRisk,
    QueryError,
    StoreError,
    expected_nonces,
    group_nonces_by_bin,
    iter_raw_records,
    read_records,
    write_records,
)

from conftest import DATA

DAY = 86400
T0 = 1300060800  # midnight UTC


def golden_records():
    lines = (DATA / "golden_records.txt").read_text().splitlines()
    return [bytes.fromhex(l) for l in lines if l.strip() and not l.startswith("#")]


class Fixture:
    """Users with individual keys encrypting one-hot states on a minute grid."""

    def __init__(self, rng, users=3, slots=120, cadence=60, params=ModulusParams(2**32)):
        self.params = params
        self.cadence = cadence
        self.keys = {f"u{i}": SecretKey(rng.randbytes(16)) for i in range(users)}
        self.states = {}
        self.store = EncryptedStore(params=params)
        for u, key in self.keys.items():
            for k in range(slots):
                t = T0 + k * cadence
                s = rng.randrange(5)
                self.states[(u, t)] = s
                cts = tuple(encrypt(int(i == s), key, Nonce(t, i), params) for i in range(5))
                self.store.ingest(CipherRecord(u, t, cts))
        self.engine = ComputationEngine(self.store)

    def decrypt(self, query, agg):
        groups = group_nonces_by_bin(query, agg.missing)
        out = {}
        for key, b in agg.sums.items():
            pads = sum(w * pad(self.keys[u], n, self.params) for n, u, w in groups.get(key, []))
            out[key] = unpad(b.cipher, pads, self.params)
        return out

    def oracle(self, query, deleted=()):
        out = defaultdict(int)
        for u in query.users:
            for t in query.timestamps():
                if (u, t) in deleted or (u, t) not in self.states:
                    continue
                for s in query.states:
                    out[(query.bin_of(t), s)] += query.weight(t) * int(self.states[(u, t)] == s)
        return dict(out)


# -- wire format --


def test_golden_records_decode():
    alice, other = golden_records()
    rec = CipherRecord.from_bytes(alice)
    assert rec.user_id == "alice" and rec.timestamp == 1300000000 and rec.squares is None
    assert rec.ciphertexts[0] == 0x61B3FA4E
    assert rec.to_bytes() == alice
    rec2 = CipherRecord.from_bytes(other)
    assert rec2.user_id == "ö-7" and rec2.timestamp == 0
    assert rec2.ciphertexts == (0, 1, 2, 3, 4)
    assert rec2.squares == (0xFFFFFFFF, 1, 2, 3, 4)
    assert rec2.to_bytes() == other


@pytest.mark.parametrize(
    "raw",
    [b"", b"\x00\x00", bytes.fromhex("02000161") + bytes(28), golden_records()[0][:-1], golden_records()[0] + b"\x00"],
)
def test_malformed_records(raw):
    with pytest.raises(MalformedRecord):
        CipherRecord.from_bytes(raw)


def test_record_validation():
    with pytest.raises(MalformedRecord):
        CipherRecord("", 0, (0,) * 5)
    with pytest.raises(MalformedRecord):
        CipherRecord("a", 0, (0,) * 4)
    with pytest.raises(MalformedRecord):
        CipherRecord("a", -1, (0,) * 5)
    with pytest.raises(MalformedRecord):
        CipherRecord("a", 0, (2**32,) + (0,) * 4).to_bytes()


@given(
    st.text(min_size=1, max_size=30),
    st.integers(0, 2**64 - 1),
    st.lists(st.integers(0, 2**16 - 1), min_size=5, max_size=5),
    st.booleans(),
)
def test_record_roundtrip(uid, t, cts, squares):
    params = ModulusParams(2**16)
    rec = CipherRecord(uid, t, tuple(cts), tuple(reversed(cts)) if squares else None)
    assert CipherRecord.from_bytes(rec.to_bytes(params), params) == rec


def test_log_stream_roundtrip():
    recs = [CipherRecord.from_bytes(r) for r in golden_records()]
    buf = io.BytesIO()
    write_records(buf, recs)
    buf.seek(0)
    assert read_records(buf) == recs
    buf = io.BytesIO(buf.getvalue()[:-3])
    with pytest.raises(MalformedRecord):
        list(iter_raw_records(buf))


# -- store --


def test_duplicates_rejected():
    store = EncryptedStore()
    rec = CipherRecord("a", 60, (1, 2, 3, 4, 5))
    store.ingest(rec)
    with pytest.raises(DuplicateRecord):
        store.ingest(CipherRecord("a", 60, (9,) * 5))
    assert store.fetch_raw("a") == [rec]
    assert store.ingest_many([rec, CipherRecord("a", 120, (0,) * 5)]) == (1, 1)


def test_fetch_window_and_order():
    store = EncryptedStore()
    for t in (300, 60, 180, 120):
        store.ingest(CipherRecord("a", t, (t,) * 5))
    assert [r.timestamp for r in store.fetch_raw("a")] == [60, 120, 180, 300]
    assert [r.timestamp for r in store.fetch_raw("a", 120, 300)] == [120, 180]
    assert store.fetch_raw("nobody") == []


def test_missing_ranges():
    store = EncryptedStore(default_cadence=60)
    for t in (0, 60, 240, 300, 420):
        store.ingest(CipherRecord("a", t, (0,) * 5))
    assert store.missing_ranges("a") == [MissingRange("a", 120, 240), MissingRange("a", 360, 420)]
    store.declare_stream("b", 30)
    store.ingest(CipherRecord("b", 0, (0,) * 5))
    store.ingest(CipherRecord("b", 30, (0,) * 5))
    assert store.missing_ranges("b") == []
    assert store.cadence("b") == 30


def test_persistence_reload(tmp_path, rng):
    store = EncryptedStore(tmp_path)
    store.declare_stream("ö-7", 30)
    recs = [CipherRecord("ö-7", 30 * k, tuple(rng.randrange(2**32) for _ in range(5))) for k in range(50)]
    for r in recs:
        store.ingest(r)
    store.ingest(CipherRecord("b", 0, (1,) * 5, (2,) * 5))
    again = EncryptedStore(tmp_path)
    assert again.users() == ["b", "ö-7"]
    assert again.fetch_raw("ö-7") == recs
    assert again.cadence("ö-7") == 30
    assert again.fetch_raw("b")[0].squares == (2,) * 5
    with pytest.raises(DuplicateRecord):
        again.ingest(recs[3])
    with pytest.raises(StoreError):
        EncryptedStore(tmp_path, params=ModulusParams(2**16))


def test_log_bytes_are_wire_records(tmp_path):
    store = EncryptedStore(tmp_path)
    for raw in golden_records():
        store.ingest_bytes(raw)
    for raw in golden_records():
        uid = CipherRecord.from_bytes(raw).user_id
        with (tmp_path / f"{uid.encode().hex()}.log").open("rb") as fh:
            assert list(iter_raw_records(fh)) == [raw]


# -- queries --


def test_query_validation():
    with pytest.raises(QueryError):
        AggregateQuery((), 0, 60)
    with pytest.raises(QueryError):
        AggregateQuery(("a", "a"), 0, 60)
    with pytest.raises(QueryError):
        AggregateQuery(("a",), 60, 0)
    with pytest.raises(QueryError):
        AggregateQuery(("a",), 0, 60, states=(5,))
    with pytest.raises(QueryError):
        AggregateQuery(("a",), 0, 60, bin_width=7, fold=True)
    with pytest.raises(QueryError):
        AggregateQuery(("a",), 0, 60, weights={0: -1})


def test_query_json_roundtrip():
    q = AggregateQuery(("a", "b"), 0, 6000, 60, (1, 3), 900, True, {60: 3}, True, 2)
    body = q.to_json()
    assert body["from"] == 0 and body["to"] == 6000
    assert AggregateQuery.from_json(body) == q


def test_timestamps_align_to_cadence():
    q = AggregateQuery(("a",), 61, 300, 60)
    assert list(q.timestamps()) == [120, 180, 240]


def test_single_bin_sum(rng):
    fx = Fixture(rng)
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 120 * 60)
    agg = fx.engine.query_sum(q)
    assert set(agg.sums) == {(0, s) for s in range(5)}
    assert fx.decrypt(q, agg) == fx.oracle(q)
    assert sum(fx.decrypt(q, agg).values()) == 3 * 120
    assert agg.contributing_count == 3 * 120 * 5 and agg.missing == []


def test_unfolded_bins(rng):
    fx = Fixture(rng, users=2, slots=90)
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 90 * 60, bin_width=900)
    agg = fx.engine.query_sum(q)
    assert q.bins() == list(range(6))
    assert fx.decrypt(q, agg) == fx.oracle(q)


def test_fold_480_sums(rng):
    fx = Fixture(rng, users=1, slots=2 * 1440)
    q = AggregateQuery(("u0",), T0, T0 + 2 * DAY, bin_width=900, fold=True)
    agg = fx.engine.query_sum(q)
    assert len(agg.sums) == 96 * 5
    assert all(b.count == 30 for b in agg.sums.values())
    assert fx.decrypt(q, agg) == fx.oracle(q)
    assert q.bin_start(95) == 85500


def test_fold_uses_utc_seconds_of_day():
    q = AggregateQuery(("a",), 0, DAY, bin_width=900, fold=True)
    assert q.bin_of(T0 + 899) == 0 and q.bin_of(T0 + 900) == 1 and q.bin_of(T0 + DAY - 1) == 95


def test_weighted_two_epochs(rng):
    fx = Fixture(rng, users=2, slots=20)
    weights = {T0 + 60 * k: 2 for k in range(10, 20)}
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 20 * 60, weights=weights)
    assert fx.decrypt(q, fx.engine.query_sum(q)) == fx.oracle(q)


def test_zero_weight_ignores_value(rng):
    fx = Fixture(rng, users=1, slots=4)
    q = AggregateQuery(("u0",), T0, T0 + 240, weights={T0: 0, T0 + 60: 0, T0 + 120: 0, T0 + 180: 0})
    assert set(fx.decrypt(q, fx.engine.query_sum(q)).values()) == {0}


def test_missing_triples(rng):
    fx = Fixture(rng, users=3, slots=30)
    gone = {("u1", T0 + 60 * 4), ("u1", T0 + 60 * 5), ("u2", T0)}
    for u, t in gone:
        fx.store.delete(u, t)
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 30 * 60, states=(0, 2, 4), bin_width=600)
    agg = fx.engine.query_sum(q)
    assert len(agg.missing) == len(gone) * 3
    assert {(u, t) for t, u, _ in agg.missing} == gone
    assert fx.decrypt(q, agg) == fx.oracle(q, gone)
    assert agg.contributing_count == (3 * 30 - 3) * 3


@settings(max_examples=25, deadline=None)
@given(st.sets(st.tuples(st.sampled_from(["u0", "u1"]), st.integers(0, 29)), max_size=20), st.randoms(use_true_random=False))
def test_missing_count_property(deleted, r):
    fx = Fixture(r, users=2, slots=30)
    gone = {(u, T0 + 60 * k) for u, k in deleted}
    for u, t in gone:
        fx.store.delete(u, t)
    q = AggregateQuery(("u0", "u1"), T0, T0 + 30 * 60)
    agg = fx.engine.query_sum(q)
    assert len(agg.missing) == 5 * len(gone)
    assert len(expected_nonces(q, agg.missing)) == 5 * (60 - len(gone))
    assert fx.decrypt(q, agg) == fx.oracle(q, gone)


def test_unknown_user_is_all_missing(rng):
    fx = Fixture(rng, users=1, slots=5)
    q = AggregateQuery(("u0", "ghost"), T0, T0 + 300)
    agg = fx.engine.query_sum(q)
    assert len(agg.missing) == 25
    assert fx.decrypt(q, agg) == fx.oracle(q)


def test_parallel_engine_matches_serial(rng):
    fx = Fixture(rng, users=4, slots=50)
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 50 * 60, bin_width=900)
    assert ComputationEngine(fx.store, workers=4).query_sum(q) == fx.engine.query_sum(q)


def test_aggregate_json_roundtrip(rng):
    fx = Fixture(rng, users=2, slots=10)
    fx.store.delete("u0", T0)
    q = AggregateQuery(tuple(fx.keys), T0, T0 + 600, bin_width=300)
    agg = fx.engine.query_sum(q)
    assert EncryptedAggregate.from_json(agg.to_json()) == agg


# -- overflow guard --


def test_overflow_small_modulus():
    params = ModulusParams(2**8)
    engine = ComputationEngine(EncryptedStore(params=params))
    users = tuple(f"u{i}" for i in range(4))
    engine.check_overflow(AggregateQuery(users, 0, 63 * 60))  # 4 * 63 = 252 < 256
    with pytest.raises(OverflowRisk):
        engine.query_sum(AggregateQuery(users, 0, 64 * 60))  # 256
    with pytest.raises(OverflowRisk):
        engine.check_overflow(AggregateQuery(users, 0, 32 * 60, weights={0: 40}))
    engine.check_overflow(AggregateQuery(users, 0, 64 * 60, bin_width=1800))


def test_overflow_squares_counts_square_of_max():
    engine = ComputationEngine(EncryptedStore(params=ModulusParams(2**10)))
    engine.check_overflow(AggregateQuery(("a",), 0, 60 * 10, max_value=10))
    with pytest.raises(OverflowRisk):
        engine.check_overflow(AggregateQuery(("a",), 0, 60 * 11, max_value=10, squares=True))


def test_three_week_history_fits_default_modulus():
    q = AggregateQuery(tuple(f"u{i}" for i in range(10)), T0, T0 + 23 * DAY, bin_width=900, fold=True)
    ComputationEngine(EncryptedStore()).check_overflow(q)


# -- squares channel --


def test_squares_query(rng):
    key = SecretKey(rng.randbytes(16))
    store = EncryptedStore()
    values = {}
    for k in range(40):
        t = T0 + 60 * k
        v = [rng.randrange(4) for _ in range(5)]
        values[t] = v
        cts = tuple(encrypt(x, key, Nonce(t, i)) for i, x in enumerate(v))
        sq = tuple(encrypt(x * x, key, Nonce(t, i + 5)) for i, x in enumerate(v))
        store.ingest(CipherRecord("a", t, cts, sq))
    q = AggregateQuery(("a",), T0, T0 + 2400, squares=True, max_value=3)
    agg = ComputationEngine(store).query_sum(q)
    for (b, s), bs in agg.sums.items():
        pads = sum(pad(key, n) for n, _, _ in group_nonces_by_bin(q)[(b, s)])
        assert unpad(bs.cipher, pads) == sum(v[s] ** 2 for v in values.values())


def test_squares_absent_counts_as_missing():
    store = EncryptedStore()
    store.ingest(CipherRecord("a", 0, (0,) * 5))
    agg = ComputationEngine(store).query_sum(AggregateQuery(("a",), 0, 60, squares=True))
    assert len(agg.missing) == 5
