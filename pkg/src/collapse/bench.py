"""Micro-benchmarks for the cipher, the engine and group decryption."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from collapse.crypto import DEFAULT_PARAMS, ModulusParams, Nonce, encrypt, generate_key, pad
from collapse.protocols import decrypt_group, plan_chain, required_keys
from collapse.store import AggregateQuery, CipherRecord, ComputationEngine, EncryptedStore


@dataclass(frozen=True)
class Timing:
    name: str
    ops: int
    seconds: float

    @property
    def rate(self) -> float:
        return self.ops / self.seconds if self.seconds else float("inf")

    def __str__(self) -> str:
        per = self.seconds / self.ops * 1e6 if self.ops else 0.0
        return f"{self.name:<28} {self.ops:>9} ops  {self.seconds:8.3f} s  {per:9.2f} us/op  {self.rate:12.0f} ops/s"


def bench_encrypt(n: int = 20000, params: ModulusParams = DEFAULT_PARAMS, seed: int = 0) -> Timing:
    rng = random.Random(seed)
    key = generate_key()
    nonces = [Nonce(1_300_000_000 + 60 * i, i % 5) for i in range(n)]
    values = [rng.randrange(2) for _ in range(n)]
    t0 = time.perf_counter()
    for v, nonce in zip(values, nonces):
        encrypt(v, key, nonce, params)
    return Timing("encrypt", n, time.perf_counter() - t0)


def bench_pad(n: int = 20000, params: ModulusParams = DEFAULT_PARAMS) -> Timing:
    key = generate_key()
    nonces = [Nonce(1_300_000_000 + 60 * i, i % 5) for i in range(n)]
    t0 = time.perf_counter()
    for nonce in nonces:
        pad(key, nonce, params)
    return Timing("pad", n, time.perf_counter() - t0)


def bench_binned_sums(days: int = 21, cadence: int = 60, params: ModulusParams = DEFAULT_PARAMS, seed: int = 0) -> Timing:
    """480 folded sums (96 bins x 5 states) over random ciphertexts."""
    rng = random.Random(seed)
    store = EncryptedStore(params=params)
    start = 1300060800
    slots = days * 86400 // cadence
    for k in range(slots):
        cts = tuple(rng.randrange(params.M) for _ in range(5))
        store.ingest(CipherRecord("bench", start + k * cadence, cts))
    engine = ComputationEngine(store)
    q = AggregateQuery(("bench",), start, start + slots * cadence, cadence, bin_width=900, fold=True)
    t0 = time.perf_counter()
    agg = engine.query_sum(q)
    return Timing("binned sums (480)", len(agg.sums), time.perf_counter() - t0)


def bench_chain_decrypt(n: int, timesteps: int = 100, params: ModulusParams = DEFAULT_PARAMS) -> tuple[Timing, int]:
    """Manager decryption of a full-team chain sum; returns timing and pads per nonce."""
    plan, rings = plan_chain(n)
    nonces = [Nonce(1_300_000_000 + 60 * i, 0) for i in range(timesteps)]
    t0 = time.perf_counter()
    decrypt_group(0, rings[0], plan, nonces, params)
    elapsed = time.perf_counter() - t0
    return Timing(f"chain decrypt N={n}", timesteps, elapsed), len(required_keys(plan, plan.members))


def run_all(n: int = 20000, chain_sizes: tuple[int, ...] = (10, 1000)) -> list[str]:
    lines = [str(bench_encrypt(n)), str(bench_pad(n)), str(bench_binned_sums())]
    for size in chain_sizes:
        timing, per_nonce = bench_chain_decrypt(size)
        lines.append(f"{timing}  pads/nonce={per_nonce}")
    return lines
