"""Key structures and the group encryption schemes built on them.

Every plan reduces to the same shape: member ``i`` encrypts ``v`` as

    c_i = v + sum(sign * pad(key, nonce) for key, sign in plan.terms[i])  (mod M)

so decrypting a sum over a set of members needs exactly the keys whose signed
coefficients do not cancel across that set.  The base plan gives each member
one private key; the chain and graph plans use DC-net style pads that cancel
in the full-team sum, leaving only keys held by the manager (party 0).
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence, Union

from collapse.crypto import (
    DEFAULT_PARAMS,
    DEFAULT_SECURITY_PARAM,
    ModulusParams,
    Nonce,
    SecretKey,
    generate_key,
    pad,
    unpad,
)

Party = Union[int, str]
KeyId = str

MANAGER = 0
KINDS = ("base", "chain", "graph", "nested")


class PlanError(ValueError):
    """Invalid plan parameters or a malformed plan file."""


class KeyRingError(Exception):
    """A key ring lacks keys needed for the requested operation."""


@dataclass(frozen=True)
class KeyRing:
    owner: Party
    keys: Mapping[KeyId, SecretKey]

    def __contains__(self, key_id: KeyId) -> bool:
        return key_id in self.keys

    def __getitem__(self, key_id: KeyId) -> SecretKey:
        try:
            return self.keys[key_id]
        except KeyError:
            raise KeyRingError(f"party {self.owner!r} does not hold key {key_id}") from None

    def to_json(self) -> dict:
        return {"owner": self.owner, "keys": {k: v.hex() for k, v in sorted(self.keys.items())}}

    @classmethod
    def from_json(cls, data: Mapping) -> "KeyRing":
        return cls(
            owner=_party(data["owner"]),
            keys={k: SecretKey.fromhex(v) for k, v in data["keys"].items()},
        )


@dataclass(frozen=True)
class KeyPlan:
    """Public description of who holds which keys and how members encrypt.

    ``terms`` maps each member to its signed pad terms.  ``entitlements`` maps
    every party (members and analysts) to the key ids it is meant to hold.
    """

    kind: str
    n: int
    terms: Mapping[int, tuple[tuple[KeyId, int], ...]]
    entitlements: Mapping[Party, frozenset[KeyId]]
    generators: Mapping[KeyId, Party]
    user_ids: Mapping[int, str]
    s: int | None = None
    edges: tuple[tuple[int, int], ...] = ()
    teams: tuple[tuple[int, ...], ...] = ()
    analysts: Mapping[str, Party] = field(default_factory=dict)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self.terms))

    @property
    def parties(self) -> tuple[Party, ...]:
        return tuple(sorted(self.entitlements, key=lambda p: (isinstance(p, str), str(p) if isinstance(p, str) else p)))

    def member_for_user(self, user_id: str) -> int:
        for i, uid in self.user_ids.items():
            if uid == user_id:
                return i
        raise PlanError(f"user {user_id!r} is not a member of this plan")

    def neighbors(self, i: int) -> list[int]:
        out = [b if a == i else a for a, b in self.edges if i in (a, b)]
        return sorted(out)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "s": self.s,
            "edges": [list(e) for e in self.edges],
            "teams": [list(t) for t in self.teams],
            "analysts": dict(self.analysts),
            "user_ids": {str(i): u for i, u in sorted(self.user_ids.items())},
            "terms": {str(i): [[k, sgn] for k, sgn in t] for i, t in sorted(self.terms.items())},
            "entitlements": {str(p): sorted(ks) for p, ks in self.entitlements.items()},
            "generators": {k: g for k, g in sorted(self.generators.items())},
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "KeyPlan":
        try:
            if data["kind"] not in KINDS:
                raise PlanError(f"unknown plan kind {data['kind']!r}")
            return cls(
                kind=data["kind"],
                n=int(data["n"]),
                s=data.get("s"),
                edges=tuple(tuple(e) for e in data.get("edges", ())),
                teams=tuple(tuple(t) for t in data.get("teams", ())),
                analysts={k: _party(v) for k, v in data.get("analysts", {}).items()},
                user_ids={int(i): u for i, u in data["user_ids"].items()},
                terms={int(i): tuple((k, int(sgn)) for k, sgn in t) for i, t in data["terms"].items()},
                entitlements={_party(p): frozenset(ks) for p, ks in data["entitlements"].items()},
                generators={k: _party(g) for k, g in data["generators"].items()},
            )
        except (KeyError, TypeError) as exc:
            raise PlanError(f"malformed plan: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, ensure_ascii=False)


def _party(p) -> Party:
    if isinstance(p, int):
        return p
    return int(p) if str(p).isdigit() else str(p)


def _user_ids(n: int, user_ids: Sequence[str] | None) -> dict[int, str]:
    if user_ids is None:
        return {i: f"u{i}" for i in range(1, n + 1)}
    if len(user_ids) != n or len(set(user_ids)) != n:
        raise PlanError(f"need {n} distinct user ids")
    return {i: u for i, u in enumerate(user_ids, start=1)}


def _build(
    kind: str,
    n: int,
    terms: dict[int, tuple[tuple[KeyId, int], ...]],
    entitlements: dict[Party, set[KeyId]],
    generators: dict[KeyId, Party],
    user_ids: Sequence[str] | None,
    security_param: int,
    keygen: Callable[[int], SecretKey] | None,
    **extra,
) -> tuple[KeyPlan, dict[Party, KeyRing]]:
    plan = KeyPlan(
        kind=kind,
        n=n,
        terms=terms,
        entitlements={p: frozenset(ks) for p, ks in entitlements.items()},
        generators=generators,
        user_ids=_user_ids(n, user_ids),
        **extra,
    )
    keygen = keygen or generate_key
    keys = {k: keygen(security_param) for k in sorted(generators)}
    rings = {p: KeyRing(p, {k: keys[k] for k in sorted(ks)}) for p, ks in plan.entitlements.items()}
    return plan, rings


def plan_base(
    n: int,
    *,
    user_ids: Sequence[str] | None = None,
    analyst: bool = True,
    security_param: int = DEFAULT_SECURITY_PARAM,
    keygen: Callable[[int], SecretKey] | None = None,
) -> tuple[KeyPlan, dict[Party, KeyRing]]:
    """One independent key per member; the analyst (party 0) optionally holds all."""
    if n < 1:
        raise PlanError("base plan needs at least one member")
    terms = {i: ((f"k{i}", 1),) for i in range(1, n + 1)}
    ent: dict[Party, set[KeyId]] = {i: {f"k{i}"} for i in terms}
    if analyst:
        ent[MANAGER] = {f"k{i}" for i in terms}
    gens: dict[KeyId, Party] = {f"k{i}": i for i in terms}
    return _build(
        "base", n, terms, ent, gens, user_ids, security_param, keygen,
        analysts={"analyst": MANAGER} if analyst else {},
    )


def plan_chain(
    n: int,
    *,
    user_ids: Sequence[str] | None = None,
    security_param: int = DEFAULT_SECURITY_PARAM,
    keygen: Callable[[int], SecretKey] | None = None,
) -> tuple[KeyPlan, dict[Party, KeyRing]]:
    """Key cycle k0..kN: member i adds pad(k_{i-1}) and subtracts pad(k_i)."""
    if n < 2:
        # with one member the manager's {k0, k1} is exactly that member's ring
        raise PlanError("chain plan needs at least two members")
    terms = {i: ((f"k{i - 1}", 1), (f"k{i}", -1)) for i in range(1, n + 1)}
    ent: dict[Party, set[KeyId]] = {i: {f"k{i - 1}", f"k{i}"} for i in terms}
    ent[MANAGER] = {"k0", f"k{n}"}
    gens: dict[KeyId, Party] = {f"k{i}": i for i in range(n + 1)}
    edges = tuple(sorted((max(i, (i + 1) % (n + 1)), min(i, (i + 1) % (n + 1))) for i in range(n + 1)))
    return _build(
        "chain", n, terms, ent, gens, user_ids, security_param, keygen,
        s=1, edges=edges, analysts={"manager": MANAGER},
    )


def circulant_edges(nodes: int, s: int) -> tuple[tuple[int, int], ...]:
    """Edges (i, j), i > j, of the circulant graph joining i to i±1..i±(s+1)/2."""
    edges = set()
    for i in range(nodes):
        for d in range(1, (s + 1) // 2 + 1):
            j = (i + d) % nodes
            edges.add((max(i, j), min(i, j)))
    return tuple(sorted(edges))


def edge_key_id(i: int, j: int) -> KeyId:
    hi, lo = max(i, j), min(i, j)
    return f"k{hi}-{lo}"


def plan_graph(
    n: int,
    s: int,
    *,
    user_ids: Sequence[str] | None = None,
    security_param: int = DEFAULT_SECURITY_PARAM,
    keygen: Callable[[int], SecretKey] | None = None,
) -> tuple[KeyPlan, dict[Party, KeyRing]]:
    """(s+1)-regular circulant plan on parties 0..N tolerating s colluders."""
    if s < 1 or s % 2 == 0:
        raise PlanError(f"collusion parameter s must be odd and positive, got {s}")
    if n + 1 <= s + 1:
        raise PlanError(f"need N+1 > s+1 parties, got N={n}, s={s}")
    edges = circulant_edges(n + 1, s)
    incident: dict[int, list[tuple[KeyId, int]]] = {i: [] for i in range(n + 1)}
    for hi, lo in edges:
        kid = edge_key_id(hi, lo)
        incident[hi].append((kid, 1))  # neighbor below: pad added
        incident[lo].append((kid, -1))  # neighbor above: pad subtracted
    terms = {i: tuple(sorted(incident[i])) for i in range(1, n + 1)}
    ent: dict[Party, set[KeyId]] = {i: {k for k, _ in incident[i]} for i in range(n + 1)}
    gens: dict[KeyId, Party] = {edge_key_id(hi, lo): hi for hi, lo in edges}
    return _build(
        "graph", n, terms, ent, gens, user_ids, security_param, keygen,
        s=s, edges=edges, analysts={"manager": MANAGER},
    )


def team_analyst(t: int) -> str:
    return f"team{t}"


def plan_nested(
    team_sizes: Sequence[int],
    *,
    user_ids: Sequence[str] | None = None,
    security_param: int = DEFAULT_SECURITY_PARAM,
    keygen: Callable[[int], SecretKey] | None = None,
) -> tuple[KeyPlan, dict[Party, KeyRing]]:
    """Two-level inverted hierarchy.

    Each leaf carries two pad layers: a closed loop inside its team, whose
    pads vanish in any full-team sum, and one global chain over all leaves in
    team order.  Team analyst ``teamT`` holds the global-chain keys bounding
    its team's index range; the org analyst (party 0) holds only the two
    global endpoints.
    """
    if len(team_sizes) < 2:
        raise PlanError("nested plan needs at least two teams")
    if any(size < 3 for size in team_sizes):
        raise PlanError("every team needs at least three members")
    n = sum(team_sizes)
    teams: list[tuple[int, ...]] = []
    terms: dict[int, tuple[tuple[KeyId, int], ...]] = {}
    ent: dict[Party, set[KeyId]] = {}
    gens: dict[KeyId, Party] = {"g0": MANAGER}
    analysts: dict[str, Party] = {"org": MANAGER}
    leaf = 0
    for t, size in enumerate(team_sizes, start=1):
        members = tuple(range(leaf + 1, leaf + size + 1))
        teams.append(members)
        for j, i in enumerate(members):
            own, nxt = f"t{t}.{j}", f"t{t}.{(j + 1) % size}"
            terms[i] = ((own, 1), (nxt, -1), (f"g{i - 1}", 1), (f"g{i}", -1))
            ent[i] = {own, nxt, f"g{i - 1}", f"g{i}"}
            gens[own] = i
            gens[f"g{i}"] = i
        ent[team_analyst(t)] = {f"g{members[0] - 1}", f"g{members[-1]}"}
        analysts[team_analyst(t)] = team_analyst(t)
        leaf += size
    ent[MANAGER] = {"g0", f"g{n}"}
    return _build(
        "nested", n, terms, ent, gens, user_ids, security_param, keygen,
        teams=tuple(teams), analysts=analysts,
    )


# -- encryption ---------------------------------------------------------------


def _apply_terms(
    v: int,
    terms: Iterable[tuple[KeyId, int]],
    ring: KeyRing,
    nonce: Nonce,
    params: ModulusParams,
) -> int:
    if not 0 <= v < params.M:
        raise ValueError(f"plaintext {v} outside [0, {params.M})")
    total = v
    for kid, sign in terms:
        total += sign * pad(ring[kid], nonce, params)
    return total % params.M


def encrypt_member(
    plan: KeyPlan,
    i: int,
    v: int,
    ring: KeyRing,
    nonce: Nonce,
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Encrypt member *i*'s value under whatever rule *plan* assigns it."""
    if i not in plan.terms:
        raise PlanError(f"party {i!r} contributes no values in this plan")
    return _apply_terms(v, plan.terms[i], ring, nonce, params)


def encrypt_chain(
    i: int, v: int, ring: KeyRing, nonce: Nonce, params: ModulusParams = DEFAULT_PARAMS
) -> int:
    """c_i = v + pad(k_{i-1}) - pad(k_i) mod M."""
    if i < 1:
        raise PlanError("the manager does not encrypt values")
    return _apply_terms(v, ((f"k{i - 1}", 1), (f"k{i}", -1)), ring, nonce, params)


def encrypt_graph(
    i: int, v: int, ring: KeyRing, nonce: Nonce, params: ModulusParams = DEFAULT_PARAMS
) -> int:
    """Add pads shared with lower-indexed neighbors, subtract those shared with higher ones.

    The incident edges are read off the ring's key ids, so the ring must be
    node *i*'s graph ring.
    """
    if i < 1:
        raise PlanError("the manager does not encrypt values")
    terms = []
    for kid in ring.keys:
        hi, lo = (int(x) for x in kid[1:].split("-"))
        if i == hi:
            terms.append((kid, 1))
        elif i == lo:
            terms.append((kid, -1))
    if not terms:
        raise KeyRingError(f"ring of {ring.owner!r} holds no edge keys for node {i}")
    return _apply_terms(v, terms, ring, nonce, params)


def encrypt_nested(
    plan: KeyPlan,
    i: int,
    v: int,
    ring: KeyRing,
    nonce: Nonce,
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    if plan.kind != "nested":
        raise PlanError("encrypt_nested needs a nested plan")
    return encrypt_member(plan, i, v, ring, nonce, params)


# -- key audits -----------------------------------------------------------------


def net_coefficients(plan: KeyPlan, target: int | Iterable[int]) -> dict[KeyId, int]:
    """Signed pad coefficients left over after summing *target*'s ciphertexts."""
    members = [target] if isinstance(target, int) else list(target)
    coef: Counter[KeyId] = Counter()
    for i in members:
        if i not in plan.terms:
            raise PlanError(f"party {i!r} contributes no values in this plan")
        for kid, sign in plan.terms[i]:
            coef[kid] += sign
    return {k: c for k, c in sorted(coef.items()) if c}


def required_keys(plan: KeyPlan, target: int | Iterable[int]) -> frozenset[KeyId]:
    """Keys whose pads stay uncancelled in the combined ciphertext of *target*."""
    return frozenset(net_coefficients(plan, target))


def can_decrypt(plan: KeyPlan, keys: Iterable[KeyId], target: int | Iterable[int]) -> bool:
    return required_keys(plan, target) <= set(keys)


@dataclass(frozen=True)
class AuditReport:
    coalition: frozenset[Party]
    decryptable: Mapping[int, bool]

    @property
    def exposed(self) -> list[int]:
        return sorted(i for i, ok in self.decryptable.items() if ok)

    def __str__(self) -> str:
        who = ", ".join(str(p) for p in sorted(self.coalition, key=str)) or "(none)"
        if not self.exposed:
            return f"coalition {{{who}}}: no other member decryptable"
        victims = ", ".join(f"X{i}" for i in self.exposed)
        return f"coalition {{{who}}}: can decrypt {victims}"


def collusion_audit(plan: KeyPlan, coalition: Iterable[Party]) -> AuditReport:
    """Which non-coalition members' individual values the coalition's pooled keys expose."""
    coalition = frozenset(_party(p) for p in coalition)
    unknown = coalition - set(plan.entitlements)
    if unknown:
        raise PlanError(f"unknown parties {sorted(map(str, unknown))}")
    pooled: set[KeyId] = set()
    for p in coalition:
        pooled |= plan.entitlements[p]
    report = {i: can_decrypt(plan, pooled, i) for i in plan.members if i not in coalition}
    return AuditReport(coalition, report)


def exposing_coalitions(plan: KeyPlan, max_size: int) -> Iterable[AuditReport]:
    """Every coalition of at most *max_size* parties that exposes some other member."""
    for size in range(1, max_size + 1):
        for coalition in itertools.combinations(plan.parties, size):
            report = collusion_audit(plan, coalition)
            if report.exposed:
                yield report


def audit_entitlements(plan: KeyPlan, rings: Mapping[Party, KeyRing]) -> list[str]:
    """Structural check that each ring holds exactly its plan entitlement."""
    problems = []
    for p, ent in plan.entitlements.items():
        held = set(rings[p].keys) if p in rings else set()
        if held != ent:
            problems.append(f"party {p!r}: holds {sorted(held)}, entitled to {sorted(ent)}")
    for p in set(rings) - set(plan.entitlements):
        problems.append(f"party {p!r}: not part of the plan")
    return problems


# -- decryption -----------------------------------------------------------------


def subset_pads(
    plan: KeyPlan,
    ring: KeyRing,
    target: Iterable[int],
    nonces: Sequence[Nonce],
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Aggregate pad for a sum over *target* members at each of *nonces*."""
    coef = net_coefficients(plan, target)
    missing = sorted(set(coef) - set(ring.keys))
    if missing:
        raise KeyRingError(
            f"ring of {ring.owner!r} cannot decrypt this sum; lacks {', '.join(missing)}"
        )
    total = 0
    for nonce in nonces:
        for kid, c in coef.items():
            total += c * pad(ring[kid], nonce, params)
    return total % params.M


def decrypt_subset(
    c: int,
    ring: KeyRing,
    plan: KeyPlan,
    target: Iterable[int],
    nonces: Sequence[Nonce],
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    return unpad(c, subset_pads(plan, ring, target, nonces, params), params)


def decrypt_group(
    c: int,
    analyst_ring: KeyRing,
    plan: KeyPlan,
    nonces: Sequence[Nonce],
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Decrypt a ciphertext summed over all members at every nonce in *nonces*.

    Only the uncancelled keys are evaluated: two pads per nonce for a chain,
    one per manager neighbor for a graph.
    """
    return decrypt_subset(c, analyst_ring, plan, plan.members, nonces, params)


def decrypt_team_sum(
    c: int,
    ring: KeyRing,
    plan: KeyPlan,
    team: int,
    nonces: Sequence[Nonce],
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    """Decrypt the sum over every member of team *team* (1-based)."""
    if plan.kind != "nested":
        raise PlanError("team sums need a nested plan")
    if not 1 <= team <= len(plan.teams):
        raise PlanError(f"no team {team}")
    return decrypt_subset(c, ring, plan, plan.teams[team - 1], nonces, params)


def decrypt_org_sum(
    c: int,
    ring: KeyRing,
    plan: KeyPlan,
    nonces: Sequence[Nonce],
    params: ModulusParams = DEFAULT_PARAMS,
) -> int:
    if plan.kind != "nested":
        raise PlanError("organization sums need a nested plan")
    return decrypt_group(c, ring, plan, nonces, params)


# -- statistics -----------------------------------------------------------------


@dataclass(frozen=True)
class Statistics:
    total: int
    count: int
    average: Fraction
    variance: Fraction


def statistics(total: int, count: int, squares_total: int | None = None) -> Statistics:
    """Average and population variance from decrypted sums.

    Without *squares_total* the values are taken to be Boolean, so
    ``variance = A - A**2``; otherwise ``E[x**2] - A**2``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    a = Fraction(total, count)
    second = a if squares_total is None else Fraction(squares_total, count)
    return Statistics(total, count, a, second - a * a)
