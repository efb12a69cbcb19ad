"""Simulated sensor feeds and the fusion rules that turn them into presence states.

Presence is a five-bit one-hot string (in office, has visitor, in building,
active remotely, mobile) or ``00000`` when there is no usable evidence.
The simulator keeps every emitted state so tests can compute plaintext
oracles; none of it goes to the untrusted store.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, TextIO

from collapse.crypto import NUM_STATES

SENSORS = ("camera", "keyboard", "bluetooth", "network", "mobile")
ARCHETYPES = ("office", "remote", "hybrid", "night")
DAY = 86400
# Monday 2011-03-14 00:00 UTC
DEFAULT_START = 1300060800


class PresenceState(Enum):
    IN_OFFICE = "10000"
    HAS_VISITOR = "01000"
    IN_BUILDING = "00100"
    ACTIVE_REMOTE = "00010"
    MOBILE = "00001"
    UNKNOWN = "00000"

    @property
    def bits(self) -> str:
        return self.value

    @property
    def index(self) -> int | None:
        """Position of the set bit, or None for the all-zero state."""
        pos = self.value.find("1")
        return None if pos < 0 else pos

    @property
    def rank(self) -> int:
        """Position in the fusion cascade; lower wins."""
        return _CASCADE.index(self)

    @classmethod
    def from_bits(cls, bits: str) -> "PresenceState":
        if not validate(bits):
            raise ValueError(f"illegal presence bits {bits!r}")
        return cls(bits)


_CASCADE = (
    PresenceState.HAS_VISITOR,
    PresenceState.IN_OFFICE,
    PresenceState.IN_BUILDING,
    PresenceState.ACTIVE_REMOTE,
    PresenceState.MOBILE,
    PresenceState.UNKNOWN,
)

STATE_NAMES = ("in-office", "has-visitor", "in-building", "active-remote", "mobile")


def validate(bits: str) -> bool:
    """True for the six legal presence strings."""
    return (
        isinstance(bits, str)
        and len(bits) == NUM_STATES
        and set(bits) <= {"0", "1"}
        and bits.count("1") <= 1
    )


def encode_state(state: PresenceState | str) -> tuple[int, ...]:
    """One plaintext residue in {0, 1} per state type."""
    if isinstance(state, str):
        state = PresenceState.from_bits(state)
    return tuple(int(b) for b in state.bits)


@dataclass(frozen=True)
class SensorSnapshot:
    camera_person: bool = False
    camera_multiple: bool = False
    keyboard_active: bool = False
    bluetooth_in_building: bool = False
    network_remote_active: bool = False
    mobile_connected: bool = False
    disabled: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        unknown = set(self.disabled) - set(SENSORS)
        if unknown:
            raise ValueError(f"unknown sensors {sorted(unknown)}")

    def enabled(self, sensor: str) -> bool:
        return sensor not in self.disabled


def fuse(snap: SensorSnapshot) -> PresenceState:
    """Priority cascade over the enabled sensors.

    Disabled feeds contribute no evidence, so turning one off can only move
    the result further down the cascade.
    """
    camera = snap.enabled("camera")
    if camera and snap.camera_multiple:
        return PresenceState.HAS_VISITOR
    if (camera and snap.camera_person) or (snap.enabled("keyboard") and snap.keyboard_active):
        return PresenceState.IN_OFFICE
    if snap.enabled("bluetooth") and snap.bluetooth_in_building:
        return PresenceState.IN_BUILDING
    if snap.enabled("network") and snap.network_remote_active:
        return PresenceState.ACTIVE_REMOTE
    if snap.enabled("mobile") and snap.mobile_connected:
        return PresenceState.MOBILE
    return PresenceState.UNKNOWN


@dataclass(frozen=True)
class SimulationConfig:
    users: int = 1
    days: int = 21
    cadence: int = 60
    seed: int = 0
    start: int = DEFAULT_START
    archetypes: tuple[str, ...] = ("office",)
    disabled_sensors: tuple[frozenset[str], ...] = ()
    dropout: float = 0.0
    # exact number of records removed per user; overrides dropout when set
    dropout_count: int | None = None
    user_ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.users < 1 or self.days < 1 or self.cadence < 1:
            raise ValueError("users, days and cadence must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.dropout_count is not None and not 0 <= self.dropout_count <= self.slots:
            raise ValueError("dropout_count exceeds the number of timesteps")
        bad = set(self.archetypes) - set(ARCHETYPES)
        if bad or not self.archetypes:
            raise ValueError(f"unknown archetypes {sorted(bad)}")
        if self.user_ids is not None and len(self.user_ids) != self.users:
            raise ValueError("user_ids must name every user")

    @property
    def slots(self) -> int:
        return self.days * DAY // self.cadence

    def user_id(self, u: int) -> str:
        return self.user_ids[u] if self.user_ids else f"u{u + 1}"

    def archetype(self, u: int) -> str:
        return self.archetypes[u % len(self.archetypes)]

    def disabled_for(self, u: int) -> frozenset[str]:
        if not self.disabled_sensors:
            return frozenset()
        return frozenset(self.disabled_sensors[u % len(self.disabled_sensors)])


@dataclass(frozen=True)
class Sample:
    timestamp: int
    snapshot: SensorSnapshot
    state: PresenceState


@dataclass
class UserStream:
    user_id: str
    archetype: str
    samples: list[Sample] = field(default_factory=list)

    def states(self) -> dict[int, PresenceState]:
        return {s.timestamp: s.state for s in self.samples}


@dataclass
class _DayPlan:
    # minute-of-day intervals [a, b)
    desk: list[tuple[int, int]]
    building: list[tuple[int, int]]
    visitors: list[tuple[int, int]]
    remote: list[tuple[int, int]]
    mobile: list[tuple[int, int]]


def _inside(m: int, spans: list[tuple[int, int]]) -> bool:
    return any(a <= m < b for a, b in spans)


def _plan_day(rng: random.Random, archetype: str, weekday: int) -> _DayPlan:
    plan = _DayPlan([], [], [], [], [])
    workday = weekday < 5
    if archetype == "hybrid":
        archetype = "office" if workday and rng.random() < 0.6 else "remote"
    if not workday:
        if rng.random() < 0.3:
            a = rng.randrange(9 * 60, 20 * 60)
            plan.mobile.append((a, a + rng.randrange(10, 60)))
        if rng.random() < 0.15:
            a = rng.randrange(10 * 60, 16 * 60)
            plan.remote.append((a, a + rng.randrange(30, 120)))
        return plan
    if archetype == "office":
        arrive = 8 * 60 + rng.randrange(0, 90)
        leave = 17 * 60 + rng.randrange(0, 90)
        lunch = 12 * 60 + rng.randrange(0, 30)
        lunch_end = lunch + rng.randrange(30, 60)
        plan.desk += [(arrive, lunch), (lunch_end, leave)]
        plan.building.append((lunch, lunch_end))
        for _ in range(rng.randrange(0, 4)):
            a = rng.randrange(arrive, leave - 10)
            plan.visitors.append((a, a + rng.randrange(10, 40)))
        plan.mobile += [(arrive - 30, arrive), (leave, leave + rng.randrange(10, 40))]
        if rng.random() < 0.4:
            a = 20 * 60 + rng.randrange(0, 60)
            plan.remote.append((a, a + rng.randrange(20, 120)))
    elif archetype == "remote":
        a = 8 * 60 + rng.randrange(0, 120)
        plan.remote.append((a, a + rng.randrange(6 * 60, 9 * 60)))
        if rng.random() < 0.5:
            a = rng.randrange(11 * 60, 15 * 60)
            plan.mobile.append((a, a + rng.randrange(15, 60)))
    else:  # night
        arrive = 13 * 60 + rng.randrange(0, 60)
        plan.desk.append((arrive, min(arrive + rng.randrange(6 * 60, 9 * 60), 24 * 60)))
        plan.remote.append((rng.randrange(0, 60), rng.randrange(90, 180)))
        for _ in range(rng.randrange(0, 2)):
            a = rng.randrange(arrive, arrive + 300)
            plan.visitors.append((a, a + rng.randrange(10, 30)))
    return plan


def _snapshot(rng: random.Random, plan: _DayPlan, minute: int, disabled: frozenset[str]) -> SensorSnapshot:
    at_desk = _inside(minute, plan.desk)
    visitor = at_desk and _inside(minute, plan.visitors)
    in_building = at_desk or _inside(minute, plan.building)
    return SensorSnapshot(
        camera_person=at_desk and rng.random() < 0.9,
        camera_multiple=visitor and rng.random() < 0.95,
        keyboard_active=at_desk and not visitor and rng.random() < 0.7,
        bluetooth_in_building=in_building and rng.random() < 0.9,
        network_remote_active=_inside(minute, plan.remote) and rng.random() < 0.9,
        mobile_connected=_inside(minute, plan.mobile) and rng.random() < 0.95,
        disabled=disabled,
    )


def simulate_user(config: SimulationConfig, u: int) -> UserStream:
    rng = random.Random(f"{config.seed}:{u}")
    archetype = config.archetype(u)
    disabled = config.disabled_for(u)
    stream = UserStream(config.user_id(u), archetype)
    plans: dict[int, _DayPlan] = {}
    for step in range(config.slots):
        t = config.start + step * config.cadence
        day = (t - config.start) // DAY
        if day not in plans:
            weekday = (t // DAY + 3) % 7  # 1970-01-01 was a Thursday
            plans[day] = _plan_day(rng, archetype, weekday)
        snap = _snapshot(rng, plans[day], (t % DAY) // 60, disabled)
        stream.samples.append(Sample(t, snap, fuse(snap)))
    if config.dropout_count is not None:
        drop = set(rng.sample(range(len(stream.samples)), config.dropout_count))
    else:
        drop = {k for k in range(len(stream.samples)) if rng.random() < config.dropout}
    if drop:
        stream.samples = [s for k, s in enumerate(stream.samples) if k not in drop]
    return stream


def simulate(config: SimulationConfig) -> list[UserStream]:
    """Deterministic per-user presence streams; identical for identical configs."""
    return [simulate_user(config, u) for u in range(config.users)]


def iter_oracle_rows(streams: Iterable[UserStream]) -> Iterator[tuple[str, int, str]]:
    for stream in streams:
        for s in stream.samples:
            yield stream.user_id, s.timestamp, s.state.bits


def write_oracle_csv(streams: Iterable[UserStream], fh: TextIO) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(("user", "timestamp", "state_bits"))
    n = 0
    for row in iter_oracle_rows(streams):
        writer.writerow(row)
        n += 1
    return n


def read_oracle_csv(fh: TextIO) -> dict[str, dict[int, PresenceState]]:
    out: dict[str, dict[int, PresenceState]] = {}
    for row in csv.DictReader(fh):
        out.setdefault(row["user"], {})[int(row["timestamp"])] = PresenceState.from_bits(row["state_bits"])
    return out
