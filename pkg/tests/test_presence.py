import io
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from collapse.presence import (
    DAY,
    DEFAULT_START,
    SENSORS,
    PresenceState,
    SensorSnapshot,
    SimulationConfig,
    encode_state,
    fuse,
    read_oracle_csv,
    simulate,
    validate,
    write_oracle_csv,
)

LEGAL = {"00000", "10000", "01000", "00100", "00010", "00001"}

snapshots = st.builds(
    SensorSnapshot,
    st.booleans(),
    st.booleans(),
    st.booleans(),
    st.booleans(),
    st.booleans(),
    st.booleans(),
    st.frozensets(st.sampled_from(SENSORS)),
)


def test_fuse_examples():
    assert fuse(SensorSnapshot(camera_person=True, camera_multiple=True)) is PresenceState.HAS_VISITOR
    assert fuse(SensorSnapshot(keyboard_active=True, bluetooth_in_building=True)) is PresenceState.IN_OFFICE
    assert fuse(SensorSnapshot(bluetooth_in_building=True, mobile_connected=True)) is PresenceState.IN_BUILDING
    assert fuse(SensorSnapshot(network_remote_active=True, mobile_connected=True)) is PresenceState.ACTIVE_REMOTE
    assert fuse(SensorSnapshot(mobile_connected=True)) is PresenceState.MOBILE
    assert fuse(SensorSnapshot()) is PresenceState.UNKNOWN


def test_disabled_camera_falls_through():
    snap = SensorSnapshot(camera_multiple=True, bluetooth_in_building=True, disabled=frozenset({"camera"}))
    assert fuse(snap) is PresenceState.IN_BUILDING


def test_unknown_sensor_rejected():
    with pytest.raises(ValueError):
        SensorSnapshot(disabled=frozenset({"radar"}))


@given(snapshots, st.frozensets(st.sampled_from(SENSORS)))
def test_disabling_sensors_never_promotes(snap, more):
    fewer = SensorSnapshot(
        snap.camera_person,
        snap.camera_multiple,
        snap.keyboard_active,
        snap.bluetooth_in_building,
        snap.network_remote_active,
        snap.mobile_connected,
        snap.disabled | more,
    )
    assert fuse(fewer).rank >= fuse(snap).rank


@given(snapshots)
def test_fuse_output_is_legal(snap):
    assert fuse(snap).bits in LEGAL


def test_validate():
    for bits in LEGAL:
        assert validate(bits)
    for bad in ("11000", "1000", "100000", "2000a", "", None, "10001"):
        assert not validate(bad)


def test_encode_state():
    assert encode_state("00100") == (0, 0, 1, 0, 0)
    assert encode_state(PresenceState.UNKNOWN) == (0,) * 5
    with pytest.raises(ValueError):
        encode_state("11000")
    assert PresenceState.MOBILE.index == 4 and PresenceState.UNKNOWN.index is None


def test_simulation_deterministic():
    cfg = SimulationConfig(users=3, days=2, seed=9, archetypes=("office", "remote", "night"))
    a, b = simulate(cfg), simulate(cfg)
    assert [s.samples for s in a] == [s.samples for s in b]
    other = simulate(SimulationConfig(users=3, days=2, seed=10, archetypes=("office", "remote", "night")))
    assert [s.samples for s in a] != [s.samples for s in other]


def test_simulation_grid_and_legality():
    cfg = SimulationConfig(users=2, days=3, cadence=300)
    for stream in simulate(cfg):
        ts = [s.timestamp for s in stream.samples]
        assert ts == [DEFAULT_START + 300 * k for k in range(3 * DAY // 300)]
        assert all(s.state.bits in LEGAL and s.state is fuse(s.snapshot) for s in stream.samples)


def test_office_worker_shape():
    (stream,) = simulate(SimulationConfig(days=7, seed=3))
    by_hour = Counter()
    for s in stream.samples:
        weekday = (s.timestamp // DAY + 3) % 7
        if weekday < 5 and s.state is PresenceState.IN_OFFICE:
            by_hour[(s.timestamp % DAY) // 3600] += 1
    assert by_hour[10] > 200 and by_hour[3] == 0
    states = {s.state for s in stream.samples}
    assert {PresenceState.IN_OFFICE, PresenceState.UNKNOWN} <= states


def test_disabled_sensors_never_seen():
    cfg = SimulationConfig(days=5, disabled_sensors=(frozenset({"camera", "keyboard"}),))
    (stream,) = simulate(cfg)
    states = {s.state for s in stream.samples}
    assert PresenceState.IN_OFFICE not in states and PresenceState.HAS_VISITOR not in states


def test_dropout_count_exact():
    cfg = SimulationConfig(users=2, days=1, dropout_count=100, seed=4)
    for stream in simulate(cfg):
        assert len(stream.samples) == 1440 - 100
    with pytest.raises(ValueError):
        SimulationConfig(days=1, dropout_count=1441)


def test_dropout_rate():
    (stream,) = simulate(SimulationConfig(days=5, dropout=0.1, seed=1))
    assert 0.08 < 1 - len(stream.samples) / 7200 < 0.12


@pytest.mark.parametrize(
    "kwargs",
    [{"users": 0}, {"days": 0}, {"dropout": 1.0}, {"archetypes": ("pirate",)}, {"users": 2, "user_ids": ("a",)}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimulationConfig(**kwargs)


def test_oracle_csv_roundtrip():
    streams = simulate(SimulationConfig(users=2, days=1, cadence=600, user_ids=("ann", "bo")))
    buf = io.StringIO()
    n = write_oracle_csv(streams, buf)
    assert n == 2 * 144
    assert buf.getvalue().splitlines()[0] == "user,timestamp,state_bits"
    buf.seek(0)
    back = read_oracle_csv(buf)
    assert back == {s.user_id: s.states() for s in streams}


def test_visitor_without_camera_degrades():
    no_cam = frozenset({"camera"})
    typing = SensorSnapshot(camera_multiple=True, keyboard_active=True, bluetooth_in_building=True, disabled=no_cam)
    assert fuse(typing) is PresenceState.IN_OFFICE
    idle = SensorSnapshot(camera_multiple=True, bluetooth_in_building=True, disabled=no_cam)
    assert fuse(idle) is PresenceState.IN_BUILDING
