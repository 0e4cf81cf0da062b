"""Trace CSV round-trips and event parsing."""

import numpy as np
import pytest

from splatstream.geometry import Pose, look_at
from splatstream.traces import (
    TraceRow,
    load_trace,
    orbit_trace,
    parse_event,
    save_trace,
    static_trace,
)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for t in range(12):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        rows.append(TraceRow(t, Pose(position=rng.normal(size=3), quaternion=q),
                             ["light_rotate:15"] if t == 5 else []))
    path = tmp_path / "trace.csv"
    save_trace(path, rows)
    back = load_trace(path)
    assert len(back) == 12
    for a, b in zip(rows, back):
        assert a.tick == b.tick
        np.testing.assert_allclose(a.pose.position, b.pose.position, atol=1e-6)
        # quaternions may round-trip with flipped sign; both encode the rotation
        d = min(np.abs(a.pose.quaternion - b.pose.quaternion).max(),
                np.abs(a.pose.quaternion + b.pose.quaternion).max())
        assert d < 1e-6
        assert a.events == b.events


def test_load_without_header(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("0,1,2,3,1,0,0,0\n1,1,2,3.5,1,0,0,0\n")
    rows = load_trace(path)
    assert [r.tick for r in rows] == [0, 1]
    np.testing.assert_allclose(rows[1].pose.position, [1, 2, 3.5])


def test_load_normalizes_quaternion(tmp_path):
    path = tmp_path / "q.csv"
    path.write_text("0,0,0,0,2,0,0,0\n")
    (row,) = load_trace(path)
    assert abs(np.linalg.norm(row.pose.quaternion) - 1.0) < 1e-12


def test_out_of_order_ticks_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,0,0,0,1,0,0,0\n0,0,0,0,1,0,0,0\n")
    with pytest.raises(ValueError):
        load_trace(path)


def test_short_row_rejected(tmp_path):
    path = tmp_path / "short.csv"
    path.write_text("0,0,0,0,1\n")
    with pytest.raises(ValueError):
        load_trace(path)


def test_parse_event_light_rotate():
    name, arg = parse_event("light_rotate:22.5")
    assert name == "light_rotate"
    assert arg == 22.5


def test_parse_event_light_intensity():
    name, arg = parse_event("light_intensity:1/0.5/0.25")
    assert name == "light_intensity"
    np.testing.assert_allclose(arg, [1.0, 0.5, 0.25])


def test_parse_event_rejects_unknown():
    with pytest.raises(ValueError):
        parse_event("teleport:3")
    with pytest.raises(ValueError):
        parse_event("light_intensity:1/2")


def test_malformed_event_fails_at_load(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("tick,px,py,pz,qw,qx,qy,qz,event\n0,0,0,0,1,0,0,0,bogus:1\n")
    with pytest.raises(ValueError):
        load_trace(path)


def test_multiple_events_per_row(tmp_path):
    path = tmp_path / "multi.csv"
    path.write_text("0,0,0,0,1,0,0,0,light_rotate:10;light_intensity:1/1/1\n")
    (row,) = load_trace(path)
    assert row.events == ["light_rotate:10", "light_intensity:1/1/1"]


def test_orbit_trace_geometry():
    rows = orbit_trace(40, center=[1, 0, 2], radius=3.0, height=1.5,
                       revolutions=1.0)
    assert len(rows) == 41
    for r in rows[::10]:
        offset = r.pose.position - np.array([1, 0, 2])
        assert abs(np.hypot(offset[0], offset[2]) - 3.0) < 1e-9
        assert abs(offset[1] - 1.5) < 1e-12
    # full revolution closes the loop
    np.testing.assert_allclose(rows[0].pose.position, rows[-1].pose.position,
                               atol=1e-9)
    # every pose looks at the center
    want = look_at(rows[7].pose.position, [1, 0, 2])
    np.testing.assert_allclose(rows[7].pose.quaternion, want.quaternion,
                               atol=1e-9)


def test_static_trace_repeats_pose():
    pose = look_at([0, 1, 5], [0, 0, 0])
    rows = static_trace(9, pose, events={3: ["light_rotate:5"]})
    assert len(rows) == 10
    assert all((r.pose.position == pose.position).all() for r in rows)
    assert rows[3].events == ["light_rotate:5"]
    assert rows[4].events == []


def test_bundled_traces_load():
    from importlib import resources
    root = resources.files("splatstream.data")
    for name, expect in [("orbit300.csv", 301), ("dynamics100.csv", 101),
                         ("corridor_walk.csv", None)]:
        rows = load_trace(root / name)
        if expect is not None:
            assert len(rows) == expect
        assert rows[0].tick == 0
