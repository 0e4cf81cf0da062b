"""Replay traces: prerecorded client camera paths with optional scene events.

CSV format, one row per tick:

    tick,px,py,pz,qw,qx,qy,qz[,event]

A header line is written but optional on load. The event column may hold
one or more ';'-separated entries:

    light_rotate:<deg_per_s>   start yawing the light about +Y at this rate
                               (0 stops the rotation)
    light_intensity:<r>/<g>/<b>  set the directional RGB intensity now
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_normalize

HEADER = ["tick", "px", "py", "pz", "qw", "qx", "qy", "qz", "event"]


@dataclass
class TraceRow:
    tick: int
    pose: Pose
    events: list = field(default_factory=list)


def parse_event(text: str) -> tuple[str, object]:
    """Split one event entry into (name, argument)."""
    name, _, arg = text.partition(":")
    name = name.strip()
    if name == "light_rotate":
        return name, float(arg)
    if name == "light_intensity":
        rgb = [float(v) for v in arg.split("/")]
        if len(rgb) != 3:
            raise ValueError(f"light_intensity wants r/g/b, got {arg!r}")
        return name, np.array(rgb)
    raise ValueError(f"unknown trace event {name!r}")


def load_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.reader(f):
            if not rec or rec[0].strip() == "tick":
                continue
            if len(rec) < 8:
                raise ValueError(f"trace row needs 8+ columns, got {rec}")
            tick = int(rec[0])
            pos = np.array([float(v) for v in rec[1:4]])
            quat = quat_normalize(np.array([float(v) for v in rec[4:8]]))
            events = []
            if len(rec) > 8 and rec[8].strip():
                for entry in rec[8].split(";"):
                    parse_event(entry)  # fail fast on malformed traces
                    events.append(entry.strip())
            rows.append(TraceRow(tick, Pose(position=pos, quaternion=quat), events))
    ticks = [r.tick for r in rows]
    if ticks != sorted(ticks):
        raise ValueError("trace ticks must be non-decreasing")
    return rows


def save_trace(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r.tick,
                        *[f"{v:.7g}" for v in r.pose.position],
                        *[f"{v:.7g}" for v in r.pose.quaternion],
                        ";".join(r.events)])


def orbit_trace(n_ticks: int, center, radius: float, height: float,
                revolutions: float = 0.5, events=None) -> list[TraceRow]:
    """Camera circling `center` at fixed height, always looking at it.
    `events` maps tick -> list of event strings."""
    from .geometry import look_at

    center = np.asarray(center, dtype=np.float64)
    events = events or {}
    rows = []
    for t in range(n_ticks + 1):
        ang = 2 * np.pi * revolutions * t / max(1, n_ticks)
        pos = center + np.array([radius * np.cos(ang), height, radius * np.sin(ang)])
        rows.append(TraceRow(t, look_at(pos, center), list(events.get(t, []))))
    return rows


def static_trace(n_ticks: int, pose: Pose, events=None) -> list[TraceRow]:
    events = events or {}
    return [TraceRow(t, pose, list(events.get(t, []))) for t in range(n_ticks + 1)]
