"""Generate the bundled scenes, configs, and camera traces.

Deterministic: rerunning writes byte-identical files, which the data test
checks so nobody edits the shipped copies by hand.
"""

import sys
from pathlib import Path

import numpy as np
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from splatstream.geometry import look_at
from splatstream.scene import (
    Albedo,
    Animation,
    Box,
    DirectionalLight,
    Plane,
    SceneDescription,
    SceneObject,
    Sphere,
    save_scene,
)
from splatstream.traces import TraceRow, orbit_trace, save_trace

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "src" / "splatstream" / "data"


def solid(r, g, b):
    return Albedo(kind="solid", color=np.array([r, g, b]))


def courtyard() -> SceneDescription:
    """Static set piece: checker floor, three blocks, one sphere."""
    objects = (
        SceneObject(0, Plane(point=(0, 0, 0), normal=(0, 1, 0), extent=(6.0, 6.0)),
                    Albedo(kind="checker", color=np.array([0.82, 0.80, 0.76]),
                           color2=np.array([0.28, 0.30, 0.34]), scale=1.5)),
        SceneObject(0, Box(center=(1.6, 0.5, 0.2), half_extents=(0.5, 0.5, 0.5)),
                    solid(0.75, 0.22, 0.18)),
        SceneObject(0, Box(center=(-1.7, 0.4, 1.3), half_extents=(0.4, 0.4, 0.4)),
                    solid(0.20, 0.35, 0.78)),
        SceneObject(0, Box(center=(-0.4, 0.3, -1.9), half_extents=(0.9, 0.3, 0.3)),
                    solid(0.92, 0.78, 0.25)),
        SceneObject(0, Sphere(center=(0.3, 0.62, 0.9), radius=0.62),
                    solid(0.30, 0.72, 0.42)),
    )
    light = DirectionalLight(direction=(-0.45, -1.0, -0.30),
                             intensity=(0.95, 0.93, 0.88), ambient=(0.32, 0.33, 0.36))
    return SceneDescription(objects=objects, light=light,
                            background=(0.05, 0.07, 0.10))


def dynamics() -> SceneDescription:
    """A ball bouncing on a checker floor next to a static block; traces add
    a rotating light on top."""
    objects = (
        SceneObject(0, Plane(point=(0, 0, 0), normal=(0, 1, 0), extent=(4.0, 4.0)),
                    Albedo(kind="checker", color=np.array([0.80, 0.78, 0.74]),
                           color2=np.array([0.30, 0.32, 0.35]), scale=1.25)),
        SceneObject(1, Sphere(center=(0.0, 0.55, 0.0), radius=0.55),
                    solid(0.92, 0.45, 0.12),
                    Animation(kind="bounce", height=1.1, period=2.0)),
        SceneObject(0, Box(center=(1.9, 0.45, -1.1), half_extents=(0.45, 0.45, 0.45)),
                    solid(0.22, 0.40, 0.75)),
    )
    light = DirectionalLight(direction=(-0.5, -1.0, -0.2),
                             intensity=(1.0, 0.97, 0.9), ambient=(0.28, 0.29, 0.32))
    return SceneDescription(objects=objects, light=light,
                            background=(0.04, 0.06, 0.09))


def corridor(units: int = 6, spacing: float = 4.0) -> SceneDescription:
    """A long strip of repeated block/sphere pairs for walk-through growth."""
    half = spacing * units / 2
    objects = [
        SceneObject(0, Plane(point=(0, 0, 0), normal=(0, 1, 0),
                             extent=(half + 2.0, 3.0)),
                    Albedo(kind="checker", color=np.array([0.78, 0.77, 0.75]),
                           color2=np.array([0.33, 0.34, 0.36]), scale=2.0)),
    ]
    palette = [(0.75, 0.25, 0.20), (0.22, 0.40, 0.75), (0.90, 0.75, 0.25),
               (0.30, 0.70, 0.40), (0.70, 0.35, 0.65), (0.25, 0.65, 0.70)]
    for i in range(units):
        x = -half + spacing * (i + 0.5)
        r, g, b = palette[i % len(palette)]
        objects.append(SceneObject(
            0, Box(center=(x, 0.45, -1.4), half_extents=(0.45, 0.45, 0.45)),
            solid(r, g, b)))
        objects.append(SceneObject(
            0, Sphere(center=(x, 0.4, 1.3), radius=0.4),
            solid(b, r, g)))
    light = DirectionalLight(direction=(-0.3, -1.0, -0.45),
                             intensity=(0.95, 0.93, 0.9), ambient=(0.3, 0.31, 0.33))
    return SceneDescription(objects=tuple(objects), light=light,
                            background=(0.05, 0.07, 0.10))


def walk_trace(n_ticks: int, x0: float, x1: float, height: float = 1.7,
               lateral: float = 3.2) -> list[TraceRow]:
    """Straight walk from x0 to x1 looking ahead and slightly down."""
    rows = []
    for t in range(n_ticks + 1):
        x = x0 + (x1 - x0) * t / n_ticks
        pos = np.array([x, height, lateral])
        target = np.array([x + 2.5, 0.6, 0.0])
        rows.append(TraceRow(t, look_at(pos, target), []))
    return rows


def write_config(path: Path, body: dict) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(body, f, sort_keys=False)


def main(out_dir=None) -> None:
    out = Path(out_dir) if out_dir else DEFAULT_OUT
    out.mkdir(parents=True, exist_ok=True)

    save_scene(out / "courtyard.yaml", courtyard())
    save_scene(out / "dynamics.yaml", dynamics())
    save_scene(out / "corridor.yaml", corridor())

    save_trace(out / "orbit300.csv",
               orbit_trace(300, center=(0.0, 0.6, 0.0), radius=4.6, height=2.4,
                           revolutions=0.75))
    save_trace(out / "dynamics100.csv",
               orbit_trace(100, center=(0.0, 0.8, 0.0), radius=4.2, height=2.2,
                           revolutions=0.35, events={0: ["light_rotate:60"]}))
    save_trace(out / "corridor_walk.csv", walk_trace(240, -11.0, 11.0))

    write_config(out / "config_courtyard.yaml", {
        "scene": "courtyard.yaml",
        "sh_degree": 2,
        "seed": 7,
        "initial_position": [4.6, 2.4, 0.0],
        "initial_target": [0.0, 0.6, 0.0],
    })
    write_config(out / "config_dynamics.yaml", {
        "scene": "dynamics.yaml",
        "sh_degree": 1,
        "seed": 11,
        "optimizer_steps_per_tick": 2,
        "initial_position": [4.2, 2.2, 0.0],
        "initial_target": [0.0, 0.8, 0.0],
    })
    write_config(out / "config_corridor.yaml", {
        "scene": "corridor.yaml",
        "sh_degree": 1,
        "seed": 3,
        "freeze_age": 60,
        "expansion_radius": 7.0,
        "initial_position": [-11.0, 1.7, 3.2],
        "initial_target": [-8.5, 0.6, 0.0],
    })


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
