"""Parametric test scenes: shape primitives, checker/solid albedo, a single
directional light, and scripted rigid motion for dynamic objects.

Scenes are immutable descriptions. Dynamic objects author their geometry in
an object-local frame; a per-object rigid transform (local->world) places
them, and animation scripts produce that transform as a function of time.
Static geometry uses object_id 0 and the identity transform. Textures are
evaluated in the local frame so they stick to moving objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .geometry import quat_from_axis_angle, quat_to_rotmat

INF = np.inf


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Plane:
    """Rectangle (or infinite plane when extent is None) through `point`."""

    point: np.ndarray
    normal: np.ndarray
    extent: Optional[tuple[float, float]] = None  # half-sizes along the two tangents

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))
        object.__setattr__(self, "normal", _unit(self.normal))

    def tangents(self):
        n = self.normal
        ref = np.array([1.0, 0, 0]) if abs(n[1]) > 0.9 else np.array([0, 1.0, 0])
        u = _unit(np.cross(ref, n))
        v = np.cross(n, u)
        return u, v

    def intersect(self, origins, dirs):
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, INF)
        t = np.where(t > 1e-9, t, INF)
        if self.extent is not None:
            u, v = self.tangents()
            with np.errstate(invalid="ignore"):
                pts = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
                rel = pts - self.point
                inside = (np.abs(rel @ u) <= self.extent[0]) & (np.abs(rel @ v) <= self.extent[1])
            t = np.where(inside, t, INF)
        normals = np.broadcast_to(n, dirs.shape).copy()
        # flip so the reported normal faces the ray origin
        flip = (dirs @ n) > 0
        normals[flip] = -n
        return t, normals

    def aabb(self):
        if self.extent is None:
            return None
        u, v = self.tangents()
        corners = [self.point + su * self.extent[0] * u + sv * self.extent[1] * v
                   for su in (-1, 1) for sv in (-1, 1)]
        corners = np.array(corners)
        return corners.min(axis=0), corners.max(axis=0)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, INF))
        t = np.where(disc >= 0, t, INF)
        pts = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        normals = np.zeros_like(dirs)
        hit = np.isfinite(t)
        normals[hit] = (pts[hit] - self.center) / self.radius
        return t, normals

    def aabb(self):
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in the object-local frame."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=np.float64))

    def intersect(self, origins, dirs):
        lo = self.center - self.half_extents
        hi = self.center + self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t_lo = (lo - origins) * inv
        t_hi = (hi - origins) * inv
        t1 = np.minimum(t_lo, t_hi)
        t2 = np.maximum(t_lo, t_hi)
        t_near = t1.max(axis=-1)
        t_far = t2.min(axis=-1)
        t = np.where((t_near <= t_far) & (t_far > 1e-9), np.where(t_near > 1e-9, t_near, t_far), INF)
        pts = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        normals = np.zeros_like(dirs)
        hit = np.isfinite(t)
        if hit.any():
            rel = (pts[hit] - self.center) / self.half_extents
            axis = np.argmax(np.abs(rel), axis=-1)
            n = np.zeros_like(rel)
            n[np.arange(len(axis)), axis] = np.sign(rel[np.arange(len(axis)), axis])
            normals[hit] = n
        return t, normals

    def aabb(self):
        return self.center - self.half_extents, self.center + self.half_extents


@dataclass(frozen=True)
class Albedo:
    """Solid color or 3D checker (parity of the local-frame cell coordinates)."""

    kind: str  # "solid" | "checker"
    color: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    color2: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 0.2]))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        object.__setattr__(self, "color2", np.asarray(self.color2, dtype=np.float64))

    def eval(self, local_points: np.ndarray, local_normals: np.ndarray) -> np.ndarray:
        if self.kind == "solid":
            return np.broadcast_to(self.color, local_points.shape).copy()
        # nudge along the normal so points exactly on a cell face are stable
        p = (local_points + 1e-6 * local_normals) / self.scale
        parity = np.floor(p).sum(axis=-1).astype(np.int64) & 1
        return np.where(parity[..., None] == 0, self.color, self.color2)


@dataclass(frozen=True)
class Animation:
    """Rigid motion script. kinds:
    none                              identity forever
    rotate {axis, deg_per_s, anchor}  rotation about a world anchor point
    bounce {height, period}           y displacement height*|sin(pi t/period)|
    oscillate {axis, amplitude, period} sinusoidal translation along axis
    """

    kind: str = "none"
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    deg_per_s: float = 0.0
    height: float = 0.0
    amplitude: float = 0.0
    period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=np.float64))
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64))

    def transform_at(self, time: float) -> tuple[np.ndarray, np.ndarray]:
        """Local->world rigid transform (quat wxyz, translation) at `time` seconds."""
        if self.kind == "none":
            return np.array([1.0, 0, 0, 0]), np.zeros(3)
        if self.kind == "rotate":
            q = quat_from_axis_angle(self.axis, np.deg2rad(self.deg_per_s) * time)
            R = quat_to_rotmat(q)
            return q, self.anchor - R @ self.anchor
        if self.kind == "bounce":
            y = self.height * abs(np.sin(np.pi * time / self.period))
            return np.array([1.0, 0, 0, 0]), np.array([0.0, y, 0.0])
        if self.kind == "oscillate":
            s = self.amplitude * np.sin(2 * np.pi * time / self.period)
            return np.array([1.0, 0, 0, 0]), _unit(self.axis) * s
        raise ValueError(f"unknown animation kind {self.kind!r}")


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    shape: object  # Plane | Sphere | Box
    albedo: Albedo
    animation: Animation = field(default_factory=Animation)


@dataclass(frozen=True)
class DirectionalLight:
    direction: np.ndarray  # unit vector pointing from the light into the scene
    intensity: np.ndarray  # RGB
    ambient: np.ndarray  # RGB

    def __post_init__(self):
        object.__setattr__(self, "direction", _unit(self.direction))
        object.__setattr__(self, "intensity", np.asarray(self.intensity, dtype=np.float64))
        object.__setattr__(self, "ambient", np.asarray(self.ambient, dtype=np.float64))


@dataclass(frozen=True)
class SceneDescription:
    objects: tuple
    light: DirectionalLight
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "background", np.asarray(self.background, dtype=np.float64))
        dyn = [o.object_id for o in self.objects if o.object_id > 0]
        if len(dyn) != len(set(dyn)):
            raise ValueError("dynamic object_ids must be unique")

    def dynamic_ids(self) -> list[int]:
        return sorted(o.object_id for o in self.objects if o.object_id > 0)

    def transforms_at(self, time: float) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for obj in self.objects:
            if obj.object_id > 0:
                out[obj.object_id] = obj.animation.transform_at(time)
        return out

    def aabb(self, transforms=None, margin: float = 0.0):
        """Conservative world AABB over objects with finite bounds."""
        los, his = [], []
        for obj in self.objects:
            bb = obj.shape.aabb()
            if bb is None:
                continue
            lo, hi = bb
            if transforms and obj.object_id in transforms:
                q, t = transforms[obj.object_id]
                R = quat_to_rotmat(q)
                corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
                corners = corners @ R.T + t
                lo, hi = corners.min(axis=0), corners.max(axis=0)
            elif obj.object_id > 0:
                # account for animation sweep with a loose bound
                q, t = obj.animation.transform_at(0.0)
                sweep = abs(obj.animation.height) + abs(obj.animation.amplitude)
                lo, hi = lo - sweep, hi + sweep
            los.append(lo)
            his.append(hi)
        if not los:
            return np.zeros(3), np.zeros(3)
        lo = np.min(los, axis=0) - margin
        hi = np.max(his, axis=0) + margin
        return lo, hi


def _shape_from_dict(d: dict):
    kind = d["kind"]
    if kind == "plane":
        extent = tuple(d["extent"]) if d.get("extent") is not None else None
        return Plane(point=d["point"], normal=d["normal"], extent=extent)
    if kind == "sphere":
        return Sphere(center=d["center"], radius=float(d["radius"]))
    if kind == "box":
        return Box(center=d["center"], half_extents=d["half_extents"])
    raise ValueError(f"unknown shape kind {kind!r}")


def _shape_to_dict(s) -> dict:
    if isinstance(s, Plane):
        d = {"kind": "plane", "point": s.point.tolist(), "normal": s.normal.tolist()}
        if s.extent is not None:
            d["extent"] = list(s.extent)
        return d
    if isinstance(s, Sphere):
        return {"kind": "sphere", "center": s.center.tolist(), "radius": s.radius}
    if isinstance(s, Box):
        return {"kind": "box", "center": s.center.tolist(), "half_extents": s.half_extents.tolist()}
    raise TypeError(type(s))


def _albedo_from_dict(d: dict) -> Albedo:
    if d["kind"] == "solid":
        return Albedo(kind="solid", color=d["color"])
    return Albedo(kind="checker", color=d["colors"][0], color2=d["colors"][1], scale=float(d.get("scale", 1.0)))


def _albedo_to_dict(a: Albedo) -> dict:
    if a.kind == "solid":
        return {"kind": "solid", "color": a.color.tolist()}
    return {"kind": "checker", "colors": [a.color.tolist(), a.color2.tolist()], "scale": a.scale}


def _animation_from_dict(d: Optional[dict]) -> Animation:
    if not d:
        return Animation()
    kw = dict(d)
    return Animation(**kw)


def _animation_to_dict(a: Animation) -> Optional[dict]:
    if a.kind == "none":
        return None
    d = {"kind": a.kind}
    if a.kind == "rotate":
        d.update(axis=a.axis.tolist(), anchor=a.anchor.tolist(), deg_per_s=a.deg_per_s)
    elif a.kind == "bounce":
        d.update(height=a.height, period=a.period)
    elif a.kind == "oscillate":
        d.update(axis=a.axis.tolist(), amplitude=a.amplitude, period=a.period)
    return d


def scene_from_dict(d: dict) -> SceneDescription:
    objects = []
    for od in d["objects"]:
        objects.append(
            SceneObject(
                object_id=int(od.get("id", 0)),
                shape=_shape_from_dict(od["shape"]),
                albedo=_albedo_from_dict(od["albedo"]),
                animation=_animation_from_dict(od.get("animation")),
            )
        )
    ld = d["light"]
    light = DirectionalLight(direction=ld["direction"], intensity=ld["intensity"], ambient=ld["ambient"])
    return SceneDescription(objects=tuple(objects), light=light, background=np.asarray(d.get("background", [0, 0, 0]), dtype=np.float64))


def scene_to_dict(scene: SceneDescription) -> dict:
    objs = []
    for o in scene.objects:
        od = {"id": o.object_id, "shape": _shape_to_dict(o.shape), "albedo": _albedo_to_dict(o.albedo)}
        anim = _animation_to_dict(o.animation)
        if anim:
            od["animation"] = anim
        objs.append(od)
    return {
        "background": scene.background.tolist(),
        "light": {
            "direction": scene.light.direction.tolist(),
            "intensity": scene.light.intensity.tolist(),
            "ambient": scene.light.ambient.tolist(),
        },
        "objects": objs,
    }


def load_scene(path) -> SceneDescription:
    with open(path) as f:
        return scene_from_dict(yaml.safe_load(f))


def save_scene(path, scene: SceneDescription):
    with open(path, "w") as f:
        yaml.safe_dump(scene_to_dict(scene), f, sort_keys=False)
