"""Deterministic ray-cast stand-in for a game engine.

Renders ground-truth images with Lambertian shading and hard shadows, and
produces the per-camera input buffers (world points, normals, albedo, shaded
color, object ids, depth, footprint) that seed new Gaussians. Also builds the
dome-shaped input/reference camera rigs and performs cross-camera input
culling so overlapping cameras do not seed duplicate surface samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, OrthoCamera, Pose, camera_rays, look_at, quat_to_rotmat
from .scene import DirectionalLight, SceneDescription

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class Hits:
    t: np.ndarray  # ray parameter, inf where miss
    object_index: np.ndarray  # index into scene.objects, -1 where miss
    world_point: np.ndarray
    normal: np.ndarray  # world-frame, unit, faces the ray origin
    albedo: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.t)


@dataclass
class InputBuffers:
    """Engine-native per-pixel channels for one input camera."""

    pose: Pose
    intrinsics: CameraIntrinsics
    world_pos: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    normal: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W, 3)
    shaded: np.ndarray  # (H, W, 3)
    object_id: np.ndarray  # (H, W) int32, 0 where miss
    depth: np.ndarray  # (H, W) camera-space z, meters
    footprint: np.ndarray  # (H, W) world meters per pixel
    lit: np.ndarray  # (H, W) bool, direct light unoccluded


@dataclass
class SampleBatch:
    """Culled surface samples pooled across input cameras."""

    positions: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    object_ids: np.ndarray
    footprints: np.ndarray
    lit: np.ndarray
    camera_indices: np.ndarray

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def subset(self, mask_or_indices) -> "SampleBatch":
        sel = np.asarray(mask_or_indices)
        return SampleBatch(
            positions=self.positions[sel],
            normals=self.normals[sel],
            albedo=self.albedo[sel],
            object_ids=self.object_ids[sel],
            footprints=self.footprints[sel],
            lit=self.lit[sel],
            camera_indices=self.camera_indices[sel],
        )


def _object_transform(obj, transforms):
    if obj.object_id > 0 and transforms and obj.object_id in transforms:
        return transforms[obj.object_id]
    return None


def trace(scene: SceneDescription, origins: np.ndarray, dirs: np.ndarray, transforms=None) -> Hits:
    """Nearest-hit ray cast against every object. origins broadcasts against dirs."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    obj_index = np.full(shape, -1, dtype=np.int64)
    normal_local = np.zeros(dirs.shape)
    local_pt = np.zeros(dirs.shape)

    rotations = {}
    for k, obj in enumerate(scene.objects):
        tf = _object_transform(obj, transforms)
        if tf is None:
            o_l, d_l = origins, dirs
        else:
            q, t = tf
            R = quat_to_rotmat(q)
            rotations[k] = R
            o_l = (origins - t) @ R
            d_l = dirs @ R
        t_k, n_k = obj.shape.intersect(o_l, d_l)
        closer = t_k < best_t
        if closer.any():
            best_t = np.where(closer, t_k, best_t)
            obj_index = np.where(closer, k, obj_index)
            normal_local[closer] = n_k[closer]
            local_pt[closer] = o_l[closer] + t_k[closer, None] * d_l[closer]

    world_point = origins + np.where(np.isfinite(best_t), best_t, 0.0)[..., None] * dirs
    normal = normal_local.copy()
    albedo = np.zeros(dirs.shape)
    for k, obj in enumerate(scene.objects):
        mask = obj_index == k
        if not mask.any():
            continue
        albedo[mask] = obj.albedo.eval(local_pt[mask], normal_local[mask])
        if k in rotations:
            normal[mask] = normal_local[mask] @ rotations[k].T
    return Hits(t=best_t, object_index=obj_index, world_point=world_point, normal=normal, albedo=albedo)


def light_occluded(scene: SceneDescription, points: np.ndarray, normals: np.ndarray, light: DirectionalLight, transforms=None) -> np.ndarray:
    """True where a secondary ray toward the light hits any geometry."""
    if points.size == 0:
        return np.zeros(points.shape[:-1], dtype=bool)
    origins = points + 1e-5 * normals
    d = np.broadcast_to(-light.direction, points.shape)
    shadow_hits = trace(scene, origins, d, transforms)
    return shadow_hits.valid


def shade(scene: SceneDescription, hits: Hits, light: DirectionalLight, transforms=None):
    """Lambertian: albedo * (ambient + intensity * max(0, n.(-l)) * lit), clamped."""
    cos = np.maximum(0.0, hits.normal @ (-light.direction))
    lit = np.zeros(hits.t.shape, dtype=bool)
    v = hits.valid
    lit[v] = ~light_occluded(scene, hits.world_point[v], hits.normal[v], light, transforms)
    direct = light.intensity * (cos * lit)[..., None]
    color = hits.albedo * (light.ambient + direct)
    return np.clip(color, 0.0, 1.0), lit


def render_ground_truth(scene: SceneDescription, pose: Pose, intr: CameraIntrinsics,
                        light: Optional[DirectionalLight] = None, transforms=None) -> np.ndarray:
    light = light or scene.light
    origin, dirs = camera_rays(pose, intr)
    hits = trace(scene, origin, dirs, transforms)
    color, _ = shade(scene, hits, light, transforms)
    img = np.where(hits.valid[..., None], color, scene.background)
    return np.clip(img, 0.0, 1.0)


def capture_input_buffers(scene: SceneDescription, pose: Pose, intr: CameraIntrinsics,
                          light: Optional[DirectionalLight] = None, transforms=None) -> InputBuffers:
    light = light or scene.light
    origin, dirs = camera_rays(pose, intr)
    hits = trace(scene, origin, dirs, transforms)
    color, lit = shade(scene, hits, light, transforms)
    valid = hits.valid
    depth = np.where(valid, (hits.world_point - pose.position) @ pose.forward(), 0.0)
    footprint = depth * (2.0 * np.tan(intr.fov_y / 2.0) / intr.height)
    object_id = np.zeros(valid.shape, dtype=np.int32)
    for k, obj in enumerate(scene.objects):
        object_id[hits.object_index == k] = obj.object_id
    shaded = np.where(valid[..., None], color, scene.background)
    return InputBuffers(
        pose=pose,
        intrinsics=intr,
        world_pos=np.where(valid[..., None], hits.world_point, 0.0),
        valid=valid,
        normal=np.where(valid[..., None], hits.normal, 0.0),
        albedo=np.where(valid[..., None], hits.albedo, 0.0),
        shaded=np.clip(shaded, 0.0, 1.0),
        object_id=object_id,
        depth=depth,
        footprint=np.where(valid, footprint, 0.0),
        lit=valid & lit,
    )


def render_depth(scene: SceneDescription, pose: Pose, intr: CameraIntrinsics, transforms=None) -> np.ndarray:
    """Camera-space z per pixel; intr.far where no hit."""
    origin, dirs = camera_rays(pose, intr)
    hits = trace(scene, origin, dirs, transforms)
    depth = (hits.world_point - pose.position) @ pose.forward()
    return np.where(hits.valid, depth, intr.far)


def render_ortho_depth(scene: SceneDescription, cam: OrthoCamera, transforms=None) -> np.ndarray:
    """Depth along the projection direction from the camera plane; cam.far where miss."""
    origins = cam.pixel_origins()
    d = np.broadcast_to(cam.pose.forward(), origins.shape)
    hits = trace(scene, origins, d, transforms)
    return np.where(hits.valid, hits.t, cam.far)


def build_light_camera(aabb_lo, aabb_hi, direction, resolution: int = 256) -> OrthoCamera:
    """Orthographic camera looking along the light direction, covering the AABB."""
    lo = np.asarray(aabb_lo, dtype=np.float64)
    hi = np.asarray(aabb_hi, dtype=np.float64)
    center = (lo + hi) / 2
    radius = float(np.linalg.norm(hi - lo) / 2) * 1.1 + 1e-3
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    position = center - direction * (radius + 1.0)
    pose = look_at(position, position + direction)
    return OrthoCamera(pose=pose, half_width=radius, half_height=radius,
                       width=resolution, height=resolution, far=2 * radius + 2.0)


def build_dome_rig(center, heading: float, n_cameras: int, radius: float,
                   width: int = 64, height: int = 64, fov_y: float = np.pi / 2,
                   near: float = 0.05, far: float = 100.0):
    """Cameras on the top half of a Fibonacci sphere about `center`, looking inward.

    Camera i sits at polar angle cos(theta_i) = 1 - i/n (so n=1 puts the single
    camera straight above) and azimuth i*golden_angle + heading.

    Returns (poses, intrinsics) with shared intrinsics.
    """
    if n_cameras < 1:
        raise ValueError("n_cameras must be >= 1")
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n_cameras):
        cos_t = 1.0 - i / n_cameras
        sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        phi = i * GOLDEN_ANGLE + heading
        offset = np.array([sin_t * np.cos(phi), cos_t, sin_t * np.sin(phi)])
        poses.append(look_at(center + radius * offset, center))
    intr = CameraIntrinsics(width=width, height=height, fov_y=fov_y, near=near, far=far)
    return poses, intr


def cull_input_samples(buffers: list[InputBuffers]) -> SampleBatch:
    """Pool valid samples across cameras, then deduplicate by world-space voxel.

    Voxel side = 2x the median footprint over all valid samples. Within each
    voxel the winning camera is the one with the least oblique view of the
    surface (max |n . view_dir|, ties to the lower camera index); the winner
    keeps all of its samples in that voxel, other cameras' samples drop.
    """
    pos, nrm, alb, oid, fp, lit, cam, score = [], [], [], [], [], [], [], []
    for ci, buf in enumerate(buffers):
        m = buf.valid
        if not m.any():
            continue
        p = buf.world_pos[m]
        n = buf.normal[m]
        view = p - buf.pose.position
        view /= np.linalg.norm(view, axis=-1, keepdims=True)
        pos.append(p)
        nrm.append(n)
        alb.append(buf.albedo[m])
        oid.append(buf.object_id[m])
        fp.append(buf.footprint[m])
        lit.append(buf.lit[m])
        cam.append(np.full(p.shape[0], ci, dtype=np.int32))
        score.append(np.abs(np.sum(n * view, axis=-1)))
    if not pos:
        z3 = np.zeros((0, 3))
        return SampleBatch(z3, z3.copy(), z3.copy(), np.zeros(0, np.int32), np.zeros(0),
                           np.zeros(0, bool), np.zeros(0, np.int32))
    pos = np.concatenate(pos)
    nrm = np.concatenate(nrm)
    alb = np.concatenate(alb)
    oid = np.concatenate(oid)
    fp = np.concatenate(fp)
    lit = np.concatenate(lit)
    cam = np.concatenate(cam)
    score = np.concatenate(score)

    side = 2.0 * float(np.median(fp))
    if side <= 0:
        side = 1e-3
    keys = np.floor(pos / side).astype(np.int64)
    # pack voxel coords into one sortable key per sample
    _, bucket = np.unique(keys, axis=0, return_inverse=True)
    keep = np.zeros(pos.shape[0], dtype=bool)
    order = np.lexsort((cam, -score, bucket))  # per bucket: best score first, then low camera
    bucket_sorted = bucket[order]
    first_of_bucket = np.ones(len(order), dtype=bool)
    first_of_bucket[1:] = bucket_sorted[1:] != bucket_sorted[:-1]
    winner_cam = np.zeros(bucket.max() + 1, dtype=np.int32)
    winner_cam[bucket_sorted[first_of_bucket]] = cam[order[first_of_bucket]]
    keep = cam == winner_cam[bucket]
    return SampleBatch(
        positions=pos[keep],
        normals=nrm[keep],
        albedo=alb[keep],
        object_ids=oid[keep].astype(np.int32),
        footprints=fp[keep],
        lit=lit[keep],
        camera_indices=cam[keep],
    )
