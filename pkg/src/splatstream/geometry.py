"""Quaternion, pose, and pinhole-camera math shared by the engine, renderer, and protocol.

Conventions used throughout the package:
  - world frame: right-handed, +Y up, meters
  - camera frame: +X right, +Y down, +Z forward (computer-vision style)
  - quaternions: (w, x, y, z), unit norm, rotating local/camera frame into world
  - pixels: integer pixel (i, j) has its center at (i + 0.5, j + 0.5)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Works on (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w,x,y,z). Composes rotations: R(a*b) = R(a)R(b)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for quaternion(s), shape (..., 3, 3). Normalizes first."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_rotmat for a single proper rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q."""
    R = quat_to_rotmat(q)
    return (R @ np.asarray(v, dtype=np.float64)[..., None])[..., 0]


def drotmat_dquat(q: np.ndarray) -> np.ndarray:
    """Derivative of quat_to_rotmat w.r.t. the raw (unnormalized) quaternion.

    Returns shape (4, 3, 3): component k is dR/dq_k, including the
    normalization Jacobian (I - q_hat q_hat^T)/|q|.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    qh = q / norm
    w, x, y, z = qh
    dR_dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dR_dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dR_dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dR_dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    dR_dqh = np.stack([dR_dw, dR_dx, dR_dy, dR_dz])  # (4,3,3) w.r.t. unit quat
    dqh_dq = (np.eye(4) - np.outer(qh, qh)) / norm  # (4,4): dqh_i/dq_k
    return np.einsum("ki,ijn->kjn", dqh_dq.T, dR_dqh)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal length is set by the vertical field of view:
    fx = fy = (height/2) / tan(fov_y/2), principal point at the image center.
    """

    width: int
    height: int
    fov_y: float
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if not (0 < self.fov_y < np.pi):
            raise ValueError("require 0 < fov_y < pi")

    @property
    def fy(self) -> float:
        return (self.height / 2.0) / np.tan(self.fov_y / 2.0)

    @property
    def fx(self) -> float:
        return self.fy

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


@dataclass(frozen=True)
class Pose:
    """Rigid camera pose: position (world) + quaternion (w,x,y,z) camera->world."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "quaternion", quat_normalize(self.quaternion))

    def rotation(self) -> np.ndarray:
        """3x3 camera->world rotation."""
        return quat_to_rotmat(self.quaternion)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        R = self.rotation()
        return (np.asarray(points, dtype=np.float64) - self.position) @ R

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        R = self.rotation()
        return np.asarray(points, dtype=np.float64) @ R.T + self.position

    def forward(self) -> np.ndarray:
        """Camera +Z (view direction) in world coordinates."""
        return self.rotation()[:, 2]

    def as_array(self) -> np.ndarray:
        """(px, py, pz, qw, qx, qy, qz) packed for wire/trace formats."""
        return np.concatenate([self.position, self.quaternion])

    @staticmethod
    def from_array(arr: np.ndarray) -> "Pose":
        arr = np.asarray(arr, dtype=np.float64)
        return Pose(arr[:3], arr[3:7])


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose at `eye` with +Z toward `target` and image-up aligned with `up`.

    Falls back to +Z world as the up hint when the view direction is
    (anti)parallel to `up`, so straight-down cameras are well defined.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / zn
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)  # columns are camera axes in world coords
    return Pose(eye, rotmat_to_quat(R))


def project_points(points_world: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Project world points to pixel coordinates.

    Returns (uv, depth): uv (..., 2) in pixels, depth (...,) camera-space z.
    Points behind the camera get negative depth; callers filter.
    """
    pc = pose.world_to_camera(points_world)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Inverse of project_points for given per-pixel depth."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - intr.cx) / intr.fx * depth
    y = (uv[..., 1] - intr.cy) / intr.fy * depth
    pc = np.stack([x, y, depth], axis=-1)
    return pose.camera_to_world(pc)


def pixel_centers(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates (i+0.5, j+0.5)."""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def camera_rays(pose: Pose, intr: CameraIntrinsics):
    """Per-pixel ray origins/directions in world space.

    Returns (origins (3,), dirs (H, W, 3)); directions are unit length.
    """
    uv = pixel_centers(intr)
    x = (uv[..., 0] - intr.cx) / intr.fx
    y = (uv[..., 1] - intr.cy) / intr.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs_world = dirs_cam @ pose.rotation().T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    return pose.position.copy(), dirs_world


@dataclass(frozen=True)
class OrthoCamera:
    """Orthographic camera: +Z is the projection direction, extent in meters.

    Pixel u spans [-half_width, half_width] along camera +X, v likewise along
    +Y (image down). Depth is camera-space z measured from the camera plane.
    """

    pose: Pose
    half_width: float
    half_height: float
    width: int
    height: int
    far: float

    def project(self, points_world: np.ndarray):
        pc = self.pose.world_to_camera(points_world)
        u = (pc[..., 0] / self.half_width * 0.5 + 0.5) * self.width
        v = (pc[..., 1] / self.half_height * 0.5 + 0.5) * self.height
        return np.stack([u, v], axis=-1), pc[..., 2]

    def pixel_origins(self) -> np.ndarray:
        """(H, W, 3) world-space ray origins on the camera plane; rays travel along +Z."""
        u = (np.arange(self.width, dtype=np.float64) + 0.5) / self.width
        v = (np.arange(self.height, dtype=np.float64) + 0.5) / self.height
        uu, vv = np.meshgrid(u, v)
        x = (uu * 2 - 1) * self.half_width
        y = (vv * 2 - 1) * self.half_height
        pc = np.stack([x, y, np.zeros_like(x)], axis=-1)
        return self.pose.camera_to_world(pc)


def frustum_contains(points_world: np.ndarray, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Boolean mask: point projects inside the image and near<=z<=far."""
    uv, z = project_points(points_world, pose, intr)
    ok = (z >= intr.near) & (z <= intr.far)
    ok &= (uv[..., 0] >= 0) & (uv[..., 0] < intr.width)
    ok &= (uv[..., 1] >= 0) & (uv[..., 1] < intr.height)
    return ok
