"""Depth-assisted image warping, the reference point the streamed model is
judged against.

A client that receives color + depth instead of a scene model can reproject
those frames to its own viewpoint. This module implements that baseline:
forward 3D warp of every source frame (unproject, reproject, z-buffer splat
of one-pixel points), merged nearest-depth-first, with unfilled pixels
reported in a hole mask and painted with the background color.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import render_depth, render_ground_truth
from .geometry import CameraIntrinsics, Pose, look_at, pixel_centers
from .protocol.quantize import dequantize_uniform, quantize_uniform


def ring_poses(center, radius: float, height: float, count: int,
               phase: float = 0.3) -> list[Pose]:
    """Cameras evenly spaced on a circle, all looking at `center`."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(count):
        ang = 2 * np.pi * i / count + phase
        eye = center + np.array([radius * np.cos(ang), height, radius * np.sin(ang)])
        poses.append(look_at(eye, center))
    return poses


@dataclass
class DepthFrame:
    """One captured reference view: color, quantized depth, and its camera."""

    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera-space z, quantized over [near, far]
    pose: Pose
    intrinsics: CameraIntrinsics
    depth_bits: int

    def __post_init__(self):
        H, W = self.intrinsics.height, self.intrinsics.width
        if self.image.shape != (H, W, 3) or self.depth.shape != (H, W):
            raise ValueError("frame buffers do not match the intrinsics")
        if not 1 <= self.depth_bits <= 32:
            raise ValueError("depth_bits must be in [1, 32]")


def capture_depth_frame(scene, pose: Pose, intr: CameraIntrinsics, depth_bits: int = 16,
                        light=None, transforms=None) -> DepthFrame:
    """Render a ground-truth view and quantize its depth to `depth_bits`
    over [near, far]. Rays that miss carry the far plane, like a real
    depth buffer cleared to far."""
    image = render_ground_truth(scene, pose, intr, light, transforms)
    depth = render_depth(scene, pose, intr, transforms)
    codes = quantize_uniform(depth, intr.near, intr.far, depth_bits)
    qdepth = dequantize_uniform(codes, intr.near, intr.far, depth_bits)
    return DepthFrame(image=image, depth=qdepth, pose=pose,
                      intrinsics=intr, depth_bits=depth_bits)


def _unproject(frame: DepthFrame) -> np.ndarray:
    """World-space point per source pixel, (H*W, 3)."""
    intr = frame.intrinsics
    uv = pixel_centers(intr)
    x = (uv[..., 0] - intr.cx) / intr.fx
    y = (uv[..., 1] - intr.cy) / intr.fy
    z = frame.depth
    cam = np.stack([x * z, y * z, z], axis=-1).reshape(-1, 3)
    return cam @ frame.pose.rotation().T + frame.pose.position


def warp(frames: Sequence[DepthFrame], pose: Pose, intr: CameraIntrinsics,
         background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Merge all frames into the target view. Returns (image, hole mask).

    Points from every frame compete in one z-buffer; at equal depth the
    frame that comes first in `frames` wins, so reference order is the
    tiebreak contract.
    """
    if not frames:
        raise ValueError("need at least one frame")
    H, W = intr.height, intr.width
    R = pose.rotation()

    pix_all = []
    z_all = []
    col_all = []
    cam_all = []
    for ci, frame in enumerate(frames):
        world = _unproject(frame)
        cam = (world - pose.position) @ R
        z = cam[:, 2]
        keep = z >= intr.near
        if not keep.any():
            continue
        cam = cam[keep]
        z = z[keep]
        px = intr.fx * cam[:, 0] / z + intr.cx
        py = intr.fy * cam[:, 1] / z + intr.cy
        ix = np.floor(px).astype(np.int64)
        iy = np.floor(py).astype(np.int64)
        inside = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        if not inside.any():
            continue
        pix_all.append(iy[inside] * W + ix[inside])
        z_all.append(z[inside])
        col_all.append(frame.image.reshape(-1, 3)[keep][inside])
        cam_all.append(np.full(inside.sum(), ci, dtype=np.int64))

    image = np.empty((H, W, 3), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)
    holes = np.ones((H, W), dtype=bool)
    if not pix_all:
        return image, holes

    pix = np.concatenate(pix_all)
    z = np.concatenate(z_all)
    col = np.concatenate(col_all)
    cam = np.concatenate(cam_all)

    order = np.lexsort((cam, z, pix))
    pix = pix[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    win = order[first]
    target = pix[first]
    image.reshape(-1, 3)[target] = col[win]
    holes.reshape(-1)[target] = False
    return image, holes


def warp_comparison(scene, frames_by_bits: dict, target_poses: Sequence[Pose],
                    intr: CameraIntrinsics, light=None,
                    model_render=None) -> list[dict]:
    """Per-viewpoint SSIM of each warp precision (and optionally a model
    render) against ground truth. Returns one row per target pose."""
    from .metrics import ssim

    rows = []
    for i, pose in enumerate(target_poses):
        gt = render_ground_truth(scene, pose, intr, light)
        row = {"view": i}
        for bits, frames in frames_by_bits.items():
            img, holes = warp(frames, pose, intr, background=scene.background)
            row[f"warp{bits}_ssim"] = ssim(img, gt)
            row[f"warp{bits}_hole_frac"] = float(holes.mean())
        if model_render is not None:
            row["model_ssim"] = ssim(model_render(pose, intr), gt)
        rows.append(row)
    return rows
