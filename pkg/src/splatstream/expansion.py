"""Progressive model growth and lifecycle policies.

New Gaussians come from culled engine samples, gated by a uniform grid so
each region of space initializes exactly once as the viewer reaches it.
Freezing retires converged Gaussians from optimization, preculling limits
rendering and optimization to cells a camera can actually see, and pruning
drops Gaussians whose opacity collapsed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import SampleBatch
from .geometry import CameraIntrinsics, Pose, project_points
from .model import (
    AppendRecord,
    GaussianBatch,
    GaussianModel,
    GridIndex,
    PruneRecord,
    append_gaussians,
    num_sh_bases,
    prune_rows,
)
from .render import SH_C0


@dataclass
class ExpansionState:
    grid: GridIndex
    candidate_queue: list = field(default_factory=list)
    observation_counts: dict = field(default_factory=dict)


def init_gaussians(samples: SampleBatch, sh_degree: int = 0) -> GaussianBatch:
    """Convert culled surface samples into a batch of fresh Gaussians.

    Scales start isotropic at half the sample footprint; the SH DC term is
    chosen so that evaluating the new Gaussian returns the sample albedo
    exactly under the color = C0*dc + 0.5 convention.
    """
    n = samples.count
    if n == 0:
        return GaussianBatch.empty(sh_degree)
    B = num_sh_bases(sh_degree)
    footprint = np.maximum(samples.footprints, 1e-6)
    quats = np.zeros((n, 4), np.float32)
    quats[:, 0] = 1.0
    sh = np.zeros((n, 3, B), np.float32)
    sh[:, :, 0] = (samples.albedo - 0.5) / SH_C0
    return GaussianBatch(
        means=samples.positions.astype(np.float32),
        log_scales=np.repeat(np.log(footprint / 2.0)[:, None], 3, axis=1).astype(np.float32),
        quaternions=quats,
        logit_opacities=np.zeros(n, np.float32),  # logit(0.5)
        sh_coeffs=sh,
        light_visibility=samples.lit.astype(np.float32),
        object_ids=samples.object_ids.astype(np.int32),
        sh_degree=sh_degree,
    )


def select_candidate_cells(viewer_position, grid: GridIndex, radius: float,
                           bounds: tuple) -> list:
    """Uninitialized cells near the viewer, nearest first.

    `bounds` is the (lo, hi) world box that limits the cell lattice; without
    it the set of "all uninitialized cells" would be unbounded.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(viewer_position, dtype=np.float64)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    c_lo = grid.cells_of(lo[None])[0]
    c_hi = grid.cells_of(hi[None])[0]
    out = []
    for ix in range(c_lo[0], c_hi[0] + 1):
        for iy in range(c_lo[1], c_hi[1] + 1):
            for iz in range(c_lo[2], c_hi[2] + 1):
                cell = (ix, iy, iz)
                if cell in grid.initialized_cells:
                    continue
                d = np.linalg.norm(grid.cell_center(cell) - p)
                if d <= radius:
                    out.append((d, cell))
    out.sort(key=lambda e: (e[0], e[1]))
    return [cell for _, cell in out]


def _center_depth_pass(center, pose: Pose, intr: CameraIntrinsics,
                       depth_buffer: Optional[np.ndarray], slack: float):
    """(in_frustum, depth_ok) for one cell center in one camera."""
    uv, z = project_points(center[None], pose, intr)
    z = float(z[0])
    if not (intr.near <= z <= intr.far):
        return False, False
    px, py = int(np.floor(uv[0, 0])), int(np.floor(uv[0, 1]))
    if not (0 <= px < intr.width and 0 <= py < intr.height):
        return False, False
    if depth_buffer is None:
        return True, True
    return True, z <= float(depth_buffer[py, px]) + slack


def visibility_test(cells: Sequence, grid: GridIndex, poses: Sequence[Pose],
                    intr: CameraIntrinsics, depth_buffers: Sequence[np.ndarray],
                    k: int = 2) -> list:
    """Cells whose center is inside >= k camera frustums and not occluded.

    A center passes one camera when its depth is at most the engine depth at
    the projected pixel plus half the cell diagonal.
    """
    slack = grid.cell_diagonal / 2.0
    out = []
    for cell in cells:
        center = grid.cell_center(cell)
        support = 0
        for pose, depth in zip(poses, depth_buffers):
            ok, unoccluded = _center_depth_pass(center, pose, intr, depth, slack)
            if ok and unoccluded:
                support += 1
                if support >= k:
                    break
        if support >= k:
            out.append(tuple(cell))
    return out


def freeze_policy(model: GaussianModel, optimizer_stats, age_threshold: int = 100,
                  grad_threshold: float = 1e-4) -> np.ndarray:
    """Active rows whose parameters stopped moving: old enough and with a
    small gradient EMA."""
    age = optimizer_stats.age
    ema = optimizer_stats.grad_ema
    sel = (age >= age_threshold) & (ema < grad_threshold)
    return np.nonzero(sel)[0].astype(np.int64)


def precull(model: GaussianModel, grid: GridIndex, poses: Sequence[Pose],
            intr: CameraIntrinsics,
            depth_buffers: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Rows worth rendering for the given cameras: the union of members of
    cells passing a conservative frustum test (and, when engine depth buffers
    are supplied, the same occlusion test as cell initialization with k=1).

    The frustum test keeps any cell whose bounding sphere touches the view
    volume, so a cell is only dropped when the whole cell is outside.
    """
    if not grid.cell_map:
        return np.zeros(0, dtype=np.int64)
    margin = grid.cell_diagonal / 2.0
    tx = (intr.width / 2.0) / intr.fx
    ty = (intr.height / 2.0) / intr.fy
    nx = 1.0 / np.sqrt(1.0 + tx * tx)
    ny = 1.0 / np.sqrt(1.0 + ty * ty)
    if depth_buffers is None:
        depth_buffers = [None] * len(poses)

    keep: set = set()
    for cell, members in grid.cell_map.items():
        center = grid.cell_center(cell)
        for pose, depth in zip(poses, depth_buffers):
            c = pose.world_to_camera(center[None])[0]
            x, y, z = c
            if z + margin < intr.near or z - margin > intr.far:
                continue
            if (z * tx - x) * nx < -margin or (z * tx + x) * nx < -margin:
                continue
            if (z * ty - y) * ny < -margin or (z * ty + y) * ny < -margin:
                continue
            if depth is not None:
                in_frustum, unoccluded = _center_depth_pass(center, pose, intr, depth, margin)
                if in_frustum and not unoccluded:
                    continue
            keep.update(members)
            break
    return np.array(sorted(keep), dtype=np.int64)


def prune(model: GaussianModel, opacity_floor: float = 0.01):
    """Remove active rows whose opacity fell below the floor.

    Returns (removed pre-compaction indices, PruneRecord or None).
    """
    if not 0 <= opacity_floor < 1:
        raise ValueError("opacity_floor must be in [0, 1)")
    a = model.active_count
    logits = model.logit_opacities[:a].astype(np.float64)
    opacity = 1.0 / (1.0 + np.exp(-logits))
    removed = np.nonzero(opacity < opacity_floor)[0].astype(np.int64)
    record = prune_rows(model, removed) if removed.size else None
    return removed, record


def expansion_pass(model: GaussianModel, state: ExpansionState, samples: SampleBatch,
                   viewer_position, poses: Sequence[Pose], intr: CameraIntrinsics,
                   depth_buffers: Sequence[np.ndarray], radius: float, bounds: tuple,
                   k: int = 2) -> tuple[Optional[AppendRecord], tuple[int, int]]:
    """One growth step: schedule cells near the viewer, keep the sufficiently
    observed ones, initialize Gaussians from the samples they contain, and
    mark them done. Visible cells with no surface samples are empty space and
    are marked done as well so they are never rescanned.

    Returns (AppendRecord or None, inserted row range).
    """
    candidates = select_candidate_cells(viewer_position, state.grid, radius, bounds)
    state.candidate_queue = list(candidates)
    visible = visibility_test(candidates, state.grid, poses, intr, depth_buffers, k=k)
    if not visible:
        return None, (model.active_count, model.active_count)

    visible_set = set(visible)
    for cell in visible:
        state.observation_counts[cell] = state.observation_counts.get(cell, 0) + 1

    if samples.count:
        cells = state.grid.cells_of(samples.positions)
        mask = np.array([tuple(c) in visible_set for c in cells], dtype=bool)
        batch = init_gaussians(samples.subset(mask), model.sh_degree)
    else:
        batch = GaussianBatch.empty(model.sh_degree)

    record = None
    rng = (model.active_count, model.active_count)
    if batch.count:
        record, rng = append_gaussians(model, batch)
    for cell in visible:
        state.grid.mark_initialized(cell)
        if cell in state.candidate_queue:
            state.candidate_queue.remove(cell)
    state.grid.rebuild(model)
    return record, rng
