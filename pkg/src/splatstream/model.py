"""Columnar Gaussian attribute store with active/frozen pools.

All per-Gaussian attributes live in flat parallel arrays so that tensor
deltas and snapshots can slice them cheaply. Rows [0, active_count) are
trainable; rows [active_count, count) are frozen and must never change
except through explicit reordering. Every structural mutation (append,
freeze, prune) emits a MutationRecord that the optimizer state, the object
registry, and the remote replica all replay to stay row-aligned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .geometry import quat_conjugate, quat_multiply, quat_normalize, quat_to_rotmat

ATTRIBUTE_NAMES = (
    "means",
    "log_scales",
    "quaternions",
    "logit_opacities",
    "sh_coeffs",
    "light_visibility",
    "object_ids",
)


def num_sh_bases(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class PermuteRecord:
    """Row reorder: new_row[i] = old_row[permutation[i]]."""

    permutation: np.ndarray
    new_active_count: int


@dataclass
class AppendRecord:
    """`count` rows inserted at `insert_at` (in front of the frozen region)."""

    insert_at: int
    count: int
    object_ids: np.ndarray
    new_active_count: int


@dataclass
class PruneRecord:
    """Rows at `indices` (pre-compaction numbering) removed."""

    indices: np.ndarray
    new_active_count: int


MutationRecord = Union[PermuteRecord, AppendRecord, PruneRecord]


@dataclass
class GaussianModel:
    """Flat attribute arrays for `count` Gaussians, active rows first."""

    means: np.ndarray  # (N, 3) float32, world meters
    log_scales: np.ndarray  # (N, 3) float32
    quaternions: np.ndarray  # (N, 4) float32 (w, x, y, z), unit
    logit_opacities: np.ndarray  # (N,) float32
    sh_coeffs: np.ndarray  # (N, 3, B) float32, column 0 is the DC term
    light_visibility: np.ndarray  # (N,) float32 in [0, 1]
    object_ids: np.ndarray  # (N,) int32, 0 = static
    active_count: int
    sh_degree: int

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def frozen_count(self) -> int:
        return self.count - self.active_count

    @staticmethod
    def empty(sh_degree: int = 0) -> "GaussianModel":
        B = num_sh_bases(sh_degree)
        return GaussianModel(
            means=np.zeros((0, 3), np.float32),
            log_scales=np.zeros((0, 3), np.float32),
            quaternions=np.zeros((0, 4), np.float32),
            logit_opacities=np.zeros(0, np.float32),
            sh_coeffs=np.zeros((0, 3, B), np.float32),
            light_visibility=np.zeros(0, np.float32),
            object_ids=np.zeros(0, np.int32),
            active_count=0,
            sh_degree=sh_degree,
        )

    def validate(self):
        n = self.count
        B = num_sh_bases(self.sh_degree)
        assert self.means.shape == (n, 3)
        assert self.log_scales.shape == (n, 3)
        assert self.quaternions.shape == (n, 4)
        assert self.logit_opacities.shape == (n,)
        assert self.sh_coeffs.shape == (n, 3, B)
        assert self.light_visibility.shape == (n,)
        assert self.object_ids.shape == (n,)
        assert 0 <= self.active_count <= n
        if n:
            norms = np.linalg.norm(self.quaternions.astype(np.float64), axis=1)
            assert np.abs(norms - 1.0).max() < 1e-5, "quaternion norm drift"
            assert self.light_visibility.min() >= 0.0 and self.light_visibility.max() <= 1.0
            assert (self.object_ids >= 0).all()

    def copy(self) -> "GaussianModel":
        return GaussianModel(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            quaternions=self.quaternions.copy(),
            logit_opacities=self.logit_opacities.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            light_visibility=self.light_visibility.copy(),
            object_ids=self.object_ids.copy(),
            active_count=self.active_count,
            sh_degree=self.sh_degree,
        )

    def attribute(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def _apply_rows(self, fn):
        for name in ATTRIBUTE_NAMES:
            setattr(self, name, fn(getattr(self, name)))

    def append(self, batch: "GaussianBatch") -> tuple[int, int]:
        """Insert batch rows before the frozen region; returns the new index range."""
        if batch.sh_degree != self.sh_degree:
            raise ValueError(f"sh_degree mismatch: batch {batch.sh_degree} vs model {self.sh_degree}")
        b = batch.count
        at = self.active_count
        if b:
            for name in ATTRIBUTE_NAMES:
                old = self.attribute(name)
                new = np.asarray(batch.attribute(name), dtype=old.dtype)
                setattr(self, name, np.concatenate([old[:at], new, old[at:]]))
        self.active_count += b
        return at, at + b

    def permute(self, permutation: np.ndarray, new_active_count: int):
        permutation = np.asarray(permutation)
        if sorted(permutation.tolist()) != list(range(self.count)):
            raise ValueError("not a permutation of current rows")
        self._apply_rows(lambda a: a[permutation].copy())
        self.active_count = new_active_count

    def remove_rows(self, indices: np.ndarray, new_active_count: int):
        keep = np.ones(self.count, dtype=bool)
        keep[np.asarray(indices, dtype=np.int64)] = False
        self._apply_rows(lambda a: a[keep].copy())
        self.active_count = new_active_count


@dataclass
class GaussianBatch:
    """Rows destined for GaussianModel.append; same columns, all active."""

    means: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    light_visibility: np.ndarray
    object_ids: np.ndarray
    sh_degree: int

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def attribute(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @staticmethod
    def empty(sh_degree: int = 0) -> "GaussianBatch":
        m = GaussianModel.empty(sh_degree)
        return GaussianBatch(
            m.means, m.log_scales, m.quaternions, m.logit_opacities,
            m.sh_coeffs, m.light_visibility, m.object_ids, sh_degree,
        )


def append_gaussians(model: GaussianModel, batch: GaussianBatch) -> tuple[AppendRecord, tuple[int, int]]:
    at = model.active_count
    rng = model.append(batch)
    rec = AppendRecord(
        insert_at=at,
        count=batch.count,
        object_ids=batch.object_ids.astype(np.int32).copy(),
        new_active_count=model.active_count,
    )
    return rec, rng


def freeze_range(model: GaussianModel, indices) -> Optional[PermuteRecord]:
    """Move the given active rows to the head of the frozen region.

    Row order after the permutation: kept actives (original order), newly
    frozen (original order), previously frozen. Returns None when nothing
    was frozen.
    """
    idx = np.unique(np.asarray(list(indices), dtype=np.int64))
    if idx.size == 0:
        return None
    if (idx >= model.active_count).any() or (idx < 0).any():
        raise ValueError("freeze targets must be active rows")
    mask = np.zeros(model.count, dtype=bool)
    mask[idx] = True
    kept = np.nonzero(~mask[: model.active_count])[0]
    frozen_tail = np.arange(model.active_count, model.count)
    permutation = np.concatenate([kept, idx, frozen_tail])
    new_active = kept.size
    model.permute(permutation, new_active)
    return PermuteRecord(permutation=permutation, new_active_count=new_active)


def prune_rows(model: GaussianModel, indices) -> Optional[PruneRecord]:
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size == 0:
        return None
    if (idx < 0).any() or (idx >= model.count).any():
        raise ValueError("prune index out of range")
    removed_active = int((idx < model.active_count).sum())
    new_active = model.active_count - removed_active
    model.remove_rows(idx, new_active)
    return PruneRecord(indices=idx, new_active_count=new_active)


def placeholder_batch(object_ids: np.ndarray, sh_degree: int) -> GaussianBatch:
    """Rows announced by an ordering packet before their data arrives: fully
    transparent so they render as nothing."""
    n = len(object_ids)
    B = (sh_degree + 1) ** 2
    return GaussianBatch(
        means=np.zeros((n, 3), np.float32),
        log_scales=np.full((n, 3), -10.0, np.float32),
        quaternions=np.tile(np.float32([1, 0, 0, 0]), (n, 1)),
        logit_opacities=np.full(n, -100.0, np.float32),
        sh_coeffs=np.zeros((n, 3, B), np.float32),
        light_visibility=np.ones(n, np.float32),
        object_ids=np.asarray(object_ids, np.int32),
        sh_degree=sh_degree,
    )


def apply_mutation(model: GaussianModel, record: MutationRecord) -> None:
    """Replay a server-side row mutation on a replica.

    Every count in the record is checked against the replica first; a record
    produced against different state raises ValueError and changes nothing.
    """
    if isinstance(record, PermuteRecord):
        if not 0 <= record.new_active_count <= model.count:
            raise ValueError("permute record active count out of range")
        model.permute(record.permutation, record.new_active_count)
    elif isinstance(record, AppendRecord):
        if record.insert_at != model.active_count:
            raise ValueError("append record does not start at the active boundary")
        if record.new_active_count != record.insert_at + len(record.object_ids):
            raise ValueError("append record counts disagree")
        model.append(placeholder_batch(record.object_ids, model.sh_degree))
        model.active_count = record.new_active_count
    elif isinstance(record, PruneRecord):
        idx = np.unique(np.asarray(record.indices, dtype=np.int64))
        if idx.size and (int(idx.max()) >= model.count or int(idx.min()) < 0):
            raise ValueError("prune record outside replica rows")
        removed_active = int((idx < model.active_count).sum())
        if record.new_active_count != model.active_count - removed_active:
            raise ValueError("prune record counts disagree")
        model.remove_rows(idx, record.new_active_count)
    else:
        raise TypeError(f"unknown record {type(record)}")


class GridIndex:
    """Uniform 3D grid over Gaussian means; tracks which cells were initialized."""

    def __init__(self, cell_size: float = 2.0, origin=(0.0, 0.0, 0.0)):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.cell_map: dict[tuple[int, int, int], list[int]] = {}
        self.initialized_cells: set[tuple[int, int, int]] = set()

    def cell_of(self, position) -> tuple[int, int, int]:
        c = np.floor((np.asarray(position, dtype=np.float64) - self.origin) / self.cell_size)
        return (int(c[0]), int(c[1]), int(c[2]))

    def cells_of(self, positions: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(positions, dtype=np.float64) - self.origin) / self.cell_size).astype(np.int64)

    def cell_center(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell, dtype=np.float64) + 0.5) * self.cell_size

    @property
    def cell_diagonal(self) -> float:
        return float(self.cell_size * np.sqrt(3.0))

    def rebuild(self, model: GaussianModel):
        self.cell_map = {}
        if model.count == 0:
            return
        cells = self.cells_of(model.means)
        for i in range(model.count):
            key = (int(cells[i, 0]), int(cells[i, 1]), int(cells[i, 2]))
            self.cell_map.setdefault(key, []).append(i)

    def mark_initialized(self, cell):
        self.initialized_cells.add(tuple(int(v) for v in cell))


class ObjectRegistry:
    """Rigid transforms per dynamic object plus row-aligned local poses.

    Gaussians with object_id k > 0 satisfy world_mean = R_k local_mean + t_k
    and world_quat = q_k * local_quat. Local poses are (re)derived from the
    current world rows whenever those rows are written from outside (e.g.
    after an optimizer step or an applied delta), so both ends of the stream
    can maintain them independently.
    """

    def __init__(self):
        self.transforms: dict[int, tuple[np.ndarray, np.ndarray]] = {}  # id -> (quat wxyz, translation)
        self.local_means = np.zeros((0, 3), np.float64)
        self.local_rotations = np.zeros((0, 4), np.float64)

    def set_transform(self, object_id: int, quat, translation):
        self.transforms[int(object_id)] = (
            quat_normalize(np.asarray(quat, dtype=np.float64)),
            np.asarray(translation, dtype=np.float64),
        )

    def get_transform(self, object_id: int):
        return self.transforms.get(int(object_id), (np.array([1.0, 0, 0, 0]), np.zeros(3)))

    def resize(self, record: MutationRecord):
        if isinstance(record, PermuteRecord):
            self.local_means = self.local_means[record.permutation].copy()
            self.local_rotations = self.local_rotations[record.permutation].copy()
        elif isinstance(record, AppendRecord):
            at = record.insert_at
            self.local_means = np.concatenate(
                [self.local_means[:at], np.zeros((record.count, 3)), self.local_means[at:]]
            )
            ident = np.tile(np.array([1.0, 0, 0, 0]), (record.count, 1))
            self.local_rotations = np.concatenate(
                [self.local_rotations[:at], ident, self.local_rotations[at:]]
            )
        elif isinstance(record, PruneRecord):
            keep = np.ones(self.local_means.shape[0], dtype=bool)
            keep[record.indices] = False
            self.local_means = self.local_means[keep].copy()
            self.local_rotations = self.local_rotations[keep].copy()
        else:
            raise TypeError(f"unknown record {type(record)}")

    def refresh_locals(self, model: GaussianModel, rows=None):
        """Recompute local poses for dynamic rows from their current world pose."""
        if self.local_means.shape[0] != model.count:
            self.local_means = np.zeros((model.count, 3))
            self.local_rotations = np.tile(np.array([1.0, 0, 0, 0]), (model.count, 1))
        rows = np.arange(model.count) if rows is None else np.asarray(rows, dtype=np.int64)
        for oid in np.unique(model.object_ids[rows]):
            if oid == 0:
                continue
            q, t = self.get_transform(int(oid))
            sel = rows[model.object_ids[rows] == oid]
            R = quat_to_rotmat(q)
            self.local_means[sel] = (model.means[sel].astype(np.float64) - t) @ R
            qc = quat_conjugate(q)
            self.local_rotations[sel] = quat_normalize(
                quat_multiply(qc[None, :], model.quaternions[sel].astype(np.float64))
            )

    def apply_transform(self, model: GaussianModel, object_id: int, quat, translation) -> np.ndarray:
        """Set a new transform and rewrite the object's world rows. Returns moved rows."""
        object_id = int(object_id)
        if object_id not in self.transforms:
            raise KeyError(f"unknown object_id {object_id}")
        self.set_transform(object_id, quat, translation)
        q, t = self.transforms[object_id]
        rows = np.nonzero(model.object_ids == object_id)[0]
        if rows.size == 0:
            return rows
        R = quat_to_rotmat(q)
        model.means[rows] = (self.local_means[rows] @ R.T + t).astype(np.float32)
        model.quaternions[rows] = quat_normalize(
            quat_multiply(q[None, :], self.local_rotations[rows])
        ).astype(np.float32)
        return rows


MODEL_MAGIC = b"GSM1"


def save_model(path, model: GaussianModel):
    """Self-describing binary container; all arrays little-endian float32."""
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<III", model.sh_degree, model.count, model.active_count))
        for name in ATTRIBUTE_NAMES:
            f.write(np.ascontiguousarray(model.attribute(name), dtype="<f4").tobytes())


def load_model(path) -> GaussianModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a model container")
    sh_degree, count, active_count = struct.unpack_from("<III", data, 4)
    B = num_sh_bases(sh_degree)
    shapes = {
        "means": (count, 3),
        "log_scales": (count, 3),
        "quaternions": (count, 4),
        "logit_opacities": (count,),
        "sh_coeffs": (count, 3, B),
        "light_visibility": (count,),
        "object_ids": (count,),
    }
    off = 16
    arrays = {}
    for name in ATTRIBUTE_NAMES:
        n = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shapes[name])
        off += 4 * n
        arrays[name] = arr.astype(np.int32) if name == "object_ids" else arr.astype(np.float32)
    return GaussianModel(active_count=active_count, sh_degree=sh_degree, **arrays)
