"""Small structural packets: object ids and transforms, light state and
visibility, camera pose feedback, row-ordering records, tensor metadata."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..geometry import CameraIntrinsics, Pose
from ..model import AppendRecord, MutationRecord, PermuteRecord, PruneRecord
from .framing import MAX_ROWS, AttributeId, ProtocolError
from .profiles import COMPRESSION_ZLIB, compress_block, decompress_block
from .quantize import decode_varints, encode_varints, pack_bits, packed_size, unpack_bits


# ---- ObjectIdMap (0x01): per-Gaussian object ids ----


def encode_object_id_map(object_ids: np.ndarray) -> bytes:
    ids = np.asarray(object_ids, dtype=np.int64)
    if (ids < 0).any():
        raise ValueError("object ids must be non-negative")
    return encode_varints([ids.size]) + encode_varints(ids)


def decode_object_id_map(payload: bytes) -> np.ndarray:
    try:
        (n,), off = decode_varints(payload, 0, 1)
        ids, off = decode_varints(payload, off, int(n))
    except ValueError as e:
        raise ProtocolError(str(e)) from None
    return ids.astype(np.int32)


# ---- ObjectTransforms (0x02) ----


def encode_object_transforms(transforms: dict) -> bytes:
    """transforms: object_id -> (quaternion wxyz, translation)."""
    out = [struct.pack("<I", len(transforms))]
    for oid in sorted(transforms):
        q, t = transforms[oid]
        out.append(struct.pack("<I", oid))
        out.append(np.asarray(q, dtype="<f4").tobytes())
        out.append(np.asarray(t, dtype="<f4").tobytes())
    return b"".join(out)


def decode_object_transforms(payload: bytes) -> dict:
    if len(payload) < 4:
        raise ProtocolError("transforms payload too short")
    (count,) = struct.unpack_from("<I", payload, 0)
    need = 4 + count * (4 + 16 + 12)
    if len(payload) < need:
        raise ProtocolError("transforms payload truncated")
    out = {}
    off = 4
    for _ in range(count):
        (oid,) = struct.unpack_from("<I", payload, off)
        q = np.frombuffer(payload, "<f4", count=4, offset=off + 4).copy()
        t = np.frombuffer(payload, "<f4", count=3, offset=off + 20).copy()
        out[int(oid)] = (q.astype(np.float64), t.astype(np.float64))
        off += 32
    return out


# ---- LightVisibility (0x06): bit-packed full vector ----


def encode_light_visibility(visibility: np.ndarray) -> bytes:
    v = np.asarray(visibility)
    bits = (v >= 0.5).astype(np.uint32)
    return struct.pack("<I", v.size) + pack_bits(bits, 1)


def decode_light_visibility(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise ProtocolError("visibility payload too short")
    (n,) = struct.unpack_from("<I", payload, 0)
    try:
        return unpack_bits(payload[4:], 1, n).astype(np.float32)
    except ValueError as e:
        raise ProtocolError(str(e)) from None


# ---- LightState (0x08) ----


def encode_light_state(direction, intensity, ambient_sh: Optional[np.ndarray]) -> bytes:
    d = np.asarray(direction, dtype="<f4")
    i = np.asarray(intensity, dtype="<f4")
    if ambient_sh is None:
        return d.tobytes() + i.tobytes() + struct.pack("<I", 0)
    amb = np.asarray(ambient_sh, dtype="<f4")
    if amb.ndim != 2 or amb.shape[0] != 3:
        raise ValueError("ambient SH must be (3, bands)")
    return d.tobytes() + i.tobytes() + struct.pack("<I", amb.shape[1]) + amb.tobytes()


def decode_light_state(payload: bytes):
    if len(payload) < 28:
        raise ProtocolError("light state payload too short")
    # hostile bytes can hold signaling NaNs that warn when widened; the
    # caller's finite check is the real gate
    with np.errstate(invalid="ignore"):
        d = np.frombuffer(payload, "<f4", count=3, offset=0).astype(np.float64)
        i = np.frombuffer(payload, "<f4", count=3, offset=12).astype(np.float64)
        (bands,) = struct.unpack_from("<I", payload, 24)
        if bands == 0:
            return d, i, None
        need = 28 + 12 * bands
        if len(payload) < need:
            raise ProtocolError("light state ambient block truncated")
        amb = np.frombuffer(payload, "<f4", count=3 * bands, offset=28).reshape(3, bands)
        return d, i, amb.astype(np.float64)


# ---- CameraPose (0x09, client -> server) ----


def encode_camera_pose(pose: Pose, intr: CameraIntrinsics) -> bytes:
    return (np.asarray(pose.as_array(), dtype="<f4").tobytes()
            + struct.pack("<IIfff", intr.width, intr.height, intr.fov_y, intr.near, intr.far))


def decode_camera_pose(payload: bytes) -> tuple[Pose, CameraIntrinsics]:
    if len(payload) != 28 + 20:
        raise ProtocolError("camera pose payload must be 48 bytes")
    with np.errstate(invalid="ignore"):
        arr = np.frombuffer(payload, "<f4", count=7).astype(np.float64)
    if not np.isfinite(arr).all() or np.linalg.norm(arr[3:7]) < 1e-6:
        raise ProtocolError("camera pose values out of range")
    w, h, fov_y, near, far = struct.unpack_from("<IIfff", payload, 28)
    try:
        intr = CameraIntrinsics(width=int(w), height=int(h), fov_y=float(fov_y),
                                near=float(near), far=float(far))
        pose = Pose.from_array(arr)
    except (ValueError, ZeroDivisionError) as e:
        raise ProtocolError(f"invalid camera pose: {e}") from None
    return pose, intr


# ---- GaussianIdOrdering (0x07): mutation records ----

_KIND_PERMUTE = 0
_KIND_APPEND = 1
_KIND_PRUNE = 2


def _encode_permutation(perm: np.ndarray) -> bytes:
    """Offsets from the identity, zigzagged and deflated. Compactions move a
    handful of rows, so the offsets are mostly zero and pack very small."""
    off = perm.astype(np.int64) - np.arange(perm.size, dtype=np.int64)
    zz = ((off << 1) ^ (off >> 63)).astype(np.uint64)
    return compress_block(encode_varints(zz), COMPRESSION_ZLIB)


def _decode_permutation(blob: bytes, n: int) -> np.ndarray:
    raw = decompress_block(blob, COMPRESSION_ZLIB, max_size=10 * n)
    try:
        zz, end = decode_varints(raw, 0, n)
    except ValueError as e:
        raise ProtocolError(str(e)) from None
    if end != len(raw):
        raise ProtocolError("permutation block has trailing bytes")
    zz = zz.astype(np.int64)
    if (zz < 0).any():
        raise ProtocolError("permutation offset out of range")
    off = (zz >> 1) ^ -(zz & 1)
    return off + np.arange(n, dtype=np.int64)


def encode_ordering(records: Sequence[MutationRecord]) -> bytes:
    out = [struct.pack("<I", len(records))]
    for rec in records:
        if isinstance(rec, PermuteRecord):
            perm = np.asarray(rec.permutation, dtype=np.int64)
            blob = _encode_permutation(perm)
            out.append(struct.pack("<BIII", _KIND_PERMUTE, perm.size,
                                   rec.new_active_count, len(blob)))
            out.append(blob)
        elif isinstance(rec, AppendRecord):
            oids = np.asarray(rec.object_ids, dtype=np.int64)
            out.append(struct.pack("<BIII", _KIND_APPEND, rec.insert_at, rec.count,
                                   rec.new_active_count))
            out.append(encode_varints(oids))
        elif isinstance(rec, PruneRecord):
            idx = np.asarray(rec.indices, dtype="<u4")
            out.append(struct.pack("<BII", _KIND_PRUNE, idx.size, rec.new_active_count))
            out.append(idx.tobytes())
        else:
            raise TypeError(f"unknown record {type(rec)}")
    return b"".join(out)


def decode_ordering(payload: bytes) -> list[MutationRecord]:
    if len(payload) < 4:
        raise ProtocolError("ordering payload too short")
    (count,) = struct.unpack_from("<I", payload, 0)
    off = 4
    records: list[MutationRecord] = []
    for _ in range(count):
        if off >= len(payload):
            raise ProtocolError("ordering payload truncated")
        kind = payload[off]
        off += 1
        if kind == _KIND_PERMUTE:
            if len(payload) < off + 12:
                raise ProtocolError("permute record truncated")
            n, new_active, blen = struct.unpack_from("<III", payload, off)
            off += 12
            if n > MAX_ROWS:
                raise ProtocolError("permutation unreasonably large")
            if len(payload) < off + blen:
                raise ProtocolError("permutation truncated")
            perm = _decode_permutation(payload[off:off + blen], int(n))
            off += blen
            records.append(PermuteRecord(permutation=perm, new_active_count=int(new_active)))
        elif kind == _KIND_APPEND:
            insert_at, cnt, new_active = struct.unpack_from("<III", payload, off)
            off += 12
            try:
                oids, off = decode_varints(payload, off, cnt)
            except ValueError as e:
                raise ProtocolError(str(e)) from None
            records.append(AppendRecord(insert_at=int(insert_at), count=int(cnt),
                                        object_ids=oids.astype(np.int32),
                                        new_active_count=int(new_active)))
        elif kind == _KIND_PRUNE:
            n, new_active = struct.unpack_from("<II", payload, off)
            off += 8
            if len(payload) < off + 4 * n:
                raise ProtocolError("prune indices truncated")
            idx = np.frombuffer(payload, "<u4", count=n, offset=off).astype(np.int64)
            off += 4 * n
            records.append(PruneRecord(indices=idx, new_active_count=int(new_active)))
        else:
            raise ProtocolError(f"unknown ordering record kind {kind}")
    return records


# ---- TensorMetadata (0x04): layout descriptor for validation ----


@dataclass
class TensorMetadata:
    count: int
    active_count: int
    sh_degree: int
    attributes: list  # (AttributeId, dims) pairs in schedule order


def encode_tensor_metadata(meta: TensorMetadata) -> bytes:
    out = [struct.pack("<IIBB", meta.count, meta.active_count, meta.sh_degree,
                       len(meta.attributes))]
    for attr, dims in meta.attributes:
        out.append(struct.pack("<BB", int(attr), dims))
    return b"".join(out)


def decode_tensor_metadata(payload: bytes) -> TensorMetadata:
    if len(payload) < 10:
        raise ProtocolError("metadata payload too short")
    count, active, degree, n_attrs = struct.unpack_from("<IIBB", payload, 0)
    off = 10
    attrs = []
    if len(payload) < off + 2 * n_attrs:
        raise ProtocolError("metadata attribute list truncated")
    for _ in range(n_attrs):
        a, dims = struct.unpack_from("<BB", payload, off)
        off += 2
        try:
            attrs.append((AttributeId(a), int(dims)))
        except ValueError:
            raise ProtocolError(f"unknown attribute id {a}") from None
    return TensorMetadata(count=int(count), active_count=int(active),
                          sh_degree=int(degree), attributes=attrs)
