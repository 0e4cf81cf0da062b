"""Per-attribute tensor deltas.

Means and log scales are residual-coded against the last transmitted state:
rows whose residual max-norm clears the gating threshold are sent, as a
sparse (varint index gaps) or dense payload depending on how many survive,
and both peers advance their baseline by the same dequantized residual so the
mirrors stay bit-identical. Every other attribute is an absolute requantized
copy of the full tensor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import AppendRecord, GaussianModel, MutationRecord, PermuteRecord, PruneRecord
from .framing import MAX_ROWS, AttributeId, ProtocolError
from .profiles import (
    ATTRIBUTE_QUANTIZERS,
    COMPRESSION_ZLIB,
    RESIDUAL_ATTRIBUTES,
    compress_block,
    decompress_block,
)
from .quantize import (
    decode_varints,
    dequantize_uniform,
    encode_varints,
    pack_bits,
    packed_size,
    quantize_uniform,
    unpack_bits,
)

MODE_DENSE_RESIDUAL = 0
MODE_SPARSE_RESIDUAL = 1
MODE_DENSE_ABSOLUTE = 2

_HEAD = struct.Struct("<BBBBI")  # attribute_id, mode, compression_id, dims, count

DEFAULT_GATING = {AttributeId.MEANS: 1e-3, AttributeId.LOG_SCALES: 1e-3}


def _codes_to_bytes(codes: np.ndarray, bits: int) -> bytes:
    if bits == 16:
        return codes.astype("<u2").tobytes()
    if bits == 8:
        return codes.astype("<u1").tobytes()
    return pack_bits(codes, bits)


def _codes_from_bytes(data: bytes, bits: int, count: int) -> np.ndarray:
    if bits == 16:
        need = 2 * count
        if len(data) < need:
            raise ProtocolError("delta codes truncated")
        return np.frombuffer(data[:need], "<u2").astype(np.uint32)
    if bits == 8:
        if len(data) < count:
            raise ProtocolError("delta codes truncated")
        return np.frombuffer(data[:count], "<u1").astype(np.uint32)
    try:
        return unpack_bits(data, bits, count)
    except ValueError as e:
        raise ProtocolError(str(e)) from None


def encode_delta(attribute_id: AttributeId, current: np.ndarray,
                 baseline: Optional[np.ndarray] = None,
                 gating_threshold: Optional[float] = None,
                 compression_id: int = COMPRESSION_ZLIB):
    """Encode one attribute tensor. Returns (payload, updated baseline).

    `current` covers the active rows; residual attributes require `baseline`
    of the same shape. The returned baseline is what the receiver will hold
    after applying this payload (None for absolute attributes).
    """
    attribute_id = AttributeId(attribute_id)
    cur = np.asarray(current, dtype=np.float64)
    rows = cur.shape[0]
    dims = int(np.prod(cur.shape[1:], dtype=np.int64)) if cur.ndim > 1 else 1
    flat = cur.reshape(rows, dims)
    bits = ATTRIBUTE_QUANTIZERS[attribute_id][0]

    if attribute_id in RESIDUAL_ATTRIBUTES:
        if baseline is None:
            raise ValueError(f"{attribute_id.name} is residual-coded and needs a baseline")
        base = np.asarray(baseline, dtype=np.float64).reshape(rows, dims)
        if base.shape != flat.shape:
            raise ValueError("baseline shape mismatch")
        r = flat - base
        if gating_threshold is None:
            gating_threshold = DEFAULT_GATING[attribute_id]
        keep = np.max(np.abs(r), axis=1) >= gating_threshold
        k = int(keep.sum())
        new_base = base.copy()
        if k < rows * 0.5:
            idx = np.nonzero(keep)[0]
            sent = r[idx]
            # the range rides the header as f32; quantize with the rounded
            # value or the receiver reconstructs on a different grid
            m = float(np.float32(np.max(np.abs(sent)))) if k else 0.0
            codes = quantize_uniform(sent, -m, m, bits)
            deq = dequantize_uniform(codes, -m, m, bits)
            new_base[idx] += deq
            gaps = (np.diff(idx, prepend=-1) - 1) if k else np.zeros(0, np.int64)
            block = encode_varints(gaps) + _codes_to_bytes(codes, bits)
            mode = MODE_SPARSE_RESIDUAL
            head_extra = struct.pack("<ffI", -m, m, k)
        else:
            m = float(np.float32(np.max(np.abs(r)))) if rows else 0.0
            codes = quantize_uniform(r, -m, m, bits)
            deq = dequantize_uniform(codes, -m, m, bits)
            new_base += deq
            block = _codes_to_bytes(codes, bits)
            mode = MODE_DENSE_RESIDUAL
            head_extra = struct.pack("<ff", -m, m)
        out_base = new_base.reshape(np.asarray(baseline).shape).astype(np.float32)
    else:
        bits, qlo, qhi = ATTRIBUTE_QUANTIZERS[attribute_id]
        if attribute_id == AttributeId.LIGHT_VISIBILITY:
            codes = (flat >= 0.5).astype(np.uint32)
        else:
            codes = quantize_uniform(flat, qlo, qhi, bits)
        block = _codes_to_bytes(codes, bits)
        mode = MODE_DENSE_ABSOLUTE
        head_extra = b""
        out_base = None

    packed = compress_block(block, compression_id)
    payload = (_HEAD.pack(attribute_id, mode, compression_id, dims, rows)
               + head_extra + struct.pack("<I", len(packed)) + packed)
    return payload, out_base


@dataclass
class DeltaUpdate:
    attribute_id: AttributeId
    mode: int
    count: int
    dims: int
    indices: Optional[np.ndarray]  # sparse row indices, None otherwise
    values: np.ndarray  # dequantized (rows, dims) float64


def decode_delta(payload: bytes) -> DeltaUpdate:
    if len(payload) < _HEAD.size:
        raise ProtocolError("delta payload too short")
    attr, mode, compression_id, dims, count = _HEAD.unpack_from(payload, 0)
    try:
        attr = AttributeId(attr)
    except ValueError:
        raise ProtocolError(f"unknown attribute id {attr}") from None
    if count > MAX_ROWS:
        raise ProtocolError(f"delta declares {count} rows")
    off = _HEAD.size
    bits = ATTRIBUTE_QUANTIZERS[attr][0]

    if mode in (MODE_DENSE_RESIDUAL, MODE_SPARSE_RESIDUAL):
        if attr not in RESIDUAL_ATTRIBUTES:
            raise ProtocolError(f"{attr.name} cannot be residual-coded")
        lo, hi = struct.unpack_from("<ff", payload, off)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ProtocolError("residual range is not finite")
        off += 8
        k = count
        if mode == MODE_SPARSE_RESIDUAL:
            (k,) = struct.unpack_from("<I", payload, off)
            if k > count:
                raise ProtocolError(f"sparse delta touches {k} of {count} rows")
            off += 4
        (blen,) = struct.unpack_from("<I", payload, off)
        off += 4
        block = decompress_block(payload[off:off + blen], compression_id,
                                 max_size=5 * k + packed_size(k * dims, bits))
        if mode == MODE_SPARSE_RESIDUAL:
            gaps, boff = decode_varints(block, 0, k)
            idx = np.cumsum(gaps.astype(np.int64) + 1) - 1
            if k and idx[-1] >= count:
                raise ProtocolError("sparse delta index out of range")
            codes = _codes_from_bytes(block[boff:], bits, k * dims).reshape(k, dims)
            vals = dequantize_uniform(codes, lo, hi, bits)
            return DeltaUpdate(attr, mode, count, dims, idx, vals)
        codes = _codes_from_bytes(block, bits, count * dims).reshape(count, dims)
        vals = dequantize_uniform(codes, lo, hi, bits)
        return DeltaUpdate(attr, mode, count, dims, None, vals)

    if mode == MODE_DENSE_ABSOLUTE:
        (blen,) = struct.unpack_from("<I", payload, off)
        off += 4
        block = decompress_block(payload[off:off + blen], compression_id,
                                 max_size=packed_size(count * dims, bits))
        codes = _codes_from_bytes(block, bits, count * dims).reshape(count, dims)
        if attr == AttributeId.LIGHT_VISIBILITY:
            vals = codes.astype(np.float64)
        else:
            _, qlo, qhi = ATTRIBUTE_QUANTIZERS[attr]
            vals = dequantize_uniform(codes, qlo, qhi, bits)
        return DeltaUpdate(attr, mode, count, dims, None, vals)

    raise ProtocolError(f"unknown delta mode {mode}")


@dataclass
class DeltaBaselines:
    """Client/server mirror of the last transmitted residual-coded values.

    Arrays span all rows (frozen included); deltas touch the active prefix.
    Fresh appended rows start at zero on both sides, so the first residual
    that covers them carries their full value.
    """

    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    epoch: int = 0

    def reset_from_model(self, model: GaussianModel, epoch: int):
        self.means = model.means.astype(np.float32).copy()
        self.log_scales = model.log_scales.astype(np.float32).copy()
        self.epoch = epoch

    def array_for(self, attribute_id: AttributeId) -> np.ndarray:
        if attribute_id == AttributeId.MEANS:
            return self.means
        if attribute_id == AttributeId.LOG_SCALES:
            return self.log_scales
        raise KeyError(attribute_id)

    def set_array(self, attribute_id: AttributeId, values: np.ndarray):
        if attribute_id == AttributeId.MEANS:
            self.means = values
        elif attribute_id == AttributeId.LOG_SCALES:
            self.log_scales = values
        else:
            raise KeyError(attribute_id)

    def apply_record(self, record: MutationRecord):
        """Mirror a row mutation so delta indices keep lining up."""
        for name in ("means", "log_scales"):
            arr = getattr(self, name)
            if isinstance(record, PermuteRecord):
                arr = arr[record.permutation].copy()
            elif isinstance(record, AppendRecord):
                pad = np.zeros((record.count,) + arr.shape[1:], arr.dtype)
                arr = np.concatenate([arr[:record.insert_at], pad, arr[record.insert_at:]])
            elif isinstance(record, PruneRecord):
                keep = np.ones(arr.shape[0], dtype=bool)
                keep[record.indices] = False
                arr = arr[keep].copy()
            else:
                raise TypeError(f"unknown record {type(record)}")
            setattr(self, name, arr)


def advance_baseline(baseline_rows: np.ndarray, indices, values: np.ndarray) -> None:
    """Shared increment rule: float64 add, float32 store, identical on both
    peers so the mirrors never drift."""
    flat = baseline_rows.reshape(baseline_rows.shape[0], -1)
    if indices is None:
        flat[:] = (flat.astype(np.float64) + values).astype(np.float32)
    else:
        flat[indices] = (flat[indices].astype(np.float64) + values).astype(np.float32)


def apply_delta(model: GaussianModel, baselines: DeltaBaselines, payload: bytes,
                frame_epoch: int, current_epoch: int) -> bool:
    """Apply one delta payload to a replica. Returns False (untouched model)
    when the epoch does not match the replica's current epoch."""
    if frame_epoch != current_epoch:
        return False
    upd = decode_delta(payload)
    a = model.active_count
    if upd.count != a:
        raise ProtocolError(f"delta covers {upd.count} rows, active is {a}")

    if upd.attribute_id in RESIDUAL_ATTRIBUTES:
        base = baselines.array_for(upd.attribute_id)
        advance_baseline(base[:a], upd.indices, upd.values)
        target = model.attribute(upd.attribute_id.name.lower())
        target[:a] = base[:a]
        return True

    vals32 = upd.values.astype(np.float32)
    if upd.attribute_id == AttributeId.QUATERNIONS:
        model.quaternions[:a] = vals32.reshape(a, 4)
    elif upd.attribute_id == AttributeId.LOGIT_OPACITIES:
        model.logit_opacities[:a] = vals32.reshape(a)
    elif upd.attribute_id == AttributeId.SH_DC:
        model.sh_coeffs[:a, :, 0] = vals32.reshape(a, 3)
    elif upd.attribute_id == AttributeId.SH_REST:
        B = model.sh_coeffs.shape[2]
        if upd.dims != 3 * (B - 1):
            raise ProtocolError("sh_rest dims mismatch")
        model.sh_coeffs[:a, :, 1:] = vals32.reshape(a, 3, B - 1)
    elif upd.attribute_id == AttributeId.LIGHT_VISIBILITY:
        model.light_visibility[:a] = vals32.reshape(a)
    else:
        raise ProtocolError(f"absolute mode not defined for {upd.attribute_id.name}")
    return True
