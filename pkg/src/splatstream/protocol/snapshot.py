"""Full-model snapshot codec.

The quantized profile packs each attribute with the fixed ranges from
profiles.py (means use the model's own axis-aligned bounding box, stored in
the header); the lossless profile writes float32 verbatim and is bit-exact.
Either way every attribute section lands in one block that runs through the
recorded lossless compression stage.
"""

from __future__ import annotations

import struct

import numpy as np

from ..model import GaussianModel, num_sh_bases
from .framing import MAX_ROWS, AttributeId, ProtocolError
from .profiles import (
    ATTRIBUTE_QUANTIZERS,
    COMPRESSION_NONE,
    COMPRESSION_ZLIB,
    PROFILE_DEFAULT,
    PROFILE_LOSSLESS,
    QuantizationProfile,
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

_HEAD = struct.Struct("<IIBBBB6f")  # count, active, degree, profile, compression, reserved, aabb


def _means_aabb(means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if means.shape[0] == 0:
        return np.zeros(3), np.zeros(3)
    return means.min(axis=0).astype(np.float64), means.max(axis=0).astype(np.float64)


def encode_snapshot(model: GaussianModel, profile: QuantizationProfile = PROFILE_DEFAULT) -> bytes:
    n = model.count
    B = num_sh_bases(model.sh_degree)
    lo, hi = _means_aabb(model.means)
    parts = []
    if profile.profile_id == PROFILE_LOSSLESS.profile_id:
        parts.append(model.means.astype("<f4").tobytes())
        parts.append(model.log_scales.astype("<f4").tobytes())
        parts.append(model.quaternions.astype("<f4").tobytes())
        parts.append(model.logit_opacities.astype("<f4").tobytes())
        parts.append(model.sh_coeffs.astype("<f4").tobytes())
        parts.append(model.light_visibility.astype("<f4").tobytes())
        parts.append(model.object_ids.astype("<i4").tobytes())
    elif profile.profile_id == PROFILE_DEFAULT.profile_id:
        bits_m = ATTRIBUTE_QUANTIZERS[AttributeId.MEANS][0]
        parts.append(quantize_uniform(model.means, lo, hi, bits_m).astype("<u2").tobytes())
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.LOG_SCALES]
        parts.append(quantize_uniform(model.log_scales, qlo, qhi, b).astype("<u1").tobytes())
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.QUATERNIONS]
        parts.append(pack_bits(quantize_uniform(model.quaternions, qlo, qhi, b), b))
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.LOGIT_OPACITIES]
        parts.append(quantize_uniform(model.logit_opacities, qlo, qhi, b).astype("<u1").tobytes())
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.SH_DC]
        parts.append(quantize_uniform(model.sh_coeffs[:, :, 0], qlo, qhi, b).astype("<u1").tobytes())
        if B > 1:
            b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.SH_REST]
            parts.append(quantize_uniform(model.sh_coeffs[:, :, 1:], qlo, qhi, b).astype("<u1").tobytes())
        parts.append(pack_bits((model.light_visibility >= 0.5).astype(np.uint32), 1))
        parts.append(encode_varints(model.object_ids.astype(np.int64)))
    else:
        raise ProtocolError(f"unknown profile id {profile.profile_id}")

    block = compress_block(b"".join(parts), profile.compression_id)
    head = _HEAD.pack(n, model.active_count, model.sh_degree, profile.profile_id,
                      profile.compression_id, 0, *lo.astype(np.float32), *hi.astype(np.float32))
    return head + struct.pack("<I", len(block)) + block


def decode_snapshot(payload: bytes) -> tuple[GaussianModel, dict]:
    """Rebuild a full model. Returns (model, header info); the caller resets
    its delta baselines and epoch."""
    if len(payload) < _HEAD.size + 4:
        raise ProtocolError("snapshot payload too short")
    n, active, degree, profile_id, compression_id, _, *aabb = _HEAD.unpack_from(payload, 0)
    (block_len,) = struct.unpack_from("<I", payload, _HEAD.size)
    start = _HEAD.size + 4
    if len(payload) < start + block_len:
        raise ProtocolError("snapshot block truncated")
    if not 0 <= active <= n:
        raise ProtocolError(f"active count {active} exceeds row count {n}")
    if degree > 3:
        raise ProtocolError(f"unsupported sh degree {degree}")
    if n > MAX_ROWS:
        raise ProtocolError(f"snapshot declares {n} rows")
    B = num_sh_bases(degree)
    # bound the decompressed size by what the declared row count can need
    if profile_id == PROFILE_LOSSLESS.profile_id:
        expected = (52 + 12 * B) * n
    elif profile_id == PROFILE_DEFAULT.profile_id:
        qbits = ATTRIBUTE_QUANTIZERS[AttributeId.QUATERNIONS][0]
        expected = ((13 + 3 * (B - 1)) * n + packed_size(4 * n, qbits)
                    + packed_size(n, 1) + 5 * n)
    else:
        raise ProtocolError(f"unknown profile id {profile_id}")
    data = decompress_block(payload[start:start + block_len], compression_id,
                            max_size=expected)
    lo = np.asarray(aabb[:3], dtype=np.float64)
    hi = np.asarray(aabb[3:], dtype=np.float64)
    if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
        raise ProtocolError("snapshot bounds are not finite")

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(data):
            raise ProtocolError(f"snapshot {what} section truncated")
        out = data[off:off + nbytes]
        off += nbytes
        return out

    off = 0
    if profile_id == PROFILE_LOSSLESS.profile_id:
        means = np.frombuffer(take(12 * n, "means"), "<f4").reshape(n, 3).copy()
        log_scales = np.frombuffer(take(12 * n, "log_scales"), "<f4").reshape(n, 3).copy()
        quats = np.frombuffer(take(16 * n, "quaternions"), "<f4").reshape(n, 4).copy()
        logits = np.frombuffer(take(4 * n, "opacities"), "<f4").copy()
        sh = np.frombuffer(take(12 * B * n, "sh"), "<f4").reshape(n, 3, B).copy()
        vis = np.frombuffer(take(4 * n, "visibility"), "<f4").copy()
        oids = np.frombuffer(take(4 * n, "object_ids"), "<i4").copy()
    elif profile_id == PROFILE_DEFAULT.profile_id:
        bits_m = ATTRIBUTE_QUANTIZERS[AttributeId.MEANS][0]
        codes = np.frombuffer(take(6 * n, "means"), "<u2").reshape(n, 3)
        means = dequantize_uniform(codes, lo, hi, bits_m).astype(np.float32)
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.LOG_SCALES]
        codes = np.frombuffer(take(3 * n, "log_scales"), "<u1").reshape(n, 3)
        log_scales = dequantize_uniform(codes, qlo, qhi, b).astype(np.float32)
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.QUATERNIONS]
        codes = unpack_bits(take(packed_size(4 * n, b), "quaternions"), b, 4 * n).reshape(n, 4)
        quats = dequantize_uniform(codes, qlo, qhi, b).astype(np.float32)
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.LOGIT_OPACITIES]
        logits = dequantize_uniform(np.frombuffer(take(n, "opacities"), "<u1"), qlo, qhi, b).astype(np.float32)
        sh = np.zeros((n, 3, B), np.float32)
        b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.SH_DC]
        codes = np.frombuffer(take(3 * n, "sh_dc"), "<u1").reshape(n, 3)
        sh[:, :, 0] = dequantize_uniform(codes, qlo, qhi, b)
        if B > 1:
            b, qlo, qhi = ATTRIBUTE_QUANTIZERS[AttributeId.SH_REST]
            codes = np.frombuffer(take(3 * (B - 1) * n, "sh_rest"), "<u1").reshape(n, 3, B - 1)
            sh[:, :, 1:] = dequantize_uniform(codes, qlo, qhi, b)
        vis = unpack_bits(take(packed_size(n, 1), "visibility"), 1, n).astype(np.float32)
        oids64, off = decode_varints(data, off, n)
        oids = oids64.astype(np.int32)
    else:
        raise ProtocolError(f"unknown profile id {profile_id}")

    model = GaussianModel(
        means=means, log_scales=log_scales, quaternions=quats, logit_opacities=logits,
        sh_coeffs=sh, light_visibility=vis, object_ids=oids,
        active_count=int(active), sh_degree=int(degree),
    )
    info = {"profile_id": profile_id, "compression_id": compression_id,
            "aabb_lo": lo, "aabb_hi": hi}
    return model, info
