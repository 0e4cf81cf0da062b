"""Quantization profiles, per-attribute quantizer parameters, and the
lossless compression stage shared by the snapshot and delta codecs."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

from .framing import AttributeId, ProtocolError

COMPRESSION_NONE = 0
COMPRESSION_ZLIB = 1


@dataclass(frozen=True)
class QuantizationProfile:
    profile_id: int  # 0 = quantized, 1 = lossless float32 passthrough
    compression_id: int = COMPRESSION_ZLIB


PROFILE_DEFAULT = QuantizationProfile(0)
PROFILE_LOSSLESS = QuantizationProfile(1)


# attribute id -> (bits, lo, hi); means use the per-snapshot AABB instead of
# a fixed range, and residual payloads embed their own symmetric range
ATTRIBUTE_QUANTIZERS = {
    AttributeId.MEANS: (16, None, None),
    AttributeId.LOG_SCALES: (8, -10.0, 2.0),
    AttributeId.QUATERNIONS: (10, -1.0, 1.0),
    AttributeId.LOGIT_OPACITIES: (8, -8.0, 8.0),
    AttributeId.SH_DC: (8, -4.0, 4.0),
    AttributeId.SH_REST: (8, -1.0, 1.0),
    AttributeId.LIGHT_VISIBILITY: (1, 0.0, 1.0),
}

RESIDUAL_ATTRIBUTES = frozenset({AttributeId.MEANS, AttributeId.LOG_SCALES})


def compress_block(data: bytes, compression_id: int) -> bytes:
    if compression_id == COMPRESSION_NONE:
        return data
    if compression_id == COMPRESSION_ZLIB:
        return zlib.compress(data, level=6)
    raise ProtocolError(f"unknown compression id {compression_id}")


def decompress_block(data: bytes, compression_id: int,
                     max_size: Optional[int] = None) -> bytes:
    """`max_size` bounds the decompressed output so a corrupt or hostile
    block cannot balloon memory; exceeding it is a protocol error."""
    if compression_id == COMPRESSION_NONE:
        if max_size is not None and len(data) > max_size:
            raise ProtocolError("block larger than its declared contents")
        return data
    if compression_id == COMPRESSION_ZLIB:
        try:
            if max_size is None:
                return zlib.decompress(data)
            d = zlib.decompressobj()
            out = d.decompress(data, max_size + 1)
        except zlib.error as e:
            raise ProtocolError(f"corrupt compressed block: {e}") from None
        if len(out) > max_size or d.unconsumed_tail:
            raise ProtocolError("block larger than its declared contents")
        return out
    raise ProtocolError(f"unknown compression id {compression_id}")
