"""Uniform quantizers, sub-byte bit packing, and LEB128 varints."""

from __future__ import annotations

import numpy as np


def quantize_uniform(values: np.ndarray, lo, hi, bits: int) -> np.ndarray:
    """Map floats in [lo, hi] to integer codes 0..2^bits-1 (out-of-range values
    are clamped). lo/hi broadcast, so per-axis ranges work directly."""
    v = np.asarray(values, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    levels = (1 << bits) - 1
    span = np.where(hi > lo, hi - lo, 1.0)
    t = np.clip((np.clip(v, lo, hi) - lo) / span, 0.0, 1.0)
    return np.rint(t * levels).astype(np.uint32)


def dequantize_uniform(codes: np.ndarray, lo, hi, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + (np.asarray(codes, dtype=np.float64) / levels) * (hi - lo)


def quantizer_step(lo, hi, bits: int):
    return (np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)) / ((1 << bits) - 1)


def pack_bits(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes of `bits` bits each, LSB-first within the stream."""
    v = np.asarray(codes, dtype=np.uint64).reshape(-1)
    if v.size == 0:
        return b""
    shifts = np.arange(bits, dtype=np.uint64)
    bitstream = ((v[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bitstream, bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint32)
    need = (count * bits + 7) // 8
    if len(data) < need:
        raise ValueError("bit-packed block shorter than declared count")
    raw = np.frombuffer(data[:need], dtype=np.uint8)
    bitstream = np.unpackbits(raw, bitorder="little")[: count * bits]
    shifts = np.arange(bits, dtype=np.uint64)
    vals = (bitstream.reshape(count, bits).astype(np.uint64) << shifts).sum(axis=1)
    return vals.astype(np.uint32)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def encode_varints(values) -> bytes:
    """Unsigned LEB128, concatenated."""
    out = bytearray()
    for n in np.asarray(values, dtype=np.uint64).reshape(-1):
        n = int(n)
        while True:
            b = n & 0x7F
            n >>= 7
            if n:
                out.append(b | 0x80)
            else:
                out.append(b)
                break
    return bytes(out)


def decode_varints(data: bytes, offset: int, count: int) -> tuple[np.ndarray, int]:
    """Read `count` varints starting at `offset`; returns (values, new offset)."""
    # each varint takes >= 1 byte, so a count beyond the remaining bytes is
    # already truncated; checking first keeps declared-huge counts from
    # allocating anything
    if count < 0 or count > len(data) - offset:
        raise ValueError("truncated varint")
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        val = 0
        shift = 0
        while True:
            if offset >= len(data):
                raise ValueError("truncated varint")
            b = data[offset]
            offset += 1
            val |= (b & 0x7F) << shift
            if not b & 0x80:
                break
            shift += 7
            if shift > 63:
                raise ValueError("varint too long")
        out[i] = val
    return out, offset
