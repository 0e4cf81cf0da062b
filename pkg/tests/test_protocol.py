"""Wire format: framing, quantizers, snapshot and delta codecs, packets."""

import struct
import zlib

import numpy as np
import pytest

from splatstream.geometry import CameraIntrinsics, Pose, quat_normalize
from splatstream.model import (
    AppendRecord,
    GaussianBatch,
    GaussianModel,
    PermuteRecord,
    PruneRecord,
    append_gaussians,
    freeze_range,
    prune_rows,
)
from splatstream.metrics import psnr
from splatstream.protocol import (
    ATTRIBUTE_QUANTIZERS,
    COMPRESSION_NONE,
    COMPRESSION_ZLIB,
    MAGIC,
    PROFILE_DEFAULT,
    PROFILE_LOSSLESS,
    AttributeId,
    DeltaBaselines,
    FrameParser,
    PacketType,
    ProtocolError,
    QuantizationProfile,
    apply_delta,
    decode_camera_pose,
    decode_delta,
    decode_light_state,
    decode_light_visibility,
    decode_object_id_map,
    decode_object_transforms,
    decode_ordering,
    decode_snapshot,
    decode_tensor_metadata,
    decode_varints,
    dequantize_uniform,
    encode_camera_pose,
    encode_delta,
    encode_light_state,
    encode_light_visibility,
    encode_object_id_map,
    encode_object_transforms,
    encode_ordering,
    encode_snapshot,
    encode_tensor_metadata,
    encode_varints,
    frame_bytes,
    pack_bits,
    parse_frame,
    quantize_uniform,
    unpack_bits,
)
from splatstream.protocol.packets import TensorMetadata
from splatstream.protocol.quantize import quantizer_step
from splatstream.render import LightState, flat_ambient_sh, render


def random_model32(rng, n=50, degree=1, frozen=0):
    B = (degree + 1) ** 2
    return GaussianModel(
        means=rng.uniform(-3, 3, (n, 3)).astype(np.float32),
        log_scales=rng.uniform(-3.5, -1.5, (n, 3)).astype(np.float32),
        quaternions=quat_normalize(rng.normal(size=(n, 4))).astype(np.float32),
        logit_opacities=rng.uniform(-2, 3, n).astype(np.float32),
        sh_coeffs=np.concatenate(
            [rng.uniform(-0.5, 0.5, (n, 3, 1)), rng.uniform(-0.1, 0.1, (n, 3, B - 1))], axis=2
        ).astype(np.float32) if B > 1 else rng.uniform(-0.5, 0.5, (n, 3, 1)).astype(np.float32),
        light_visibility=(rng.random(n) > 0.4).astype(np.float32),
        object_ids=rng.integers(0, 4, n).astype(np.int32),
        active_count=n - frozen,
        sh_degree=degree,
    )


# ---- framing ----


def test_frame_round_trip():
    payload = b"hello splat"
    buf = frame_bytes(PacketType.LIGHT_STATE, 7, payload)
    frame, off = parse_frame(buf)
    assert off == len(buf)
    assert frame.ptype == PacketType.LIGHT_STATE
    assert frame.epoch == 7
    assert frame.payload == payload


def test_frame_parser_incremental():
    frames_in = [frame_bytes(PacketType.TENSOR_DELTA, i, bytes([i]) * (i * 7 % 40)) for i in range(12)]
    stream = b"".join(frames_in)
    parser = FrameParser()
    got = []
    for i in range(0, len(stream), 13):  # awkward chunk size on purpose
        parser.feed(stream[i:i + 13])
        got.extend(parser.frames())
    assert [f.epoch for f in got] == list(range(12))
    assert parser.pending_bytes == 0


def test_frame_bad_magic_rejected():
    buf = b"XX" + frame_bytes(PacketType.LIGHT_STATE, 0, b"")[2:]
    with pytest.raises(ProtocolError, match="magic"):
        parse_frame(buf)


def test_frame_crc_corruption_rejected():
    buf = bytearray(frame_bytes(PacketType.LIGHT_STATE, 0, b"abcdef"))
    buf[12] ^= 0xFF  # flip a payload byte
    with pytest.raises(ProtocolError, match="crc"):
        parse_frame(bytes(buf))


def test_frame_unknown_type_rejected():
    body = struct.pack("<BII", 0x7F, 0, 0)
    buf = MAGIC + body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(ProtocolError, match="unknown packet type"):
        parse_frame(buf)


def test_frame_oversize_length_rejected():
    body = struct.pack("<BII", 0x03, 0, 1 << 30)
    buf = MAGIC + body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(ProtocolError, match="cap"):
        parse_frame(buf)


def test_frame_partial_returns_none():
    buf = frame_bytes(PacketType.MODEL_SNAPSHOT, 1, b"x" * 100)
    frame, off = parse_frame(buf[:50])
    assert frame is None and off == 0


# ---- quantizers ----


@pytest.mark.parametrize("bits", [1, 5, 8, 10, 16])
def test_quantize_error_within_half_step(bits):
    rng = np.random.default_rng(bits)
    lo, hi = -2.5, 4.0
    x = rng.uniform(lo, hi, 500)
    deq = dequantize_uniform(quantize_uniform(x, lo, hi, bits), lo, hi, bits)
    step = quantizer_step(lo, hi, bits)
    assert np.max(np.abs(deq - x)) <= step / 2 + 1e-12


def test_quantize_clamps_out_of_range():
    deq = dequantize_uniform(quantize_uniform(np.array([-99.0, 99.0]), -1, 1, 8), -1, 1, 8)
    np.testing.assert_allclose(deq, [-1.0, 1.0])


@pytest.mark.parametrize("bits", [1, 5, 10, 16])
def test_pack_bits_round_trip(bits):
    rng = np.random.default_rng(bits + 100)
    vals = rng.integers(0, 1 << bits, 333).astype(np.uint32)
    packed = pack_bits(vals, bits)
    assert len(packed) == (333 * bits + 7) // 8
    np.testing.assert_array_equal(unpack_bits(packed, bits, 333), vals)


def test_varint_round_trip():
    vals = np.array([0, 1, 127, 128, 300, 2**21, 2**35], dtype=np.uint64)
    data = encode_varints(vals)
    out, off = decode_varints(data, 0, len(vals))
    assert off == len(data)
    np.testing.assert_array_equal(out, vals)


def test_varint_truncated_raises():
    with pytest.raises(ValueError):
        decode_varints(b"\x80\x80", 0, 1)


# ---- snapshot ----


def test_snapshot_means_within_quantizer_bound():
    rng = np.random.default_rng(0)
    model = random_model32(rng, n=200)
    decoded, info = decode_snapshot(encode_snapshot(model))
    extent = model.means.max(axis=0) - model.means.min(axis=0)
    bound = extent / (1 << 16)
    assert np.all(np.abs(decoded.means - model.means) <= bound + 1e-7)
    assert decoded.active_count == model.active_count
    assert decoded.sh_degree == model.sh_degree
    np.testing.assert_array_equal(decoded.object_ids, model.object_ids)


def test_snapshot_all_attributes_within_one_step():
    rng = np.random.default_rng(1)
    model = random_model32(rng, n=120, degree=2)
    decoded, _ = decode_snapshot(encode_snapshot(model))
    checks = [
        (decoded.log_scales, model.log_scales, AttributeId.LOG_SCALES),
        (decoded.quaternions, model.quaternions, AttributeId.QUATERNIONS),
        (decoded.logit_opacities, model.logit_opacities, AttributeId.LOGIT_OPACITIES),
        (decoded.sh_coeffs[:, :, 0], model.sh_coeffs[:, :, 0], AttributeId.SH_DC),
        (decoded.sh_coeffs[:, :, 1:], model.sh_coeffs[:, :, 1:], AttributeId.SH_REST),
    ]
    for got, want, attr in checks:
        bits, lo, hi = ATTRIBUTE_QUANTIZERS[attr]
        step = quantizer_step(lo, hi, bits)
        assert np.max(np.abs(got.astype(np.float64) - want.astype(np.float64))) <= step, attr.name
    np.testing.assert_array_equal(decoded.light_visibility, model.light_visibility)


def test_snapshot_empty_model():
    decoded, _ = decode_snapshot(encode_snapshot(GaussianModel.empty(2)))
    assert decoded.count == 0
    assert decoded.sh_degree == 2


def test_snapshot_lossless_bit_exact():
    rng = np.random.default_rng(2)
    model = random_model32(rng, n=75, degree=3, frozen=10)
    decoded, info = decode_snapshot(encode_snapshot(model, PROFILE_LOSSLESS))
    assert info["profile_id"] == 1
    for name in ("means", "log_scales", "quaternions", "logit_opacities",
                 "sh_coeffs", "light_visibility", "object_ids"):
        np.testing.assert_array_equal(decoded.attribute(name), model.attribute(name), err_msg=name)
    assert decoded.active_count == model.active_count


def test_snapshot_compression_stage_transparent():
    rng = np.random.default_rng(3)
    model = random_model32(rng, n=64)
    a, _ = decode_snapshot(encode_snapshot(model, QuantizationProfile(0, COMPRESSION_NONE)))
    b, _ = decode_snapshot(encode_snapshot(model, QuantizationProfile(0, COMPRESSION_ZLIB)))
    for name in ("means", "log_scales", "quaternions", "logit_opacities", "sh_coeffs"):
        np.testing.assert_array_equal(a.attribute(name), b.attribute(name))


def test_snapshot_corrupt_block_rejected():
    rng = np.random.default_rng(4)
    payload = bytearray(encode_snapshot(random_model32(rng, n=16)))
    payload[-3] ^= 0xA5
    with pytest.raises(ProtocolError):
        decode_snapshot(bytes(payload))
    with pytest.raises(ProtocolError):
        decode_snapshot(payload[:20])


def test_snapshot_render_quality_1000_gaussians():
    rng = np.random.default_rng(5)
    model = random_model32(rng, n=1000)
    decoded, _ = decode_snapshot(encode_snapshot(model))
    intr = CameraIntrinsics(width=64, height=64, fov_y=np.pi / 2, near=0.1, far=100.0)
    pose = Pose(position=np.array([0.0, 0, -8.0]), quaternion=np.array([1.0, 0, 0, 0]))
    light = LightState(direction=[0.3, -1, 0.2], intensity=[0.6, 0.6, 0.6],
                       ambient_sh=flat_ambient_sh([0.35, 0.35, 0.35]))
    img_a = render(model, pose, intr, light)
    img_b = render(decoded, pose, intr, light)
    assert psnr(img_a, img_b) >= 45.0


# ---- deltas ----


def test_delta_no_change_is_empty_sparse():
    rng = np.random.default_rng(6)
    cur = rng.uniform(-1, 1, (40, 3)).astype(np.float32)
    base = cur.copy()
    payload, new_base = encode_delta(AttributeId.MEANS, cur, base)
    upd = decode_delta(payload)
    assert upd.mode == 1  # sparse
    assert upd.indices.size == 0
    np.testing.assert_array_equal(new_base, base)


def test_delta_single_survivor_sparse():
    rng = np.random.default_rng(7)
    base = rng.uniform(-1, 1, (40, 3)).astype(np.float32)
    cur = base.copy()
    cur[17, 0] += 0.5
    payload, new_base = encode_delta(AttributeId.MEANS, cur, base, gating_threshold=1e-3)
    upd = decode_delta(payload)
    assert upd.mode == 1
    np.testing.assert_array_equal(upd.indices, [17])
    # untouched rows keep the exact baseline
    untouched = np.ones(40, dtype=bool)
    untouched[17] = False
    np.testing.assert_array_equal(new_base[untouched], base[untouched])
    step = 2 * 0.5 / ((1 << 16) - 1)
    assert abs(new_base[17, 0] - cur[17, 0]) <= step


def test_delta_dense_when_most_rows_move():
    rng = np.random.default_rng(8)
    base = rng.uniform(-1, 1, (30, 3)).astype(np.float32)
    cur = (base + rng.uniform(0.01, 0.02, base.shape)).astype(np.float32)
    payload, _ = encode_delta(AttributeId.MEANS, cur, base, gating_threshold=1e-3)
    assert decode_delta(payload).mode == 0


def test_delta_absolute_opacity_exact_copy():
    rng = np.random.default_rng(9)
    model = random_model32(rng, n=25)
    payload, none_base = encode_delta(AttributeId.LOGIT_OPACITIES,
                                      model.logit_opacities[:25])
    assert none_base is None
    client = random_model32(np.random.default_rng(10), n=25)
    baselines = DeltaBaselines()
    assert apply_delta(client, baselines, payload, frame_epoch=0, current_epoch=0)
    upd = decode_delta(payload)
    np.testing.assert_array_equal(client.logit_opacities, upd.values.reshape(25).astype(np.float32))
    bits, lo, hi = ATTRIBUTE_QUANTIZERS[AttributeId.LOGIT_OPACITIES]
    assert np.max(np.abs(client.logit_opacities - model.logit_opacities)) <= quantizer_step(lo, hi, bits)


def test_delta_absolute_sh_and_quats_and_visibility():
    rng = np.random.default_rng(11)
    server = random_model32(rng, n=18, degree=2)
    client = random_model32(np.random.default_rng(12), n=18, degree=2)
    baselines = DeltaBaselines()
    for attr, cur in [
        (AttributeId.QUATERNIONS, server.quaternions),
        (AttributeId.SH_DC, server.sh_coeffs[:, :, 0]),
        (AttributeId.SH_REST, server.sh_coeffs[:, :, 1:]),
        (AttributeId.LIGHT_VISIBILITY, server.light_visibility),
    ]:
        payload, _ = encode_delta(attr, cur)
        assert apply_delta(client, baselines, payload, 0, 0)
    bits, lo, hi = ATTRIBUTE_QUANTIZERS[AttributeId.QUATERNIONS]
    assert np.max(np.abs(client.quaternions - server.quaternions)) <= quantizer_step(lo, hi, bits)
    np.testing.assert_array_equal(client.light_visibility, server.light_visibility)


def test_delta_stale_and_future_epochs_discarded():
    rng = np.random.default_rng(13)
    model = random_model32(rng, n=10)
    snap = model.copy()
    payload, _ = encode_delta(AttributeId.LOGIT_OPACITIES, model.logit_opacities * 0 + 5)
    baselines = DeltaBaselines()
    assert not apply_delta(model, baselines, payload, frame_epoch=1, current_epoch=2)
    assert not apply_delta(model, baselines, payload, frame_epoch=3, current_epoch=2)
    np.testing.assert_array_equal(model.logit_opacities, snap.logit_opacities)


def test_delta_count_mismatch_rejected():
    rng = np.random.default_rng(14)
    model = random_model32(rng, n=10)
    payload, _ = encode_delta(AttributeId.LOGIT_OPACITIES, np.zeros(7, np.float32))
    with pytest.raises(ProtocolError, match="rows"):
        apply_delta(model, DeltaBaselines(), payload, 0, 0)


def test_delta_residual_needs_baseline():
    with pytest.raises(ValueError, match="baseline"):
        encode_delta(AttributeId.MEANS, np.zeros((4, 3)))


@pytest.mark.parametrize("gating", [0.0, 1e-3])
def test_delta_random_walk_dual_ledger(gating):
    """Server walks its means for 50 ticks; the client replays every payload.
    Client state must equal the server baseline bit-exactly, and differ from
    the true server means by at most the documented bound."""
    rng = np.random.default_rng(15)
    n = 60
    server = random_model32(rng, n=n)
    client = random_model32(np.random.default_rng(16), n=n)
    server_base = DeltaBaselines()
    server_base.reset_from_model(server, epoch=0)
    client_base = DeltaBaselines()
    client_base.reset_from_model(server, epoch=0)  # snapshot sync
    client.means = server.means.copy()

    bits = ATTRIBUTE_QUANTIZERS[AttributeId.MEANS][0]
    for tick in range(50):
        moved = rng.random(n) < 0.3
        server.means[moved] += rng.normal(0, 0.01, (int(moved.sum()), 3)).astype(np.float32)
        a = server.active_count
        payload, new_base = encode_delta(AttributeId.MEANS, server.means[:a],
                                         server_base.means[:a], gating_threshold=gating)
        server_base.means[:a] = new_base
        assert apply_delta(client, client_base, payload, 0, 0)
        np.testing.assert_array_equal(client.means, server_base.means)
        upd = decode_delta(payload)
        if upd.mode == 1 and upd.indices.size:
            span = 2 * float(np.max(np.abs(upd.values)))
        else:
            span = 2 * 0.05
        step = span / ((1 << bits) - 1)
        bound = gating + step if gating else 2 * step
        assert np.max(np.abs(client.means.astype(np.float64) - server.means.astype(np.float64))) <= bound + 1e-9


def test_baselines_follow_mutation_records():
    rng = np.random.default_rng(17)
    model = random_model32(rng, n=6)
    base = DeltaBaselines()
    base.reset_from_model(model, epoch=0)
    tags = {i: tuple(model.means[i]) for i in range(6)}

    rec = freeze_range(model, [1, 3])
    base.apply_record(rec)
    np.testing.assert_array_equal(base.means, model.means)

    batch_model = random_model32(np.random.default_rng(18), n=2)
    batch = GaussianBatch(batch_model.means, batch_model.log_scales, batch_model.quaternions,
                          batch_model.logit_opacities, batch_model.sh_coeffs,
                          batch_model.light_visibility, batch_model.object_ids, 1)
    rec, _ = append_gaussians(model, batch)
    base.apply_record(rec)
    assert base.means.shape == (8, 3)
    np.testing.assert_array_equal(base.means[rec.insert_at:rec.insert_at + 2], 0.0)

    rec = prune_rows(model, [0])
    base.apply_record(rec)
    assert base.means.shape == (7, 3)


# ---- packets ----


def test_object_id_map_round_trip():
    rng = np.random.default_rng(19)
    ids = rng.integers(0, 3, 100).astype(np.int32)
    decoded = decode_object_id_map(encode_object_id_map(ids))
    np.testing.assert_array_equal(decoded, ids)


def test_object_transforms_round_trip_bit_exact():
    rng = np.random.default_rng(20)
    transforms = {
        1: (quat_normalize(rng.normal(size=4)).astype(np.float32).astype(np.float64),
            rng.uniform(-5, 5, 3).astype(np.float32).astype(np.float64)),
        4: (np.array([1.0, 0, 0, 0]), np.array([0.25, -1.5, 3.0])),
    }
    decoded = decode_object_transforms(encode_object_transforms(transforms))
    assert set(decoded) == {1, 4}
    for oid in decoded:
        np.testing.assert_array_equal(decoded[oid][0], np.float32(transforms[oid][0]).astype(np.float64))
        np.testing.assert_array_equal(decoded[oid][1], np.float32(transforms[oid][1]).astype(np.float64))


def test_light_visibility_ten_rows_is_two_bytes_plus_header():
    vis = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], dtype=np.float32)
    payload = encode_light_visibility(vis)
    assert len(payload) == 4 + 2
    np.testing.assert_array_equal(decode_light_visibility(payload), vis)


def test_light_state_round_trip():
    d, i, amb = decode_light_state(encode_light_state([0.0, -1.0, 0.0], [0.5, 0.6, 0.7], None))
    np.testing.assert_allclose(d, [0, -1, 0])
    assert amb is None
    ambient = flat_ambient_sh([0.3, 0.4, 0.5])
    d2, i2, amb2 = decode_light_state(encode_light_state([0.0, -1.0, 0.0], [1, 1, 1], ambient))
    np.testing.assert_allclose(amb2, ambient, atol=1e-7)


def test_camera_pose_round_trip():
    pose = Pose(position=np.array([1.0, 2.0, 3.0]),
                quaternion=quat_normalize(np.array([0.9, 0.1, -0.2, 0.3])))
    intr = CameraIntrinsics(width=320, height=240, fov_y=1.2, near=0.05, far=80.0)
    p2, i2 = decode_camera_pose(encode_camera_pose(pose, intr))
    np.testing.assert_allclose(p2.position, pose.position, atol=1e-6)
    assert i2.width == 320 and i2.height == 240
    assert abs(i2.fov_y - 1.2) < 1e-6
    with pytest.raises(ProtocolError):
        decode_camera_pose(b"\x00" * 10)


def test_ordering_round_trip_all_kinds():
    records = [
        PermuteRecord(permutation=np.array([0, 2, 4, 1, 3]), new_active_count=3),
        AppendRecord(insert_at=3, count=2, object_ids=np.array([0, 7], np.int32),
                     new_active_count=5),
        PruneRecord(indices=np.array([1, 6]), new_active_count=4),
    ]
    decoded = decode_ordering(encode_ordering(records))
    assert isinstance(decoded[0], PermuteRecord)
    np.testing.assert_array_equal(decoded[0].permutation, records[0].permutation)
    assert decoded[0].new_active_count == 3
    assert isinstance(decoded[1], AppendRecord)
    assert (decoded[1].insert_at, decoded[1].count, decoded[1].new_active_count) == (3, 2, 5)
    np.testing.assert_array_equal(decoded[1].object_ids, [0, 7])
    assert isinstance(decoded[2], PruneRecord)
    np.testing.assert_array_equal(decoded[2].indices, [1, 6])


def test_ordering_replay_matches_server_rows():
    """UUID shadow channel: the client applying decoded ordering records ends
    with rows in exactly the server's order."""
    rng = np.random.default_rng(21)
    model = random_model32(rng, n=8)
    uuids = list(range(8))
    model.logit_opacities[:] = np.arange(8)  # use opacity as the uuid channel
    client_uuids = list(uuids)

    records = []
    rec = freeze_range(model, [2, 5])
    records.append(rec)
    uuids = [uuids[i] for i in rec.permutation]
    batch_model = random_model32(np.random.default_rng(22), n=3)
    batch = GaussianBatch(batch_model.means, batch_model.log_scales, batch_model.quaternions,
                          np.array([100.0, 101.0, 102.0], np.float32), batch_model.sh_coeffs,
                          batch_model.light_visibility, batch_model.object_ids, 1)
    rec, rng_rows = append_gaussians(model, batch)
    records.append(rec)
    uuids[rec.insert_at:rec.insert_at] = [100, 101, 102]
    rec = prune_rows(model, [0, 7])
    records.append(rec)
    uuids = [u for i, u in enumerate(uuids) if i not in (0, 7)]

    for rec in decode_ordering(encode_ordering(records)):
        if isinstance(rec, PermuteRecord):
            client_uuids = [client_uuids[i] for i in rec.permutation]
        elif isinstance(rec, AppendRecord):
            client_uuids[rec.insert_at:rec.insert_at] = [100, 101, 102]
        else:
            client_uuids = [u for i, u in enumerate(client_uuids) if i not in set(rec.indices.tolist())]
    assert client_uuids == uuids
    np.testing.assert_array_equal(np.array(uuids, np.float32), model.logit_opacities)


def test_tensor_metadata_round_trip():
    meta = TensorMetadata(count=500, active_count=420, sh_degree=2,
                          attributes=[(AttributeId.MEANS, 3), (AttributeId.SH_REST, 24)])
    decoded = decode_tensor_metadata(encode_tensor_metadata(meta))
    assert decoded.count == 500 and decoded.active_count == 420
    assert decoded.attributes == [(AttributeId.MEANS, 3), (AttributeId.SH_REST, 24)]
    with pytest.raises(ProtocolError):
        decode_tensor_metadata(b"\x00" * 4)
