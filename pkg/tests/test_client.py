"""Replica ingestion: mirror invariants, epoch rules, hostile input."""

import numpy as np
import pytest

from splatstream.client import StreamClient
from splatstream.geometry import CameraIntrinsics, look_at, quat_normalize
from splatstream.metrics import ssim
from splatstream.model import GaussianModel, PermuteRecord
from splatstream.protocol import (
    PROFILE_LOSSLESS,
    AttributeId,
    PacketType,
    encode_delta,
    encode_light_state,
    encode_light_visibility,
    encode_ordering,
    encode_snapshot,
    frame_bytes,
)
from splatstream.protocol.packets import decode_camera_pose
from splatstream.protocol.framing import FrameParser
from splatstream.transport import LoopbackTransport

from test_server import run_ticks, small_config, small_scene


def make_pair(**cfg_overrides):
    from splatstream.server import StreamServer
    server = StreamServer(small_config(**cfg_overrides), small_scene())
    client = StreamClient()
    client_end, server_end = LoopbackTransport.pair()
    client.attach(client_end)
    server.attach(server_end)
    return server, client


def step_pair(server, client, tick):
    client.pump()
    rep = server.tick(tick)
    client.pump()
    return rep


def random_replica(n=12, sh_degree=1, seed=0):
    rng = np.random.default_rng(seed)
    B = (sh_degree + 1) ** 2
    return GaussianModel(
        means=rng.uniform(-2, 2, (n, 3)).astype(np.float32),
        log_scales=rng.uniform(-3, -1, (n, 3)).astype(np.float32),
        quaternions=quat_normalize(rng.normal(size=(n, 4))).astype(np.float32),
        logit_opacities=rng.uniform(-1, 2, n).astype(np.float32),
        sh_coeffs=rng.uniform(-0.4, 0.4, (n, 3, B)).astype(np.float32),
        light_visibility=(rng.random(n) > 0.3).astype(np.float32),
        object_ids=np.zeros(n, np.int32),
        active_count=n,
        sh_degree=sh_degree,
    )


def test_not_ready_renders_flat_background():
    client = StreamClient()
    intr = CameraIntrinsics(width=16, height=16, fov_y=1.2, near=0.05, far=50.0)
    img, ready = client.render_view(look_at([0, 1, 3], [0, 0, 0]), intr,
                                    background=(0.2, 0.3, 0.4))
    assert not ready
    np.testing.assert_allclose(img, np.broadcast_to([0.2, 0.3, 0.4], (16, 16, 3)))


def test_replica_renders_close_to_server():
    server, client = make_pair()
    for t in range(3):
        step_pair(server, client, t)
    intr = CameraIntrinsics(width=48, height=48, fov_y=1.2, near=0.05, far=50.0)
    pose = look_at([3, 2, 3], [0, 0.4, 0])
    img_c, ready = client.render_view(pose, intr,
                                      background=server.scene.background)
    assert ready
    img_s = server.render_view(pose, intr)
    assert ssim(img_c, img_s) > 0.95


def test_residual_baselines_mirror_bit_exactly():
    # both peers must advance the residual baselines on the same grid;
    # any drift here compounds forever, so equality is exact, not approximate
    server, client = make_pair()
    for t in range(12):
        step_pair(server, client, t)
        np.testing.assert_array_equal(server.baselines.means,
                                      client.baselines.means)
        np.testing.assert_array_equal(server.baselines.log_scales,
                                      client.baselines.log_scales)
        np.testing.assert_array_equal(client.model.means, client.baselines.means)
        assert client.model.count == server.model.count
        assert client.model.active_count == server.model.active_count
        assert client.epoch == server.epoch


def test_stale_epoch_delta_is_noop():
    server, client = make_pair()
    step_pair(server, client, 0)
    a = client.model.active_count
    payload, _ = encode_delta(AttributeId.QUATERNIONS,
                              np.tile([0.0, 1.0, 0.0, 0.0], (a, 1)))
    before = client.model.quaternions.copy()
    stale = client.epoch - 1
    client.feed(frame_bytes(PacketType.TENSOR_DELTA, stale, payload))
    assert client.stats.stale_epoch_deltas == 1
    np.testing.assert_array_equal(client.model.quaternions, before)


def test_delta_row_count_mismatch_discarded():
    server, client = make_pair()
    step_pair(server, client, 0)
    wrong = client.model.active_count + 5
    payload, _ = encode_delta(AttributeId.LOGIT_OPACITIES, np.zeros(wrong))
    before = client.model.logit_opacities.copy()
    discarded = client.stats.discarded_packets
    client.feed(frame_bytes(PacketType.TENSOR_DELTA, client.epoch, payload))
    assert client.stats.discarded_packets == discarded + 1
    np.testing.assert_array_equal(client.model.logit_opacities, before)


def test_resync_after_corrupt_span():
    server, client = make_pair()
    client_end = client.transport
    step_pair(server, client, 0)
    server.tick(1)
    stream = client_end.recv()
    assert len(stream) > 200
    # smash bytes inside the first frame, leave the rest intact
    broken = bytearray(stream)
    for i in range(20, 40):
        broken[i] ^= 0xFF
    frames_before = client.stats.frames_received
    client.feed(bytes(broken))
    assert client.stats.frame_errors >= 1
    assert client.stats.frames_received > frames_before  # later frames landed


def test_snapshot_with_nan_rejected():
    client = StreamClient()
    bad = random_replica()
    bad.means[3, 1] = np.nan
    payload = encode_snapshot(bad, PROFILE_LOSSLESS)
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 1, payload))
    assert not client.has_model
    assert client.stats.discarded_packets == 1
    assert client.stats.snapshots_applied == 0


def test_snapshot_with_bad_visibility_rejected():
    client = StreamClient()
    bad = random_replica()
    bad.light_visibility[0] = 3.0
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 1,
                            encode_snapshot(bad, PROFILE_LOSSLESS)))
    assert not client.has_model


def test_lossless_snapshot_applies_bit_exactly():
    client = StreamClient()
    original = random_replica(seed=5)
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 7,
                            encode_snapshot(original, PROFILE_LOSSLESS)))
    assert client.has_model
    assert client.epoch == 7
    np.testing.assert_array_equal(client.model.means, original.means)
    np.testing.assert_array_equal(client.model.sh_coeffs, original.sh_coeffs)
    np.testing.assert_array_equal(client.model.quaternions, original.quaternions)


def test_ordering_before_snapshot_discarded():
    client = StreamClient()
    rec = PermuteRecord(permutation=np.arange(4), new_active_count=4)
    client.feed(frame_bytes(PacketType.GAUSSIAN_ID_ORDERING, 1,
                            encode_ordering([rec])))
    assert client.stats.discarded_packets == 1
    assert client.epoch == 0


def test_invalid_permutation_discarded_without_epoch_bump():
    client = StreamClient()
    model = random_replica(n=6)
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 3,
                            encode_snapshot(model, PROFILE_LOSSLESS)))
    rec = PermuteRecord(permutation=np.arange(99), new_active_count=6)
    client.feed(frame_bytes(PacketType.GAUSSIAN_ID_ORDERING, 4,
                            encode_ordering([rec])))
    assert client.epoch == 3  # rejected record must not advance the epoch
    assert client.stats.orderings_applied == 0


def test_light_state_zero_direction_rejected():
    client = StreamClient()
    d0 = client.light.direction.copy()
    client.feed(frame_bytes(PacketType.LIGHT_STATE, 0,
                            encode_light_state(np.zeros(3), np.ones(3), None)))
    assert client.stats.discarded_packets == 1
    np.testing.assert_array_equal(client.light.direction, d0)


def test_visibility_size_mismatch_rejected():
    client = StreamClient()
    model = random_replica(n=6)
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 1,
                            encode_snapshot(model, PROFILE_LOSSLESS)))
    before = client.model.light_visibility.copy()
    client.feed(frame_bytes(PacketType.LIGHT_VISIBILITY, 1,
                            encode_light_visibility(np.ones(17))))
    np.testing.assert_array_equal(client.model.light_visibility, before)


def test_pump_sends_only_latest_pose():
    client = StreamClient()
    client_end, server_end = LoopbackTransport.pair()
    client.attach(client_end)
    stale = look_at([9, 9, 9], [0, 0, 0])
    fresh = look_at([0, 1, 4], [0, 0, 0])
    client.send_pose(stale)
    client.send_pose(fresh)
    client.pump()
    parser = FrameParser()
    parser.feed(server_end.recv())
    frames = list(parser.frames())
    assert len(frames) == 1
    assert frames[0].ptype == PacketType.CAMERA_POSE
    pose, _ = decode_camera_pose(frames[0].payload)
    np.testing.assert_allclose(pose.position, fresh.position, atol=1e-6)


def test_fuzzed_frames_never_break_the_replica():
    # valid envelopes around random payloads, plus raw noise; the replica
    # must stay finite and renderable through all of it
    rng = np.random.default_rng(11)
    client = StreamClient()
    model = random_replica(n=10, seed=2)
    client.feed(frame_bytes(PacketType.MODEL_SNAPSHOT, 1,
                            encode_snapshot(model, PROFILE_LOSSLESS)))
    assert client.has_model
    types = list(PacketType)
    for _ in range(1500):
        if rng.random() < 0.3:
            client.feed(rng.bytes(rng.integers(1, 200)))
        else:
            ptype = types[rng.integers(0, len(types))]
            payload = rng.bytes(rng.integers(0, 160))
            epoch = int(rng.integers(0, 4))
            client.feed(frame_bytes(ptype, epoch, payload))
    for name in ("means", "log_scales", "quaternions", "logit_opacities",
                 "sh_coeffs", "light_visibility"):
        assert np.isfinite(client.model.attribute(name)).all()
    intr = CameraIntrinsics(width=24, height=24, fov_y=1.2, near=0.05, far=50.0)
    img, ready = client.render_view(look_at([0, 1, 4], [0, 0.3, 0]), intr)
    assert ready
    assert np.isfinite(img).all()
