"""The checked-in wire fixtures stay stable and decode to their manifest."""

import json
import pathlib
import subprocess
import sys

import numpy as np
import pytest

from splatstream.model import AppendRecord, PermuteRecord, PruneRecord
from splatstream.protocol import (
    AttributeId,
    FrameParser,
    decode_camera_pose,
    decode_delta,
    decode_light_state,
    decode_light_visibility,
    decode_object_id_map,
    decode_object_transforms,
    decode_ordering,
    decode_snapshot,
    decode_tensor_metadata,
    parse_frame,
)
from splatstream.protocol.delta import advance_baseline

GOLDEN = pathlib.Path(__file__).parent / "golden"
MANIFEST = json.loads((GOLDEN / "manifest.json").read_text())


def load(name):
    frame, _ = parse_frame((GOLDEN / f"{name}.bin").read_bytes())
    entry = MANIFEST[name]
    assert frame.ptype == entry["packet_type"]
    assert frame.epoch == entry["epoch"]
    assert len(frame.payload) == entry["payload_length"]
    return frame.payload, entry


def test_regeneration_is_byte_identical(tmp_path):
    script = pathlib.Path(__file__).parents[1] / "scripts" / "make_golden_packets.py"
    out = subprocess.run([sys.executable, str(script), str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    fresh = sorted(p.name for p in tmp_path.iterdir())
    assert fresh == sorted(p.name for p in GOLDEN.iterdir() if p.suffix in (".bin", ".json"))
    for name in fresh:
        assert (tmp_path / name).read_bytes() == (GOLDEN / name).read_bytes(), name


def test_object_id_map_fixture():
    payload, entry = load("object_id_map")
    np.testing.assert_array_equal(decode_object_id_map(payload), entry["object_ids"])


def test_object_transforms_fixture():
    payload, entry = load("object_transforms")
    decoded = decode_object_transforms(payload)
    assert set(map(str, decoded)) == set(entry["transforms"])
    for oid, rec in entry["transforms"].items():
        q, t = decoded[int(oid)]
        np.testing.assert_array_equal(q, rec["quaternion"])
        np.testing.assert_array_equal(t, rec["translation"])


def test_light_visibility_fixture():
    payload, entry = load("light_visibility")
    np.testing.assert_array_equal(decode_light_visibility(payload), entry["visibility"])


@pytest.mark.parametrize("name", ["light_state_directional", "light_state_ambient"])
def test_light_state_fixtures(name):
    payload, entry = load(name)
    d, i, amb = decode_light_state(payload)
    np.testing.assert_allclose(d, entry["direction"], atol=1e-7)
    np.testing.assert_allclose(i, entry["intensity"], atol=1e-7)
    if entry["ambient_sh"] is None:
        assert amb is None
    else:
        np.testing.assert_array_equal(amb, entry["ambient_sh"])


def test_camera_pose_fixture():
    payload, entry = load("camera_pose")
    pose, intr = decode_camera_pose(payload)
    np.testing.assert_array_equal(pose.position, entry["position"])
    np.testing.assert_array_equal(pose.quaternion, entry["quaternion"])
    assert (intr.width, intr.height) == (entry["width"], entry["height"])
    assert intr.fov_y == entry["fov_y"]
    assert intr.near == entry["near"] and intr.far == entry["far"]


def test_ordering_fixture():
    payload, entry = load("ordering")
    decoded = decode_ordering(payload)
    kinds = {PermuteRecord: "permute", AppendRecord: "append", PruneRecord: "prune"}
    for rec, want in zip(decoded, entry["records"]):
        assert kinds[type(rec)] == want["kind"]
        assert rec.new_active_count == want["new_active_count"]
        if isinstance(rec, PermuteRecord):
            np.testing.assert_array_equal(rec.permutation, want["permutation"])
        elif isinstance(rec, AppendRecord):
            assert (rec.insert_at, rec.count) == (want["insert_at"], want["count"])
            np.testing.assert_array_equal(rec.object_ids, want["object_ids"])
        else:
            np.testing.assert_array_equal(rec.indices, want["indices"])


def test_tensor_metadata_fixture():
    payload, entry = load("tensor_metadata")
    meta = decode_tensor_metadata(payload)
    assert meta.count == entry["count"]
    assert meta.active_count == entry["active_count"]
    assert meta.sh_degree == entry["sh_degree"]
    assert [[int(a), d] for a, d in meta.attributes] == entry["attributes"]


def test_snapshot_lossless_fixture():
    payload, entry = load("snapshot_lossless")
    model, info = decode_snapshot(payload)
    src = entry["source_model"]
    assert info["profile_id"] == 1
    assert model.count == src["count"] and model.active_count == src["active_count"]
    for name in ("means", "log_scales", "quaternions", "logit_opacities",
                 "sh_coeffs", "light_visibility"):
        np.testing.assert_array_equal(model.attribute(name).astype(np.float64),
                                      src[name], err_msg=name)
    np.testing.assert_array_equal(model.object_ids, src["object_ids"])


def test_snapshot_quantized_fixture():
    payload, entry = load("snapshot_quantized")
    model, info = decode_snapshot(payload)
    src = entry["source_model"]
    assert info["profile_id"] == 0
    assert model.sh_degree == src["sh_degree"]
    means = np.asarray(src["means"])
    extent = means.max(axis=0) - means.min(axis=0)
    assert np.all(np.abs(model.means - means) <= extent / (1 << 16) + 1e-7)
    np.testing.assert_array_equal(model.light_visibility, src["light_visibility"])
    np.testing.assert_array_equal(model.object_ids, src["object_ids"])


def test_delta_fixtures_apply_to_documented_baseline():
    for name in ("delta_sparse_residual", "delta_dense_residual"):
        payload, entry = load(name)
        upd = decode_delta(payload)
        assert upd.mode == entry["mode"]
        if "expected_indices" in entry:
            np.testing.assert_array_equal(upd.indices, entry["expected_indices"])
        base = np.asarray(entry["baseline"], np.float32)
        advance_baseline(base, upd.indices, upd.values)
        np.testing.assert_array_equal(base.astype(np.float64),
                                      entry["expected_baseline_after"])

    payload, entry = load("delta_absolute")
    upd = decode_delta(payload)
    assert upd.mode == 2
    np.testing.assert_array_equal(upd.values.reshape(-1), entry["expected_values"])


def test_stream_fixture_parses_in_order():
    parser = FrameParser()
    parser.feed((GOLDEN / "stream.bin").read_bytes())
    got = [f.ptype for f in parser.frames()]
    want = [MANIFEST[n]["packet_type"] for n in MANIFEST["stream"]["frames"]]
    assert [int(t) for t in got] == want
    assert parser.pending_bytes == 0
