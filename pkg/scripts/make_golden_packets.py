#!/usr/bin/env python3
"""Regenerate the golden wire-format fixtures under tests/golden/.

Every fixture is a raw frame (envelope included) except the delta trio,
which additionally records the baseline context needed to apply it. The
manifest carries the expected decoded values so non-Python implementations
can verify against the same bytes.
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from splatstream.geometry import CameraIntrinsics, Pose, quat_normalize
from splatstream.model import AppendRecord, GaussianModel, PermuteRecord, PruneRecord
from splatstream.protocol import (
    PROFILE_LOSSLESS,
    AttributeId,
    PacketType,
    decode_camera_pose,
    decode_delta,
    decode_light_state,
    encode_camera_pose,
    encode_delta,
    encode_light_state,
    encode_light_visibility,
    encode_object_id_map,
    encode_object_transforms,
    encode_ordering,
    encode_snapshot,
    encode_tensor_metadata,
    frame_bytes,
)
from splatstream.protocol.delta import advance_baseline
from splatstream.protocol.packets import TensorMetadata

DEFAULT_OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "golden"


def lists(a):
    return np.asarray(a, dtype=np.float64).tolist()


def fixture_model():
    rng = np.random.default_rng(2024)
    n, B = 8, 4  # degree 1
    return GaussianModel(
        means=rng.uniform(-2, 2, (n, 3)).astype(np.float32),
        log_scales=rng.uniform(-3, -1, (n, 3)).astype(np.float32),
        quaternions=quat_normalize(rng.normal(size=(n, 4))).astype(np.float32),
        logit_opacities=rng.uniform(-1, 2, n).astype(np.float32),
        sh_coeffs=rng.uniform(-0.4, 0.4, (n, 3, B)).astype(np.float32),
        light_visibility=(rng.random(n) > 0.3).astype(np.float32),
        object_ids=np.array([0, 0, 1, 1, 1, 2, 2, 2], np.int32),
        active_count=6,
        sh_degree=1,
    )


def main(out_dir=None):
    out = pathlib.Path(out_dir) if out_dir else DEFAULT_OUT
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}

    def emit(name, ptype, epoch, payload, expect):
        (out / f"{name}.bin").write_bytes(frame_bytes(ptype, epoch, payload))
        manifest[name] = {"packet_type": int(ptype), "epoch": epoch,
                          "payload_length": len(payload), **expect}

    ids = np.array([0, 0, 1, 2, 5, 5, 5], np.int32)
    emit("object_id_map", PacketType.OBJECT_ID_MAP, 0, encode_object_id_map(ids),
         {"object_ids": ids.tolist()})

    transforms = {
        2: (np.float32([0.5, 0.5, 0.5, 0.5]).astype(np.float64),
            np.float32([1.0, -2.0, 3.5]).astype(np.float64)),
        7: (np.float32(quat_normalize([0.9, 0.1, 0.0, -0.2])).astype(np.float64),
            np.float32([0.0, 0.25, -4.0]).astype(np.float64)),
    }
    emit("object_transforms", PacketType.OBJECT_TRANSFORMS, 3,
         encode_object_transforms(transforms),
         {"transforms": {str(k): {"quaternion": lists(v[0]), "translation": lists(v[1])}
                         for k, v in transforms.items()}})

    vis = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], np.float32)
    emit("light_visibility", PacketType.LIGHT_VISIBILITY, 5, encode_light_visibility(vis),
         {"visibility": vis.astype(int).tolist()})

    emit("light_state_directional", PacketType.LIGHT_STATE, 1,
         encode_light_state([0.0, -1.0, 0.0], [1.0, 0.9, 0.8], None),
         {"direction": [0.0, -1.0, 0.0], "intensity": [1.0, 0.9, 0.8], "ambient_sh": None})

    ambient = np.float32([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]).astype(np.float64)
    payload = encode_light_state([0.3, -0.8, 0.1], [0.7, 0.7, 0.7], ambient)
    d, i, amb = decode_light_state(payload)
    emit("light_state_ambient", PacketType.LIGHT_STATE, 1, payload,
         {"direction": lists(d), "intensity": lists(i), "ambient_sh": lists(amb)})

    pose = Pose(position=np.array([1.5, 0.5, -3.0]),
                quaternion=quat_normalize(np.array([0.92, 0.0, 0.39, 0.0])))
    intr = CameraIntrinsics(width=640, height=480, fov_y=np.float32(1.0471976), near=0.1, far=50.0)
    payload = encode_camera_pose(pose, intr)
    dec_pose, dec_intr = decode_camera_pose(payload)
    emit("camera_pose", PacketType.CAMERA_POSE, 9, payload,
         {"position": lists(dec_pose.position), "quaternion": lists(dec_pose.quaternion),
          "width": dec_intr.width, "height": dec_intr.height,
          "fov_y": float(dec_intr.fov_y), "near": float(dec_intr.near),
          "far": float(dec_intr.far)})

    records = [
        PermuteRecord(permutation=np.array([0, 2, 4, 1, 3, 5]), new_active_count=4),
        AppendRecord(insert_at=4, count=3, object_ids=np.array([3, 3, 9], np.int32),
                     new_active_count=7),
        PruneRecord(indices=np.array([0, 5]), new_active_count=5),
    ]
    emit("ordering", PacketType.GAUSSIAN_ID_ORDERING, 4, encode_ordering(records),
         {"records": [
             {"kind": "permute", "permutation": [0, 2, 4, 1, 3, 5], "new_active_count": 4},
             {"kind": "append", "insert_at": 4, "count": 3, "object_ids": [3, 3, 9],
              "new_active_count": 7},
             {"kind": "prune", "indices": [0, 5], "new_active_count": 5},
         ]})

    meta = TensorMetadata(count=8, active_count=6, sh_degree=1,
                          attributes=[(AttributeId.MEANS, 3), (AttributeId.LOG_SCALES, 3),
                                      (AttributeId.QUATERNIONS, 4),
                                      (AttributeId.LOGIT_OPACITIES, 1),
                                      (AttributeId.SH_DC, 3), (AttributeId.SH_REST, 9),
                                      (AttributeId.LIGHT_VISIBILITY, 1)])
    emit("tensor_metadata", PacketType.TENSOR_METADATA, 2, encode_tensor_metadata(meta),
         {"count": 8, "active_count": 6, "sh_degree": 1,
          "attributes": [[int(a), d] for a, d in meta.attributes]})

    model = fixture_model()
    model_json = {
        "count": 8, "active_count": 6, "sh_degree": 1,
        "means": lists(model.means), "log_scales": lists(model.log_scales),
        "quaternions": lists(model.quaternions),
        "logit_opacities": lists(model.logit_opacities),
        "sh_coeffs": lists(model.sh_coeffs),
        "light_visibility": lists(model.light_visibility),
        "object_ids": model.object_ids.tolist(),
    }
    emit("snapshot_quantized", PacketType.MODEL_SNAPSHOT, 2, encode_snapshot(model),
         {"source_model": model_json,
          "note": "decoded attributes differ from source_model by at most one quantizer step"})
    emit("snapshot_lossless", PacketType.MODEL_SNAPSHOT, 2,
         encode_snapshot(model, PROFILE_LOSSLESS),
         {"source_model": model_json, "note": "decodes bit-exactly to source_model"})

    # delta trio against an explicit baseline; expectations come from the
    # decoder itself so the manifest stays consistent with the bytes
    rng = np.random.default_rng(77)
    base = rng.uniform(-1, 1, (6, 3)).astype(np.float32)

    cur_sparse = base.copy()
    cur_sparse[1] += np.float32([0.05, 0.0, -0.02])
    cur_sparse[4, 2] += np.float32(0.004)
    payload, _ = encode_delta(AttributeId.MEANS, cur_sparse, base, gating_threshold=1e-3)
    upd = decode_delta(payload)
    after = base.copy()
    advance_baseline(after, upd.indices, upd.values)
    emit("delta_sparse_residual", PacketType.TENSOR_DELTA, 2, payload,
         {"attribute_id": int(AttributeId.MEANS), "mode": 1, "baseline": lists(base),
          "expected_indices": upd.indices.tolist(),
          "expected_baseline_after": lists(after)})

    cur_dense = (base + rng.uniform(0.01, 0.03, base.shape)).astype(np.float32)
    payload, _ = encode_delta(AttributeId.MEANS, cur_dense, base, gating_threshold=1e-3)
    upd = decode_delta(payload)
    after = base.copy()
    advance_baseline(after, upd.indices, upd.values)
    emit("delta_dense_residual", PacketType.TENSOR_DELTA, 2, payload,
         {"attribute_id": int(AttributeId.MEANS), "mode": 0, "baseline": lists(base),
          "expected_baseline_after": lists(after)})

    ops = rng.uniform(-2, 3, 6).astype(np.float32)
    payload, _ = encode_delta(AttributeId.LOGIT_OPACITIES, ops)
    upd = decode_delta(payload)
    emit("delta_absolute", PacketType.TENSOR_DELTA, 2, payload,
         {"attribute_id": int(AttributeId.LOGIT_OPACITIES), "mode": 2,
          "expected_values": lists(upd.values.reshape(6))})

    stream = b"".join((out / f"{n}.bin").read_bytes()
                      for n in ["tensor_metadata", "snapshot_quantized",
                                "delta_sparse_residual", "light_state_ambient"])
    (out / "stream.bin").write_bytes(stream)
    manifest["stream"] = {"frames": ["tensor_metadata", "snapshot_quantized",
                                     "delta_sparse_residual", "light_state_ambient"]}

    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(manifest)} fixtures to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
