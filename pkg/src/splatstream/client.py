"""Receiving end of the stream: maintains a replica of the server's model
and renders it locally from any viewpoint.

The ingest path is defensive. Framing errors resynchronize on the next magic
marker, packets that disagree with the replica's row count or epoch are
counted and dropped, and a snapshot only replaces the replica after its
contents pass basic sanity checks, so a corrupted stream can never leave the
replica in a broken state.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .model import GaussianModel, ObjectRegistry, apply_mutation
from .protocol import (
    MAGIC,
    AttributeId,
    DeltaBaselines,
    Frame,
    PacketType,
    ProtocolError,
    apply_delta,
    decode_light_state,
    decode_light_visibility,
    decode_object_id_map,
    decode_object_transforms,
    decode_ordering,
    decode_snapshot,
    decode_tensor_metadata,
    encode_camera_pose,
    frame_bytes,
    parse_frame,
)
from .render import LightState, render


@dataclass
class ClientStats:
    frames_received: int = 0
    frame_errors: int = 0
    bytes_received: int = 0
    snapshots_applied: int = 0
    deltas_applied: int = 0
    stale_epoch_deltas: int = 0
    discarded_packets: int = 0
    orderings_applied: int = 0
    received_by_type: dict = field(default_factory=dict)

    def count(self, ptype: int):
        self.received_by_type[ptype] = self.received_by_type.get(ptype, 0) + 1


def _replica_safe(model: GaussianModel) -> bool:
    """Value-level sanity for a freshly decoded snapshot."""
    for name in ("means", "log_scales", "quaternions", "logit_opacities", "sh_coeffs"):
        if not np.isfinite(model.attribute(name)).all():
            return False
    vis = model.light_visibility
    if vis.size and (not np.isfinite(vis).all() or vis.min() < 0 or vis.max() > 1):
        return False
    if model.object_ids.size and model.object_ids.min() < 0:
        return False
    return True


class StreamClient:
    """Replica holder. feed() bytes in, render_view() images out."""

    def __init__(self, viewport: Optional[CameraIntrinsics] = None):
        self.model = GaussianModel.empty(0)
        self.has_model = False
        self.epoch = 0
        self.baselines = DeltaBaselines()
        self.registry = ObjectRegistry()
        self.light = LightState(direction=np.array([0.0, -1.0, 0.0]),
                                intensity=np.zeros(3))
        self.viewport = viewport or CameraIntrinsics(width=64, height=64,
                                                     fov_y=np.pi / 2,
                                                     near=0.05, far=100.0)
        self.known_object_ids: Optional[np.ndarray] = None
        self.metadata = None
        self.stats = ClientStats()
        self.transport = None
        self._rx = bytearray()
        self._pending_pose: Optional[Pose] = None

    # -- transport ----------------------------------------------------------

    def attach(self, transport) -> None:
        self.transport = transport
        self._rx.clear()

    def send_pose(self, pose: Pose) -> None:
        """Queue the viewer pose; only the newest is sent per pump."""
        self._pending_pose = pose

    def pump(self) -> None:
        """Flush the queued pose and ingest whatever the server sent."""
        if self.transport is None:
            return
        if self._pending_pose is not None:
            payload = encode_camera_pose(self._pending_pose, self.viewport)
            self.transport.send(frame_bytes(PacketType.CAMERA_POSE, self.epoch, payload))
            self._pending_pose = None
        data = self.transport.recv()
        if data:
            self.feed(data)

    def feed(self, data: bytes) -> None:
        """Consume stream bytes; damaged spans are skipped magic-to-magic."""
        self.stats.bytes_received += len(data)
        self._rx.extend(data)
        offset = 0
        while True:
            try:
                frame, offset = parse_frame(self._rx, offset)
            except ProtocolError:
                self.stats.frame_errors += 1
                nxt = self._rx.find(MAGIC, offset + 1)
                if nxt < 0:
                    offset = max(0, len(self._rx) - (len(MAGIC) - 1))
                    break
                offset = nxt
                continue
            if frame is None:
                break
            self.stats.frames_received += 1
            self.stats.count(int(frame.ptype))
            self.on_packet(frame)
        del self._rx[:offset]

    # -- packet handling ------------------------------------------------------

    def on_packet(self, frame: Frame) -> None:
        try:
            handler = _HANDLERS.get(frame.ptype)
            if handler is None:
                self.stats.discarded_packets += 1
                return
            handler(self, frame)
        except ProtocolError:
            self.stats.discarded_packets += 1

    def _on_object_id_map(self, frame: Frame) -> None:
        self.known_object_ids = decode_object_id_map(frame.payload)

    def _on_object_transforms(self, frame: Frame) -> None:
        transforms = decode_object_transforms(frame.payload)
        for oid, (q, t) in transforms.items():
            if not (np.isfinite(q).all() and np.isfinite(t).all()):
                self.stats.discarded_packets += 1
                return
            if np.linalg.norm(q) < 1e-6:
                self.stats.discarded_packets += 1
                return
        for oid, (q, t) in transforms.items():
            if self.has_model and oid in self.registry.transforms:
                self.registry.apply_transform(self.model, oid, q, t)
            else:
                self.registry.set_transform(oid, q, t)

    def _on_tensor_metadata(self, frame: Frame) -> None:
        self.metadata = decode_tensor_metadata(frame.payload)

    def _on_snapshot(self, frame: Frame) -> None:
        decoded, _ = decode_snapshot(frame.payload)
        if not _replica_safe(decoded):
            self.stats.discarded_packets += 1
            return
        self.model = decoded
        self.epoch = frame.epoch
        self.has_model = True
        self.baselines.reset_from_model(decoded, frame.epoch)
        self.registry.refresh_locals(self.model)
        self.stats.snapshots_applied += 1

    def _on_delta(self, frame: Frame) -> None:
        if not self.has_model:
            self.stats.discarded_packets += 1
            return
        if apply_delta(self.model, self.baselines, frame.payload,
                       frame.epoch, self.epoch):
            self.stats.deltas_applied += 1
            attr = AttributeId(frame.payload[0])
            if attr in (AttributeId.MEANS, AttributeId.QUATERNIONS):
                self._refresh_dynamic_locals()
        else:
            self.stats.stale_epoch_deltas += 1

    def _on_ordering(self, frame: Frame) -> None:
        if not self.has_model:
            # the pending snapshot carries the post-mutation rows already
            self.stats.discarded_packets += 1
            return
        records = decode_ordering(frame.payload)
        try:
            for record in records:
                apply_mutation(self.model, record)
                self.baselines.apply_record(record)
                self.registry.resize(record)
        except ValueError:
            self.stats.discarded_packets += 1
            return
        self.epoch = frame.epoch
        self.stats.orderings_applied += 1

    def _on_light_visibility(self, frame: Frame) -> None:
        vis = decode_light_visibility(frame.payload)
        if not self.has_model or vis.size != self.model.count:
            self.stats.discarded_packets += 1
            return
        self.model.light_visibility = vis.astype(np.float32)

    def _on_light_state(self, frame: Frame) -> None:
        direction, intensity, ambient_sh = decode_light_state(frame.payload)
        finite = np.isfinite(direction).all() and np.isfinite(intensity).all()
        if ambient_sh is not None:
            finite = finite and np.isfinite(ambient_sh).all()
        if not finite or np.linalg.norm(direction) < 1e-6:
            self.stats.discarded_packets += 1
            return
        self.light = LightState(direction=direction, intensity=intensity,
                                ambient_sh=ambient_sh)

    def _refresh_dynamic_locals(self) -> None:
        rows = np.nonzero(self.model.object_ids > 0)[0]
        if rows.size:
            self.registry.refresh_locals(self.model, rows)

    # -- rendering ------------------------------------------------------------

    def render_view(self, pose: Pose, intr: CameraIntrinsics,
                    background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, bool]:
        """Render the replica. Before the first snapshot lands this returns a
        flat background tile and ready=False."""
        if not self.has_model:
            img = np.broadcast_to(np.asarray(background, dtype=np.float64),
                                  (intr.height, intr.width, 3)).copy()
            return img, False
        img = render(self.model, pose, intr, self.light, background=background)
        return img, True


_HANDLERS = {
    PacketType.OBJECT_ID_MAP: StreamClient._on_object_id_map,
    PacketType.OBJECT_TRANSFORMS: StreamClient._on_object_transforms,
    PacketType.TENSOR_METADATA: StreamClient._on_tensor_metadata,
    PacketType.MODEL_SNAPSHOT: StreamClient._on_snapshot,
    PacketType.TENSOR_DELTA: StreamClient._on_delta,
    PacketType.GAUSSIAN_ID_ORDERING: StreamClient._on_ordering,
    PacketType.LIGHT_VISIBILITY: StreamClient._on_light_visibility,
    PacketType.LIGHT_STATE: StreamClient._on_light_state,
}
