"""Live loop: captures engine buffers, grows and optimizes the model, applies
scene dynamics, and streams snapshots plus scheduled deltas to one client."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .engine import (
    build_dome_rig,
    build_light_camera,
    capture_input_buffers,
    cull_input_samples,
    render_ground_truth,
    render_ortho_depth,
)
from .expansion import ExpansionState, expansion_pass, freeze_policy, precull, prune
from .geometry import CameraIntrinsics, Pose, look_at
from .metrics import bandwidth_report, ssim
from .model import GaussianModel, GridIndex, ObjectRegistry, freeze_range
from .optim import LearningRates, OptimizerState, ReferenceView, step
from .protocol import (
    PROFILE_DEFAULT,
    PROFILE_LOSSLESS,
    AttributeId,
    DeltaBaselines,
    FrameParser,
    PacketType,
    ProtocolError,
    decode_camera_pose,
    decode_snapshot,
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
from .protocol.packets import TensorMetadata
from .render import (
    LightState,
    flat_ambient_sh,
    light_state_from_scene,
    render,
    update_light_visibility,
)
from .scene import DirectionalLight, SceneDescription, load_scene
from .traces import parse_event

DEFAULT_DELTA_PERIODS = {
    AttributeId.LOGIT_OPACITIES: 1,
    AttributeId.SH_DC: 1,
    AttributeId.MEANS: 1,
    AttributeId.LOG_SCALES: 1,
    AttributeId.QUATERNIONS: 10,
    AttributeId.SH_REST: 30,
}

# fixed emission order within a tick so replays are byte-identical
DELTA_ORDER = (
    AttributeId.MEANS,
    AttributeId.LOG_SCALES,
    AttributeId.QUATERNIONS,
    AttributeId.LOGIT_OPACITIES,
    AttributeId.SH_DC,
    AttributeId.SH_REST,
)


@dataclass
class StreamSchedule:
    snapshot_interval_ticks: int = 150
    delta_periods: dict = field(default_factory=lambda: dict(DEFAULT_DELTA_PERIODS))

    def __post_init__(self):
        if self.snapshot_interval_ticks < 1:
            raise ValueError("snapshot interval must be >= 1 tick")
        self.delta_periods = {AttributeId(k): int(v) for k, v in self.delta_periods.items()}
        if any(v < 1 for v in self.delta_periods.values()):
            raise ValueError("delta periods must be >= 1 tick")

    def due(self, attribute_id: AttributeId, tick: int) -> bool:
        period = self.delta_periods.get(attribute_id)
        return period is not None and tick % period == 0


@dataclass
class RigSpec:
    cameras: int = 6
    width: int = 64
    height: int = 64
    fov_y: float = math.pi / 2
    radius: float = 3.0
    focus_distance: float = 4.0
    near: float = 0.05
    far: float = 100.0

    def build(self, pose: Pose):
        """Dome of engine cameras around the point the viewer is looking at,
        so captures bracket the visible region from the viewer's side too."""
        focus = pose.position + pose.forward() * self.focus_distance
        return build_dome_rig(focus, heading_of(pose), self.cameras,
                              self.radius, self.width, self.height,
                              self.fov_y, self.near, self.far)


def heading_of(pose: Pose) -> float:
    """Azimuth of the camera's forward axis in the ground plane; 0 when the
    view direction has no horizontal component."""
    f = pose.forward()
    if abs(f[0]) + abs(f[2]) < 1e-9:
        return 0.0
    return float(math.atan2(f[2], f[0]))


@dataclass
class ServerConfig:
    scene_path: Optional[str] = None
    sh_degree: int = 2
    tick_rate_hz: float = 30.0
    seed: int = 0
    input_rig: RigSpec = field(default_factory=lambda: RigSpec(cameras=5, width=32, height=32))
    reference_rig: RigSpec = field(default_factory=lambda: RigSpec(cameras=4, radius=3.5))
    learning_rates: LearningRates = field(default_factory=LearningRates)
    optimizer_steps_per_tick: int = 2
    cell_size: float = 2.0
    expansion_radius: float = 10.0
    visibility_k: int = 2
    freeze_age: int = 40
    freeze_grad_ema: float = 2e-4
    prune_floor: float = 0.01
    lossless: bool = False
    schedule: StreamSchedule = field(default_factory=StreamSchedule)
    initial_position: tuple = (4.0, 2.5, 4.0)
    initial_target: tuple = (0.0, 0.5, 0.0)
    light_resolution: int = 128
    track_objects: bool = True
    relight: bool = True
    precull_optimizer: bool = True

    @property
    def profile(self):
        return PROFILE_LOSSLESS if self.lossless else PROFILE_DEFAULT

    def initial_pose(self) -> Pose:
        return look_at(np.asarray(self.initial_position, dtype=np.float64),
                       np.asarray(self.initial_target, dtype=np.float64))

    @classmethod
    def from_file(cls, path) -> "ServerConfig":
        path = Path(path)
        raw = yaml.safe_load(path.read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} is not a mapping")
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "ServerConfig":
        cfg = cls()
        scalars = ["sh_degree", "tick_rate_hz", "seed", "optimizer_steps_per_tick",
                   "cell_size", "expansion_radius", "visibility_k", "freeze_age",
                   "freeze_grad_ema", "prune_floor", "lossless", "light_resolution",
                   "track_objects", "relight", "precull_optimizer",
                   "initial_position", "initial_target"]
        unknown = set(raw) - set(scalars) - {"scene", "input_rig", "reference_rig",
                                             "learning_rates", "schedule"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in scalars:
            if key in raw:
                setattr(cfg, key, raw[key])
        if "scene" in raw:
            p = Path(raw["scene"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            cfg.scene_path = str(p)
        for rig_key in ("input_rig", "reference_rig"):
            if rig_key in raw:
                setattr(cfg, rig_key, RigSpec(**raw[rig_key]))
        if "learning_rates" in raw:
            cfg.learning_rates = LearningRates(**raw["learning_rates"])
        if "schedule" in raw:
            sched = dict(raw["schedule"])
            if "delta_periods" in sched:
                name_to_id = {a.name.lower(): a for a in AttributeId}
                sched["delta_periods"] = {name_to_id[k]: v
                                          for k, v in sched["delta_periods"].items()}
            cfg.schedule = StreamSchedule(**sched)
        cfg.validate()
        return cfg

    def validate(self):
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        if self.tick_rate_hz <= 0:
            raise ValueError("tick_rate_hz must be positive")
        if self.optimizer_steps_per_tick < 0:
            raise ValueError("optimizer_steps_per_tick must be >= 0")
        if self.input_rig.cameras < 1 or self.reference_rig.cameras < 1:
            raise ValueError("rigs need at least one camera")
        if not 0 <= self.prune_floor < 1:
            raise ValueError("prune_floor must be in [0, 1)")


@dataclass
class TickReport:
    tick: int
    loss: float
    count: int
    active_count: int
    appended: int
    frozen: int
    pruned: int
    moved_objects: list
    bytes_by_type: dict
    total_bytes: int
    snapshot: bool


class StreamServer:
    """Owns the model and the authoritative loop. One client at a time."""

    def __init__(self, config: ServerConfig, scene: Optional[SceneDescription] = None):
        if scene is None:
            if config.scene_path is None:
                raise ValueError("config has no scene and none was passed")
            scene = load_scene(config.scene_path)
        self.config = config
        self.scene = scene
        self.light = DirectionalLight(direction=scene.light.direction.copy(),
                                      intensity=scene.light.intensity.copy(),
                                      ambient=scene.light.ambient.copy())
        self.light_yaw_rate = 0.0

        lo, hi = scene.aabb(margin=0.25)
        self.bounds = (lo, hi)
        self.grid = GridIndex(config.cell_size, origin=lo)
        self.model = GaussianModel.empty(config.sh_degree)
        self.expansion = ExpansionState(grid=self.grid)
        self.scene_extent = float(np.linalg.norm(hi - lo) / 2)
        self.opt = OptimizerState(self.model, config.learning_rates,
                                  scene_extent=self.scene_extent)
        self.registry = ObjectRegistry()
        for oid, (q, t) in scene.transforms_at(0.0).items():
            self.registry.set_transform(oid, q, t)

        self.baselines = DeltaBaselines()
        self.epoch = 0
        self.transport = None
        self.parser = FrameParser()
        self.packet_log: list[tuple[int, int, int]] = []
        self.client_pose = config.initial_pose()
        self._tick_now = 0
        self._pending_snapshot = False
        self._synced = False
        self._last_light_sent = None
        self._last_vis_sent = None

    # -- session ------------------------------------------------------------

    def attach(self, transport) -> None:
        """Bind a client connection and queue the connect sequence: object-id
        map, full transforms, then an immediate snapshot on the next tick."""
        self.transport = transport
        self.parser = FrameParser()
        self._send(PacketType.OBJECT_ID_MAP, encode_object_id_map(self.model.object_ids))
        self._send(PacketType.OBJECT_TRANSFORMS,
                   encode_object_transforms(self.registry.transforms))
        self._pending_snapshot = True
        self._synced = False
        self._last_light_sent = None
        self._last_vis_sent = None

    def detach(self) -> None:
        self.transport = None
        self._synced = False

    def _send(self, ptype: PacketType, payload: bytes) -> None:
        buf = frame_bytes(ptype, self.epoch, payload)
        if self.transport is not None:
            self.transport.send(buf)
        self.packet_log.append((self._tick_now, int(ptype), len(buf)))

    def poll_incoming(self) -> None:
        """Drain client frames; the latest camera pose wins."""
        if self.transport is None:
            return
        data = self.transport.recv()
        if data:
            self.parser.feed(data)
        for frame in self.parser.frames():
            if frame.ptype != PacketType.CAMERA_POSE:
                continue
            try:
                pose, _ = decode_camera_pose(frame.payload)
            except ProtocolError:
                continue
            self.client_pose = pose

    def apply_event(self, event: str) -> None:
        name, arg = parse_event(event)
        if name == "light_rotate":
            self.light_yaw_rate = arg
        elif name == "light_intensity":
            self.light = DirectionalLight(direction=self.light.direction.copy(),
                                          intensity=arg, ambient=self.light.ambient.copy())

    # -- per-tick work ------------------------------------------------------

    def _advance_light(self, dt: float) -> None:
        if self.light_yaw_rate == 0.0:
            return
        ang = math.radians(self.light_yaw_rate) * dt
        c, s = math.cos(ang), math.sin(ang)
        d = self.light.direction
        rotated = np.array([c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]])
        self.light = DirectionalLight(direction=rotated,
                                      intensity=self.light.intensity.copy(),
                                      ambient=self.light.ambient.copy())

    def _light_state(self) -> LightState:
        return light_state_from_scene(self.light)

    def _apply_record(self, record) -> None:
        self.opt.resize(record)
        self.baselines.apply_record(record)
        self.registry.resize(record)

    def _emit_delta(self, attr: AttributeId) -> None:
        a = self.model.active_count
        if attr == AttributeId.MEANS:
            payload, new_base = encode_delta(attr, self.model.means[:a],
                                             self.baselines.means[:a])
            self.baselines.means[:a] = new_base
        elif attr == AttributeId.LOG_SCALES:
            payload, new_base = encode_delta(attr, self.model.log_scales[:a],
                                             self.baselines.log_scales[:a])
            self.baselines.log_scales[:a] = new_base
        elif attr == AttributeId.QUATERNIONS:
            payload, _ = encode_delta(attr, self.model.quaternions[:a])
        elif attr == AttributeId.LOGIT_OPACITIES:
            payload, _ = encode_delta(attr, self.model.logit_opacities[:a])
        elif attr == AttributeId.SH_DC:
            payload, _ = encode_delta(attr, self.model.sh_coeffs[:a, :, 0])
        elif attr == AttributeId.SH_REST:
            if self.model.sh_degree == 0:
                return
            payload, _ = encode_delta(attr, self.model.sh_coeffs[:a, :, 1:])
        else:
            raise ValueError(f"no delta path for {attr}")
        self._send(PacketType.TENSOR_DELTA, payload)

    def _dynamic_active_rows(self) -> np.ndarray:
        a = self.model.active_count
        return np.nonzero(self.model.object_ids[:a] > 0)[0]

    def tick(self, tick_index: int, events=()) -> TickReport:
        """One loop iteration; see the numbered stages inline."""
        cfg = self.config
        self._tick_now = tick_index
        log_start = len(self.packet_log)
        self.poll_incoming()
        for event in events:
            self.apply_event(event)
        dt = 1.0 / cfg.tick_rate_hz
        now = tick_index * dt

        # (1) scene animation and light motion
        self._advance_light(dt)
        transforms = self.scene.transforms_at(now)

        # (2) rigid object tracking
        moved = {}
        if cfg.track_objects:
            for oid, (q, t) in transforms.items():
                q0, t0 = self.registry.get_transform(oid)
                if not (np.array_equal(q, q0) and np.array_equal(t, t0)):
                    moved[oid] = (q, t)
            for oid, (q, t) in moved.items():
                self.registry.apply_transform(self.model, oid, q, t)
            if moved:
                self.grid.rebuild(self.model)
                self._send(PacketType.OBJECT_TRANSFORMS, encode_object_transforms(moved))

        # (3) lighting: state packet on change, shadow term refresh
        if cfg.relight:
            light_key = (self.light.direction.tobytes(), self.light.intensity.tobytes(),
                         self.light.ambient.tobytes())
            if light_key != self._last_light_sent:
                self._send(PacketType.LIGHT_STATE,
                           encode_light_state(self.light.direction, self.light.intensity,
                                              flat_ambient_sh(self.light.ambient)))
                self._last_light_sent = light_key
            if self.model.count:
                lcam = build_light_camera(*self.scene.aabb(transforms),
                                          self.light.direction, cfg.light_resolution)
                ldepth = render_ortho_depth(self.scene, lcam, transforms)
                update_light_visibility(self.model, ldepth, lcam)
                vis = self.model.light_visibility
                if self._last_vis_sent is None or not np.array_equal(vis, self._last_vis_sent):
                    self._send(PacketType.LIGHT_VISIBILITY, encode_light_visibility(vis))
                    self._last_vis_sent = vis.copy()

        # (4) model growth from fresh input captures
        in_poses, in_intr = cfg.input_rig.build(self.client_pose)
        buffers = [capture_input_buffers(self.scene, p, in_intr, self.light,
                                         transforms) for p in in_poses]
        samples = cull_input_samples(buffers)
        depths = [np.where(b.valid, b.depth, in_intr.far) for b in buffers]
        record, grown = expansion_pass(self.model, self.expansion, samples,
                                       self.client_pose.position, in_poses, in_intr,
                                       depths, cfg.expansion_radius, self.bounds,
                                       k=cfg.visibility_k)
        appended = grown[1] - grown[0]
        if record is not None:
            self._apply_record(record)
            self.registry.refresh_locals(self.model, np.arange(grown[0], grown[1]))
            self.epoch += 1
            self._send(PacketType.GAUSSIAN_ID_ORDERING, encode_ordering([record]))

        # (5) optimization against reference renders
        loss = float("nan")
        if cfg.optimizer_steps_per_tick and self.model.active_count:
            ref_poses, ref_intr = cfg.reference_rig.build(self.client_pose)
            light_state = self._light_state()
            views = [ReferenceView(pose=p, intrinsics=ref_intr,
                                   image=render_ground_truth(self.scene, p, ref_intr,
                                                             self.light, transforms),
                                   light_state=light_state,
                                   background=self.scene.background)
                     for p in ref_poses]
            subset = None
            if cfg.precull_optimizer:
                subset = precull(self.model, self.grid, ref_poses, ref_intr)
            for _ in range(cfg.optimizer_steps_per_tick):
                loss = step(self.model, self.opt, views, index_subset=subset)
            dyn = self._dynamic_active_rows()
            if dyn.size:
                self.registry.refresh_locals(self.model, dyn)
            self.grid.rebuild(self.model)

        # (6) pool maintenance
        records = []
        to_freeze = freeze_policy(self.model, self.opt, cfg.freeze_age, cfg.freeze_grad_ema)
        frozen = int(to_freeze.size)
        if frozen:
            rec = freeze_range(self.model, to_freeze)
            self._apply_record(rec)
            records.append(rec)
        pruned_rows, prune_rec = prune(self.model, cfg.prune_floor)
        pruned = int(len(pruned_rows))
        if prune_rec is not None:
            self._apply_record(prune_rec)
            records.append(prune_rec)
        if records:
            self.grid.rebuild(self.model)
            self.epoch += 1
            self._send(PacketType.GAUSSIAN_ID_ORDERING, encode_ordering(records))

        # (7) scheduled snapshot (or the connect-time one)
        snapshot = self._pending_snapshot or tick_index % cfg.schedule.snapshot_interval_ticks == 0
        if snapshot:
            self._pending_snapshot = False
            self.epoch += 1
            meta = TensorMetadata(
                count=self.model.count, active_count=self.model.active_count,
                sh_degree=self.model.sh_degree,
                attributes=[(AttributeId.MEANS, 3), (AttributeId.LOG_SCALES, 3),
                            (AttributeId.QUATERNIONS, 4), (AttributeId.LOGIT_OPACITIES, 1),
                            (AttributeId.SH_DC, 3),
                            (AttributeId.SH_REST, 3 * ((self.model.sh_degree + 1) ** 2 - 1)),
                            (AttributeId.LIGHT_VISIBILITY, 1)])
            self._send(PacketType.TENSOR_METADATA, encode_tensor_metadata(meta))
            payload = encode_snapshot(self.model, cfg.profile)
            self._send(PacketType.MODEL_SNAPSHOT, payload)
            decoded, _ = decode_snapshot(payload)
            self.baselines.reset_from_model(decoded, self.epoch)
            self._last_vis_sent = self.model.light_visibility.copy()
            self._synced = True

        # (8) scheduled per-attribute deltas; a tick that appended rows emits
        # every attribute so the new rows never render from placeholders
        if self._synced and self.model.active_count:
            for attr in DELTA_ORDER:
                if cfg.schedule.due(attr, tick_index) or appended:
                    self._emit_delta(attr)

        per_type: dict[int, int] = {}
        for _, ptype, nbytes in self.packet_log[log_start:]:
            per_type[ptype] = per_type.get(ptype, 0) + nbytes
        return TickReport(
            tick=tick_index, loss=loss, count=self.model.count,
            active_count=self.model.active_count, appended=appended,
            frozen=frozen, pruned=pruned, moved_objects=sorted(moved),
            bytes_by_type=per_type, total_bytes=sum(per_type.values()),
            snapshot=snapshot,
        )

    def render_view(self, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
        return render(self.model, pose, intr, self._light_state(),
                      background=self.scene.background)


@dataclass
class ReplayReport:
    tick_reports: list
    metric_ticks: list
    ssim_client_server: list
    ssim_server_gt: list
    ssim_client_gt: list
    packet_log: list
    tick_rate_hz: float
    transport_bytes: int
    first_snapshot_tick: int
    snapshot_ticks: list

    @property
    def bandwidth(self):
        return bandwidth_report(self.packet_log, tick_rate_hz=self.tick_rate_hz)

    def summary(self) -> dict:
        bw = self.bandwidth
        losses = [r.loss for r in self.tick_reports if not math.isnan(r.loss)]
        return {
            "ticks": len(self.tick_reports),
            "tick_rate_hz": self.tick_rate_hz,
            "total_bytes": bw.total_bytes,
            "transport_bytes": self.transport_bytes,
            "mean_bps": bw.mean_bps,
            "median_bps": bw.median_bps,
            "peak_bps": bw.peak_bps,
            "peak_to_median": bw.peak_to_median,
            "bytes_by_type": {int(k): int(v.sum()) for k, v in bw.per_type_bytes.items()},
            "final_count": self.tick_reports[-1].count if self.tick_reports else 0,
            "final_active": self.tick_reports[-1].active_count if self.tick_reports else 0,
            "final_loss": losses[-1] if losses else None,
            "snapshot_ticks": self.snapshot_ticks,
            "mean_ssim_client_server": float(np.mean(self.ssim_client_server))
            if self.ssim_client_server else None,
            "mean_ssim_server_gt": float(np.mean(self.ssim_server_gt))
            if self.ssim_server_gt else None,
            "mean_ssim_client_gt": float(np.mean(self.ssim_client_gt))
            if self.ssim_client_gt else None,
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ticks.csv", "w") as f:
            f.write("tick,loss,count,active,appended,frozen,pruned,bytes,snapshot\n")
            for r in self.tick_reports:
                f.write(f"{r.tick},{r.loss:.6g},{r.count},{r.active_count},"
                        f"{r.appended},{r.frozen},{r.pruned},{r.total_bytes},"
                        f"{int(r.snapshot)}\n")
        with open(out / "packets.csv", "w") as f:
            f.write("tick,packet_type,bytes\n")
            for tick, ptype, nbytes in self.packet_log:
                f.write(f"{tick},{ptype},{nbytes}\n")
        with open(out / "quality.csv", "w") as f:
            f.write("tick,ssim_client_server,ssim_server_gt,ssim_client_gt\n")
            for i, tick in enumerate(self.metric_ticks):
                f.write(f"{tick},{self.ssim_client_server[i]:.6f},"
                        f"{self.ssim_server_gt[i]:.6f},{self.ssim_client_gt[i]:.6f}\n")
        with open(out / "summary.json", "w") as f:
            json.dump(self.summary(), f, indent=1)


def run_replay(config: ServerConfig, trace, scene: Optional[SceneDescription] = None,
               metrics_every: int = 10, metric_rig: Optional[RigSpec] = None,
               progress=None) -> ReplayReport:
    """Deterministic headless session: a loopback client follows the trace,
    the server ticks once per trace row, and quality is sampled along the way."""
    from .client import StreamClient
    from .transport import LoopbackTransport

    server = StreamServer(config, scene)
    client = StreamClient()
    c_end, s_end = LoopbackTransport.pair()
    client.attach(c_end)
    server.attach(s_end)

    metric_rig = metric_rig or config.reference_rig
    metric_intr = CameraIntrinsics(width=metric_rig.width, height=metric_rig.height,
                                   fov_y=metric_rig.fov_y, near=metric_rig.near,
                                   far=metric_rig.far)
    reports = []
    metric_ticks, s_cs, s_sg, s_cg = [], [], [], []
    first_snapshot = -1
    snapshot_ticks = []

    for i, row in enumerate(trace):
        client.send_pose(row.pose)
        client.pump()
        report = server.tick(row.tick, row.events)
        client.pump()
        reports.append(report)
        if report.snapshot:
            snapshot_ticks.append(row.tick)
            if first_snapshot < 0:
                first_snapshot = row.tick
        measure = (i % max(1, metrics_every) == 0) or (i == len(trace) - 1) or report.snapshot
        if measure and first_snapshot >= 0:
            now = row.tick / config.tick_rate_hz
            transforms = server.scene.transforms_at(now)
            gt = render_ground_truth(server.scene, row.pose, metric_intr,
                                     server.light, transforms)
            server_img = server.render_view(row.pose, metric_intr)
            client_img, _ = client.render_view(row.pose, metric_intr,
                                               background=server.scene.background)
            metric_ticks.append(row.tick)
            s_cs.append(float(ssim(client_img, server_img)))
            s_sg.append(float(ssim(server_img, gt)))
            s_cg.append(float(ssim(client_img, gt)))
        if progress is not None:
            progress(i, len(trace), report)

    return ReplayReport(
        tick_reports=reports, metric_ticks=metric_ticks,
        ssim_client_server=s_cs, ssim_server_gt=s_sg, ssim_client_gt=s_cg,
        packet_log=list(server.packet_log), tick_rate_hz=config.tick_rate_hz,
        transport_bytes=s_end.bytes_sent, first_snapshot_tick=first_snapshot,
        snapshot_ticks=snapshot_ticks,
    )
