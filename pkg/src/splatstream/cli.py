"""Command-line front end: one binary, six subcommands.

    serve          run the authoritative server on a TCP port
    view           connect as a client (headless capture or WebSocket bridge)
    replay         deterministic offline session from a camera trace
    warp-baseline  depth-warp comparison CSV over a ring of reference frames
    bench          performance series from a static hold or exploration trace
    plot           deterministic charts from any CSV the other commands write

Every subcommand that fills an output directory drops a manifest.json there
(config hash, seed, versions, output names). Exit codes: 0 success, 2 invalid
input or config with a one-line diagnostic on stderr, 1 runtime failure.
SPLATSTREAM_LOG sets verbosity (DEBUG, INFO, WARNING, ERROR).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .engine import render_ground_truth
from .geometry import CameraIntrinsics, look_at
from .metrics import ssim
from .protocol.framing import PacketType, ProtocolError
from .scene import load_scene
from .server import ServerConfig, StreamServer, run_replay
from .traces import load_trace
from .transport import TcpListener, TcpTransport, TransportClosed

log = logging.getLogger("splatstream.cli")


class CliError(ValueError):
    """Invalid invocation or config; main() turns this into exit code 2."""


# -- shared plumbing ----------------------------------------------------------

def _setup_logging() -> None:
    name = os.environ.get("SPLATSTREAM_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _host_port(text: str, default_port: int) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        host, port = port, ""
    try:
        return host, int(port) if port else default_port
    except ValueError:
        raise CliError(f"bad address {text!r}, want host:port")


def _resolve_input(path: str) -> Path:
    """Accept a real path or the bare name of a bundled data file."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("splatstream.data") / p.name
    if p.name == path and bundled.is_file():
        return Path(str(bundled))
    raise CliError(f"no such file: {path}")


@dataclass
class RunManifest:
    """Provenance record written next to every artifact set."""

    command: str
    config_hash: str
    seed: int
    versions: dict
    outputs: list = field(default_factory=list)

    @staticmethod
    def build(command: str, seed: int, outputs, input_files=(), extra: str = "") -> "RunManifest":
        h = hashlib.sha256()
        for f in input_files:
            h.update(Path(f).read_bytes())
        h.update(extra.encode())
        import scipy
        return RunManifest(
            command=command, config_hash=h.hexdigest(), seed=int(seed),
            versions={"splatstream": __version__, "numpy": np.__version__,
                      "scipy": scipy.__version__,
                      "python": ".".join(map(str, sys.version_info[:3]))},
            outputs=sorted(str(o) for o in outputs),
        )

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def memory_bytes(model, opt) -> int:
    """Bytes held per replica: attribute tensors for every row plus Adam
    moments, age, and gradient EMA for the active rows."""
    attrs = (model.means.nbytes + model.log_scales.nbytes + model.quaternions.nbytes
             + model.logit_opacities.nbytes + model.sh_coeffs.nbytes
             + model.light_visibility.nbytes + model.object_ids.nbytes)
    state = sum(a.nbytes for a in opt.m.values()) + sum(a.nbytes for a in opt.v.values())
    return attrs + state + opt.age.nbytes + opt.grad_ema.nbytes


# -- serve --------------------------------------------------------------------

def cmd_serve(args) -> None:
    cfg = ServerConfig.from_file(_resolve_input(args.config))
    host, port = _host_port(args.listen, 7788)
    server = StreamServer(cfg)
    listener = TcpListener(host, port)
    print(f"serving on {listener.address[0]}:{listener.address[1]}", flush=True)
    tick = 0
    try:
        while args.ticks is None or tick < args.ticks:
            conn = listener.accept()
            start = time.monotonic()
            served = 0
            try:
                # a client may vanish while the attach packets flush, so the
                # handshake lives inside the disconnect handler too
                server.attach(conn)
                log.info("client connected")
                while args.ticks is None or tick < args.ticks:
                    server.tick(tick)
                    tick += 1
                    served += 1
                    lag = start + served / cfg.tick_rate_hz - time.monotonic()
                    if lag > 0:
                        time.sleep(lag)
            except TransportClosed:
                server.detach()
                log.info("client left after tick %d", tick)
    finally:
        listener.close()


# -- view ---------------------------------------------------------------------

def cmd_view(args) -> None:
    host, port = _host_port(args.connect, 7788)
    if args.ws_listen:
        from .wsbridge import run_bridge
        ws_host, ws_port = _host_port(args.ws_listen, 8080)
        run_bridge((host, port), (ws_host, ws_port), assets=args.assets)
        return
    if not args.headless:
        raise CliError("no interactive terminal mode; use --headless or --ws-listen")
    if not args.pose_trace or not args.out:
        raise CliError("--headless needs --pose-trace and --out")

    from PIL import Image
    from .client import StreamClient

    rows = load_trace(_resolve_input(args.pose_trace))
    out = _out_dir(args.out)
    scene = load_scene(_resolve_input(args.scene)) if args.scene else None
    background = tuple(scene.background) if scene is not None else (0.0, 0.0, 0.0)
    intr = CameraIntrinsics(width=args.width, height=args.height,
                            fov_y=np.deg2rad(args.fov), near=0.05, far=100.0)
    client = StreamClient()
    client.attach(TcpTransport.connect(host, port))

    period = 1.0 / args.rate
    metrics = []
    outputs = []
    for i, row in enumerate(rows):
        client.send_pose(row.pose)
        deadline = time.monotonic() + period
        while True:
            client.pump()
            wait = deadline - time.monotonic()
            if wait <= 0:
                break
            time.sleep(min(wait, 0.005))
        img, ready = client.render_view(row.pose, intr, background=background)
        name = f"frame_{i:04d}.png"
        Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).save(out / name)
        outputs.append(name)
        entry = [row.tick, int(ready)]
        if scene is not None:
            gt = render_ground_truth(scene, row.pose, intr,
                                     transforms=scene.transforms_at(row.tick / args.rate))
            entry.append(f"{ssim(img, gt):.6f}")
        metrics.append(entry)

    header = ["tick", "ready"] + (["ssim"] if scene is not None else [])
    _write_csv(out / "metrics.csv", header, metrics)
    stats = asdict(client.stats)
    stats["received_by_type"] = {PacketType(k).name: v
                                 for k, v in stats["received_by_type"].items()}
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    outputs += ["metrics.csv", "stats.json"]
    files = [_resolve_input(args.pose_trace)] + ([_resolve_input(args.scene)] if args.scene else [])
    RunManifest.build("view", 0, outputs, files, extra=args.connect).write(out)
    print(f"wrote {len(rows)} frames to {out}", flush=True)


# -- replay -------------------------------------------------------------------

def cmd_replay(args) -> None:
    cfg_path = _resolve_input(args.config)
    cfg = ServerConfig.from_file(cfg_path)
    trace_path = _resolve_input(args.trace)
    trace = load_trace(trace_path)
    out = _out_dir(args.out)

    t0 = time.monotonic()
    def progress(i, total, report):
        if i % 25 == 0:
            log.info("tick %d/%d loss %.4f count %d", i, total, report.loss, report.count)
    rep = run_replay(cfg, trace, metrics_every=args.metrics_every, progress=progress)
    elapsed = time.monotonic() - t0

    _write_csv(out / "metrics.csv",
               ["tick", "ssim_client_server", "ssim_server_gt", "ssim_client_gt"],
               [[t, f"{a:.6f}", f"{b:.6f}", f"{c:.6f}"]
                for t, a, b, c in zip(rep.metric_ticks, rep.ssim_client_server,
                                      rep.ssim_server_gt, rep.ssim_client_gt)])
    _write_csv(out / "bytes.csv",
               ["tick", "total_bytes", "snapshot", "count", "active", "frozen"],
               [[r.tick, r.total_bytes, int(r.snapshot), r.count, r.active_count, r.frozen]
                for r in rep.tick_reports])

    bw = rep.bandwidth
    first = rep.first_snapshot_tick
    cs = [s for t, s in zip(rep.metric_ticks, rep.ssim_client_server) if t >= first >= 0]
    last = rep.tick_reports[-1]
    summary = {
        "ticks": len(rep.tick_reports), "elapsed_s": round(elapsed, 3),
        "first_snapshot_tick": first, "snapshot_ticks": rep.snapshot_ticks,
        "transport_bytes": rep.transport_bytes, "total_bytes": bw.total_bytes,
        "mean_bps": bw.mean_bps, "median_bps": bw.median_bps, "peak_bps": bw.peak_bps,
        "bytes_by_type": {PacketType(k).name: int(v.sum())
                          for k, v in bw.per_type_bytes.items()},
        "ssim_client_server_min": min(cs) if cs else None,
        "ssim_client_server_mean": float(np.mean(cs)) if cs else None,
        "final_count": last.count, "final_active": last.active_count,
        "final_frozen": last.frozen,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    RunManifest.build("replay", cfg.seed, ["metrics.csv", "bytes.csv", "summary.json"],
                      [cfg_path, trace_path]).write(out)
    print(f"replayed {len(trace)} ticks in {elapsed:.1f}s; "
          f"min client/server ssim {summary['ssim_client_server_min']}", flush=True)


# -- warp-baseline ------------------------------------------------------------

RIG_DEFAULTS = {"cameras": 4, "width": 96, "height": 96, "fov": 70.0,
                "radius": 3.2, "elevation": 1.6, "near": 0.05, "far": 50.0}


def _parse_rig(text: str) -> dict:
    params = dict(RIG_DEFAULTS)
    if text:
        for item in text.split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in params:
                raise CliError(f"unknown rig parameter {key!r}; "
                               f"known: {', '.join(sorted(params))}")
            kind = type(params[key])
            params[key] = kind(val)
    return params


def cmd_warp_baseline(args) -> None:
    from .warp import capture_depth_frame, ring_poses, warp_comparison

    scene_path = _resolve_input(args.scene)
    scene = load_scene(scene_path)
    rig = _parse_rig(args.rig)
    bits = [int(b) for b in args.bits.split(",")]
    if not bits or any(not 1 <= b <= 32 for b in bits):
        raise CliError(f"bad --bits {args.bits!r}")
    out = _out_dir(args.out)

    lo, hi = scene.aabb(margin=0.0)
    center = (lo + hi) / 2
    intr = CameraIntrinsics(width=rig["width"], height=rig["height"],
                            fov_y=np.deg2rad(rig["fov"]),
                            near=rig["near"], far=rig["far"])
    sources = ring_poses(center, rig["radius"], rig["elevation"], rig["cameras"])
    frames_by_bits = {b: [capture_depth_frame(scene, p, intr, depth_bits=b)
                          for p in sources] for b in bits}

    rng = np.random.default_rng(args.seed)
    targets = []
    for _ in range(args.targets):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rig["radius"] * rng.uniform(0.8, 1.2)
        height = rig["elevation"] * rng.uniform(0.7, 1.3)
        eye = center + np.array([rad * np.cos(ang), height, rad * np.sin(ang)])
        targets.append(look_at(eye, center + rng.uniform(-0.2, 0.2, 3)))

    rows = warp_comparison(scene, frames_by_bits, targets, intr)
    header = list(rows[0].keys())
    _write_csv(out / "comparison.csv", header,
               [[row["view"]] + [f"{row[k]:.6f}" for k in header[1:]] for row in rows])
    RunManifest.build("warp-baseline", args.seed, ["comparison.csv"], [scene_path],
                      extra=f"{args.rig}|{args.bits}|{args.targets}").write(out)
    for b in bits:
        mean = float(np.mean([r[f"warp{b}_ssim"] for r in rows]))
        print(f"warp {b:2d}-bit mean ssim {mean:.4f}", flush=True)


# -- bench --------------------------------------------------------------------

def bench_run(cfg: ServerConfig, trace=None, seconds: float = 10.0,
              max_ticks=None) -> tuple[list[dict], StreamServer]:
    """Tick a transportless server and bucket throughput per wall second."""
    server = StreamServer(cfg)
    probe_intr = CameraIntrinsics(width=64, height=64, fov_y=np.deg2rad(70),
                                  near=0.05, far=100.0)
    rows = []
    start = bucket_start = time.monotonic()
    bucket_ticks = 0
    i = 0
    while True:
        if trace is not None and i >= len(trace):
            break
        if max_ticks is not None and i >= max_ticks:
            break
        if time.monotonic() - start >= seconds:
            break
        if trace is not None:
            server.client_pose = trace[i].pose
            events = trace[i].events
        else:
            events = ()
        report = server.tick(i, events)
        bucket_ticks += 1
        i += 1
        now = time.monotonic()
        if now - bucket_start >= 1.0:
            dt = now - bucket_start
            t0 = time.perf_counter()
            server.render_view(server.client_pose, probe_intr)
            render_ms = (time.perf_counter() - t0) * 1e3
            rows.append({
                "second": len(rows), "ticks": bucket_ticks,
                "steps_per_s": bucket_ticks * cfg.optimizer_steps_per_tick / dt,
                "views_per_s": bucket_ticks * cfg.optimizer_steps_per_tick
                               * cfg.reference_rig.cameras / dt,
                "render_ms": render_ms,
                "total": report.count, "active": report.active_count,
                "frozen": report.frozen,
                "memory_bytes": memory_bytes(server.model, server.opt),
            })
            bucket_start = time.monotonic()
            bucket_ticks = 0
    return rows, server


def cmd_bench(args) -> None:
    cfg_path = _resolve_input(args.config)
    cfg = ServerConfig.from_file(cfg_path)
    trace = load_trace(_resolve_input(args.trace)) if args.trace else None
    out = _out_dir(args.out)

    rows, server = bench_run(cfg, trace, seconds=args.seconds)
    if not rows:
        raise CliError("bench finished before the first one-second bucket; "
                       "raise --seconds")
    header = list(rows[0].keys())
    _write_csv(out / "bench.csv", header,
               [[r["second"], r["ticks"]] + [f"{r[k]:.3f}" for k in header[2:5]]
                + [r[k] for k in header[5:]] for r in rows])
    summary = {
        "seconds": len(rows),
        "steps_per_s_first": rows[0]["steps_per_s"],
        "steps_per_s_last": rows[-1]["steps_per_s"],
        "final_total": rows[-1]["total"], "final_active": rows[-1]["active"],
        "final_frozen": rows[-1]["frozen"],
        "final_memory_bytes": rows[-1]["memory_bytes"],
        "packet_bytes": sum(e[2] for e in server.packet_log),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    files = [cfg_path] + ([_resolve_input(args.trace)] if args.trace else [])
    RunManifest.build("bench", cfg.seed, ["bench.csv", "summary.json"], files).write(out)
    print(f"bench: {len(rows)}s, {rows[-1]['total']} gaussians "
          f"({rows[-1]['frozen']} frozen), {rows[-1]['steps_per_s']:.2f} steps/s",
          flush=True)


# -- plot ---------------------------------------------------------------------

def plot_csv(csv_path: Path, out_path: Path) -> None:
    """One deterministic SVG per CSV: every numeric column as a line against
    the first column. Inputs with a `ssim` column get a [0, 1] axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "splatstream"

    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"{csv_path} is empty")
        data = list(reader)
    for i, row in enumerate(data):
        if len(row) != len(header):
            raise CliError(f"{csv_path} row {i + 2} has {len(row)} fields, "
                           f"header has {len(header)}")
    cols = {name: np.array([float(row[j]) for row in data])
            for j, name in enumerate(header)}

    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    x_name = header[0]
    for name in header[1:]:
        ax.plot(cols[x_name], cols[name], label=name, linewidth=1.2)
    ax.set_xlabel(x_name)
    ax.set_title(csv_path.stem)
    if any("ssim" in name for name in header[1:]):
        ax.set_ylim(0.0, 1.05)
    if len(header) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args) -> None:
    out = _out_dir(args.out)
    outputs = []
    for name in args.inputs:
        src = Path(name)
        if not src.exists():
            raise CliError(f"no such report: {src}")
        dst = out / (src.stem + ".svg")
        plot_csv(src, dst)
        outputs.append(dst.name)
        print(f"wrote {dst}", flush=True)
    RunManifest.build("plot", 0, outputs, [Path(n) for n in args.inputs]).write(out)


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="Online splat scene streaming: server, clients, baselines, reports.",
        epilog="Exit codes: 0 success, 2 invalid input/config, 1 runtime failure. "
               "Set SPLATSTREAM_LOG=INFO (or DEBUG) for progress logs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the authoritative server over TCP")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", default="127.0.0.1:7788")
    p.add_argument("--ticks", type=int, default=None,
                   help="stop after this many ticks (default: run forever)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("view", help="connect to a server as a client")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--headless", action="store_true")
    p.add_argument("--pose-trace", help="camera trace CSV to follow")
    p.add_argument("--out", help="directory for frames and metrics")
    p.add_argument("--scene", help="scene file for reference comparisons")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--fov", type=float, default=70.0)
    p.add_argument("--rate", type=float, default=30.0, help="pose send rate (Hz)")
    p.add_argument("--ws-listen", metavar="HOST:PORT",
                   help="bridge the stream onto a WebSocket and serve viewer assets")
    p.add_argument("--assets", help="static directory for the web viewer")
    p.set_defaults(func=cmd_view)

    p = sub.add_parser("replay", help="deterministic offline session from a trace")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-every", type=int, default=10)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("warp-baseline", help="depth-warp quality comparison CSV")
    p.add_argument("--scene", required=True)
    p.add_argument("--rig", default="", metavar="K=V,...",
                   help=f"rig overrides, defaults {RIG_DEFAULTS}")
    p.add_argument("--bits", default="16,12", help="depth precisions to compare")
    p.add_argument("--targets", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp_baseline)

    p = sub.add_parser("bench", help="per-second performance series")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", help="exploration trace (default: static hold)")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render charts from report CSVs")
    p.add_argument("inputs", nargs="+", metavar="CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, FileNotFoundError, ProtocolError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConnectionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
