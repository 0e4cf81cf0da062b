"""Command-line workflows end to end on a miniature scene."""

import json
import socket
import threading
import time

import numpy as np
import pytest
import yaml

from splatstream.cli import main
from splatstream.scene import save_scene
from splatstream.traces import TraceRow, save_trace, orbit_trace

from test_server import small_scene


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_scene(root / "scene.yaml", small_scene())
    cfg = {
        "scene": "scene.yaml",
        "sh_degree": 1,
        "tick_rate_hz": 120.0,
        "optimizer_steps_per_tick": 1,
        "light_resolution": 48,
        "input_rig": {"cameras": 3, "width": 24, "height": 24},
        "reference_rig": {"cameras": 2, "width": 32, "height": 32, "radius": 3.0},
        "schedule": {"snapshot_interval_ticks": 6},
        "initial_position": [3.0, 2.0, 3.0],
        "initial_target": [0.0, 0.4, 0.0],
    }
    (root / "config.yaml").write_text(yaml.safe_dump(cfg))
    save_trace(root / "orbit.csv",
               orbit_trace(12, center=[0, 0.4, 0], radius=4.0, height=2.0))
    return root


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_replay_reports(workspace, tmp_path):
    out = tmp_path / "rep"
    rc = main(["replay", "--config", str(workspace / "config.yaml"),
               "--trace", str(workspace / "orbit.csv"),
               "--out", str(out), "--metrics-every", "4"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["ticks"] == 13
    assert summary["snapshot_ticks"][0] == 0
    assert summary["total_bytes"] == sum(summary["bytes_by_type"].values())
    assert summary["transport_bytes"] == summary["total_bytes"]
    assert 0.0 <= summary["ssim_client_server_min"] <= 1.0
    metrics = (out / "metrics.csv").read_text().strip().splitlines()
    assert metrics[0].startswith("tick,")
    assert len(metrics) >= 4
    bytes_rows = (out / "bytes.csv").read_text().strip().splitlines()
    assert len(bytes_rows) == 14  # header + one row per tick
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "replay"
    assert len(manifest["config_hash"]) == 64
    assert "numpy" in manifest["versions"]


def test_replay_is_reproducible(workspace, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["replay", "--config", str(workspace / "config.yaml"),
                     "--trace", str(workspace / "orbit.csv"),
                     "--out", str(out), "--metrics-every", "5"]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_plot_is_deterministic(workspace, tmp_path):
    rep = tmp_path / "rep"
    main(["replay", "--config", str(workspace / "config.yaml"),
          "--trace", str(workspace / "orbit.csv"),
          "--out", str(rep), "--metrics-every", "4"])
    svgs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        rc = main(["plot", str(rep / "metrics.csv"), str(rep / "bytes.csv"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "metrics.svg").exists()
        assert (out / "bytes.svg").exists()
        svgs.append((out / "metrics.svg").read_bytes())
    assert svgs[0] == svgs[1]
    assert b"<svg" in svgs[0][:200]


def test_plot_rejects_ragged_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("tick,a,b\n0,1,2\n1,3\n")
    assert main(["plot", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_bench_series(workspace, tmp_path):
    out = tmp_path / "bench"
    rc = main(["bench", "--config", str(workspace / "config.yaml"),
               "--seconds", "1.5", "--out", str(out)])
    assert rc == 0
    rows = (out / "bench.csv").read_text().strip().splitlines()
    assert rows[0].split(",")[0] == "second"
    assert len(rows) >= 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seconds"] >= 1
    assert summary["steps_per_s_last"] > 0
    assert summary["final_total"] > 0


def test_warp_baseline_table(workspace, tmp_path):
    out = tmp_path / "warp"
    rc = main(["warp-baseline", "--scene", str(workspace / "scene.yaml"),
               "--rig", "cameras=3,width=48,height=48,radius=3.0",
               "--bits", "16,12", "--targets", "3",
               "--out", str(out)])
    assert rc == 0
    rows = (out / "comparison.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    assert "warp16_ssim" in header and "warp12_ssim" in header
    assert len(rows) == 4
    values = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    assert np.isfinite(values).all()


def test_serve_and_headless_view(workspace, tmp_path):
    port = free_port()
    server = threading.Thread(
        target=main,
        args=(["serve", "--config", str(workspace / "config.yaml"),
               "--listen", f"127.0.0.1:{port}", "--ticks", "120"],),
        daemon=True)
    server.start()
    deadline = time.time() + 10
    while time.time() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            break
        except OSError:
            time.sleep(0.05)
    else:
        pytest.fail("server never came up")

    out = tmp_path / "view"
    rc = main(["view", "--connect", f"127.0.0.1:{port}", "--headless",
               "--pose-trace", str(workspace / "orbit.csv"),
               "--scene", str(workspace / "scene.yaml"),
               "--out", str(out), "--width", "32", "--height", "32",
               "--rate", "60"])
    assert rc == 0
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 13
    metrics = (out / "metrics.csv").read_text().strip().splitlines()
    assert metrics[0] == "tick,ready,ssim"
    ready = [row.split(",")[1] for row in metrics[1:]]
    assert ready[-1] == "1"  # model arrived during the run
    stats = json.loads((out / "stats.json").read_text())
    assert stats["snapshots_applied"] >= 1
    assert "MODEL_SNAPSHOT" in stats["received_by_type"]
    # the serve thread idles in accept() afterwards; it is a daemon


def test_view_without_headless_fails(workspace):
    assert main(["view", "--connect", "127.0.0.1:1"]) == 2


def test_unknown_config_key_exits_2(workspace, tmp_path):
    raw = yaml.safe_load((workspace / "config.yaml").read_text())
    raw["turbo"] = True
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(raw))
    assert main(["replay", "--config", str(bad),
                 "--trace", str(workspace / "orbit.csv"),
                 "--out", str(tmp_path / "o")]) == 2


def test_missing_trace_exits_2(workspace, tmp_path):
    assert main(["replay", "--config", str(workspace / "config.yaml"),
                 "--trace", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "o")]) == 2


def test_bundled_names_resolve(tmp_path):
    # bundled config and trace names work without paths
    out = tmp_path / "rep"
    rc = main(["replay", "--config", "config_dynamics.yaml",
               "--trace", "dynamics100.csv", "--out", str(out),
               "--metrics-every", "100"])
    assert rc == 0


def test_websocket_bridge_upgrade(workspace):
    import base64

    sport = free_port()
    server = threading.Thread(
        target=main,
        args=(["serve", "--config", str(workspace / "config.yaml"),
               "--listen", f"127.0.0.1:{sport}", "--ticks", "240"],),
        daemon=True)
    server.start()
    wport = free_port()
    bridge = threading.Thread(
        target=main,
        args=(["view", "--connect", f"127.0.0.1:{sport}",
               "--ws-listen", f"127.0.0.1:{wport}"],),
        daemon=True)
    bridge.start()
    deadline = time.time() + 10
    while time.time() < deadline:
        try:
            s = socket.create_connection(("127.0.0.1", wport), timeout=0.2)
            break
        except OSError:
            time.sleep(0.05)
    else:
        pytest.fail("bridge never came up")
    key = base64.b64encode(b"0123456789abcdef").decode()
    s.sendall((f"GET /ws HTTP/1.1\r\nHost: t\r\nUpgrade: websocket\r\n"
               f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
               f"Sec-WebSocket-Version: 13\r\n\r\n").encode())
    head = b""
    while b"\r\n\r\n" not in head:
        head += s.recv(4096)
    assert head.startswith(b"HTTP/1.1 101")
    # first streamed message must be a binary frame that starts with the
    # wire magic
    body = head.split(b"\r\n\r\n", 1)[1]
    while len(body) < 4:
        body += s.recv(4096)
    assert body[0] == 0x82
    plen = body[1] & 0x7F
    offset = 2 + (2 if plen == 126 else 8 if plen == 127 else 0)
    while len(body) < offset + 2:
        body += s.recv(4096)
    assert body[offset:offset + 2] == b"GS"
    s.close()
