"""Session service tests: lifecycle, capture events, snapshots,
event-stream resumption, isolation, and log replay."""

import base64
import threading
import time

import httpx
import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient

from skysweep.errors import InvalidConfig, UnknownSession
from skysweep.scenesim import CameraNetworkPlan, NoiseConfig, RowPlan, SceneConfig
from skysweep.service import SessionService, create_app


def small_scene(seed=2, count=6):
    return SceneConfig(
        plan=CameraNetworkPlan(rows=[RowPlan(4.0, 2.0, count)]),
        noise=NoiseConfig(sigma_px=0.3, outlier_rate=0.05),
        seed=seed,
    )


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    return SessionService(log_dir=tmp_path_factory.mktemp("logs"))


@pytest.fixture(scope="module")
def client(service):
    return TestClient(create_app(service))


@pytest.fixture(scope="module")
def live(service, client):
    r = client.post(
        "/sessions",
        json={"rows": [{"distance_m": 4.0, "height_m": 2.0, "count": 6}], "seed": 2,
              "sigma_px": 0.3, "outlier_rate": 0.05},
    )
    assert r.status_code == 200
    sid = r.json()["session_id"]
    rec = service.sessions[sid]
    # integrate two more planned views so a surface exists
    for pose in rec.planned_poses[2:4]:
        r2 = client.post(
            f"/sessions/{sid}/capture", json={"pose": {"q": list(pose.q), "t": list(pose.t)}}
        )
        assert r2.status_code == 200
        assert r2.json()["payload"]["status"] == "Localized"
    return sid, rec


class TestLifecycle:
    def test_create_bootstraps_two_cameras(self, live):
        _sid, rec = live
        assert rec.events[0]["payload"]["n_cameras"] == 2
        assert rec.events[0]["payload"]["n_points"] > 50

    def test_empty_plan_rejected(self, client):
        r = client.post("/sessions", json={"rows": []})
        assert r.status_code == 400
        assert r.json()["error"] == "InvalidConfig"

    def test_unknown_session_404(self, client):
        for path in ("/sessions/nope/report", "/sessions/nope/snapshot"):
            r = client.get(path)
            assert r.status_code == 404
            assert r.json()["error"] == "UnknownSession"

    def test_sessions_are_isolated(self, service):
        a = service.create_session(small_scene(seed=5))
        b = service.create_session(small_scene(seed=6))
        before = b.session.map_hash()
        service.capture(a.id, a.planned_poses[2])
        assert b.session.map_hash() == before
        assert b.last_seq == 1


class TestCapture:
    def test_seq_increments_by_one(self, live, client):
        sid, rec = live
        start = rec.last_seq
        pose = rec.planned_poses[4]
        r = client.post(
            f"/sessions/{sid}/capture", json={"pose": {"q": list(pose.q), "t": list(pose.t)}}
        )
        assert r.json()["seq"] == start + 1

    def test_pose_via_look_at(self, live, client):
        sid, rec = live
        p = rec.planned_poses[5]
        c = p.center
        r = client.post(
            f"/sessions/{sid}/capture",
            json={"pose": {"position": list(map(float, c)), "look_at": [float(c[0]), 0.0, float(c[2])]}},
        )
        assert r.status_code == 200
        assert r.json()["payload"]["status"] == "Localized"

    def test_facing_away_not_localized_and_state_unchanged(self, live, client):
        sid, rec = live
        before = rec.session.map_hash()
        r = client.post(
            f"/sessions/{sid}/capture",
            json={"pose": {"position": [6.0, 4.0, 2.0], "look_at": [6.0, 40.0, 2.0]}},
        )
        assert r.json()["payload"]["status"] == "NotLocalized"
        assert rec.session.map_hash() == before
        assert r.json()["payload"]["mesh_stale"] is False


class TestSnapshot:
    def test_geometry_decodes(self, live, client):
        sid, _rec = live
        j = client.get(f"/sessions/{sid}/snapshot").json()
        verts = np.frombuffer(base64.b64decode(j["vertices_b64"]), dtype="<f4")
        faces = np.frombuffer(base64.b64decode(j["faces_b64"]), dtype="<u4")
        assert len(verts) == 3 * j["n_vertices"]
        assert len(faces) == 3 * j["n_faces"]
        if j["n_faces"]:
            assert faces.max() < j["n_vertices"]
        assert j["overlay"] is None
        assert j["color_tables"]["redundancy"]["saturation"] == 30

    def test_overlay_kinds(self, live, client):
        sid, _rec = live
        for kind in ("gsd", "redundancy"):
            j = client.get(f"/sessions/{sid}/snapshot?overlay={kind}").json()
            ov = j["overlay"]
            assert ov["kind"] == kind
            vals = np.frombuffer(base64.b64decode(ov["values_b64"]), dtype="<f4")
            assert len(vals) == j["n_faces"]
            if kind == "gsd":
                assert ov["scale"]["hi"] > ov["scale"]["lo"] > 0

    def test_bad_overlay_rejected(self, live, client):
        sid, _rec = live
        r = client.get(f"/sessions/{sid}/snapshot?overlay=bogus")
        assert r.status_code == 400

    def test_repeated_snapshot_identical(self, live, client):
        sid, _rec = live
        a = client.get(f"/sessions/{sid}/snapshot?overlay=gsd")
        b = client.get(f"/sessions/{sid}/snapshot?overlay=gsd")
        assert a.content == b.content


@pytest.fixture(scope="module")
def sse_base(service, live):
    # the bundled test client buffers whole responses, so the
    # never-ending event stream needs a real server
    config = uvicorn.Config(create_app(service), host="127.0.0.1", port=0, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    host, port = server.servers[0].sockets[0].getsockname()[:2]
    yield f"http://{host}:{port}"
    server.should_exit = True
    thread.join(timeout=10)


def collect_event_ids(base, sid, stop_at, *, since=None, last_event_id=None):
    url = f"{base}/sessions/{sid}/events"
    if since is not None:
        url += f"?since={since}"
    headers = {"Last-Event-ID": str(last_event_id)} if last_event_id is not None else {}
    ids = []
    with httpx.stream("GET", url, headers=headers, timeout=10.0) as resp:
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("text/event-stream")
        for line in resp.iter_lines():
            if line.startswith("id: "):
                ids.append(int(line[4:]))
                if ids[-1] >= stop_at:
                    break
    return ids


class TestEvents:
    def test_seq_gap_free(self, live):
        _sid, rec = live
        seqs = [e["seq"] for e in rec.events]
        assert seqs == list(range(1, len(seqs) + 1))

    def test_stream_replays_from_since(self, live, sse_base):
        sid, rec = live
        ids = collect_event_ids(sse_base, sid, rec.last_seq, since=1)
        assert ids == list(range(2, rec.last_seq + 1))

    def test_stream_honors_last_event_id(self, live, sse_base):
        sid, rec = live
        ids = collect_event_ids(sse_base, sid, rec.last_seq, last_event_id=rec.last_seq - 1)
        assert ids == [rec.last_seq]


class TestPersistence:
    def test_log_replay_reproduces_hash(self, service, live):
        sid, rec = live
        fresh = SessionService(log_dir=None)
        rec2 = fresh.resume_log(service.log_dir / f"{sid}.jsonl")
        assert rec2.session.map_hash() == rec.session.map_hash()
        assert rec2.last_seq == rec.last_seq

    def test_resume_logs_scans_directory(self, service, live):
        fresh = SessionService(log_dir=None)
        records = fresh.resume_logs(service.log_dir)
        assert any(r.id == live[0] for r in records)
