"""HTTP session service for the closed acquisition loop.

Endpoints (JSON over HTTP, one ordered server-sent event stream per
session for push updates):

- ``POST /sessions`` — create a session: instantiate the scene
  simulator and bootstrap the map from the plan's first two poses.
- ``POST /sessions/{id}/capture`` — synthesize an image at the
  requested pose and integrate it; emits an IntegrationEvent.
- ``GET /sessions/{id}/snapshot?overlay=gsd|redundancy|none`` —
  immutable mesh snapshot; geometry as base64 little-endian arrays.
- ``GET /sessions/{id}/events?since=N`` — server-sent events, gap-free
  sequence numbers, resumable from any past seq.
- ``GET /sessions/{id}/report`` — per-image integration reports and
  map summary.

State is persisted as an append-only JSONL event log per session
(``SKYS_LOG_DIR``); replaying a log through ``resume_logs`` rebuilds
the identical session (seeded determinism end to end). Within a
session all mutation is serialized by a lock; snapshots are immutable
values safe to serve concurrently.
"""

from __future__ import annotations

import asyncio
import base64
import json
import os
import threading
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from .errors import InvalidConfig, SkysweepError, UnknownSession
from .geometry import Pose
from .pipeline import PipelineConfig, Session
from .quality import color_tables
from .scenesim import (
    CameraNetworkPlan,
    ImageFeatures,
    NoiseConfig,
    RowPlan,
    SceneConfig,
    default_gcps,
    generate_facade,
    generate_network,
    synthesize_observations,
)

PROTOCOL_VERSION = 1
DEFAULT_PORT = 8080

SSE_HEARTBEAT_S = 15.0
SSE_POLL_S = 0.1


# ---------------------------------------------------------------------------
# wire schemas


class RowSpec(BaseModel):
    distance_m: float
    height_m: float
    count: int
    yaw_jitter: float = 0.0
    pitch_jitter: float = 0.0


class CreateSessionRequest(BaseModel):
    """Either a full ``scene`` dict (SceneConfig.to_dict schema) or the
    compact row/noise fields below."""

    scene: dict | None = None
    rows: list[RowSpec] | None = None
    mode: str = "multi-scale"
    sigma_px: float = 0.3
    outlier_rate: float = 0.05
    seed: int = 0
    n_gcps: int = 17


class PoseSpec(BaseModel):
    """A capture pose: either position+look_at or explicit q/t."""

    position: list[float] | None = None
    look_at: list[float] | None = None
    q: list[float] | None = None
    t: list[float] | None = None

    def resolve(self) -> Pose:
        if self.q is not None and self.t is not None:
            return Pose(q=np.asarray(self.q, float), t=np.asarray(self.t, float))
        if self.position is not None and self.look_at is not None:
            return Pose.look_at(np.asarray(self.position, float), np.asarray(self.look_at, float))
        raise InvalidConfig("pose needs position+look_at or q+t")


class CaptureRequest(BaseModel):
    pose: PoseSpec
    seed: int | None = Field(
        default=None, description="feature-synthesis seed; defaults to a per-capture value"
    )


# ---------------------------------------------------------------------------
# session records


def _scene_from_request(req: CreateSessionRequest) -> SceneConfig:
    if req.scene is not None:
        return SceneConfig.from_dict(req.scene)
    if not req.rows:
        raise InvalidConfig("session needs a scene or at least one camera row")
    plan = CameraNetworkPlan(
        rows=[RowPlan(**r.model_dump()) for r in req.rows], mode=req.mode
    )
    noise = NoiseConfig(sigma_px=req.sigma_px, outlier_rate=req.outlier_rate)
    return SceneConfig(plan=plan, noise=noise, seed=req.seed, n_gcps=req.n_gcps)


@dataclass
class SessionRecord:
    id: str
    scene: SceneConfig
    session: Session
    facade: object
    gcps: list
    planned_poses: list[Pose]
    log_path: Path | None
    events: list[dict] = field(default_factory=list)
    next_image_id: int = 2
    lock: threading.RLock = field(default_factory=threading.RLock)
    cond: threading.Condition = field(default_factory=threading.Condition)

    @property
    def last_seq(self) -> int:
        return self.events[-1]["seq"] if self.events else 0

    def emit(self, kind: str, payload: dict) -> dict:
        event = {"seq": self.last_seq + 1, "kind": kind, "payload": payload}
        with self.cond:
            self.events.append(event)
            self.cond.notify_all()
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
        return event

    def synthesize(self, pose: Pose, image_id: int, seed: int) -> ImageFeatures:
        ds = synthesize_observations(
            self.facade,
            [pose],
            self.scene.noise,
            intrinsics=self.scene.intrinsics,
            seed=seed,
            gcps=self.gcps,
        )
        feat = ds.features[0]
        return ImageFeatures(image_id, feat.pixels, feat.signatures)


class SessionService:
    """All live sessions; shared by the HTTP app and the CLI."""

    def __init__(self, log_dir: str | os.PathLike | None = None):
        if log_dir is None:
            log_dir = os.environ.get("SKYS_LOG_DIR")
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, SessionRecord] = {}

    # -- lifecycle ----------------------------------------------------------
    def create_session(
        self, scene: SceneConfig, session_id: str | None = None, log: bool = True
    ) -> SessionRecord:
        scene.plan.validate()
        facade = generate_facade(scene.facade, scene.seed)
        poses, _rows = generate_network(scene.plan, facade, seed=scene.seed + 1)
        if len(poses) < 2:
            raise InvalidConfig("bootstrap needs at least two planned poses")
        gcps = default_gcps(facade, n=scene.n_gcps, seed=scene.seed + 2)
        sid = session_id or uuid.uuid4().hex[:12]
        log_path = None
        if log and self.log_dir is not None:
            log_path = self.log_dir / f"{sid}.jsonl"
        session = Session(scene.intrinsics, PipelineConfig())
        rec = SessionRecord(
            id=sid,
            scene=scene,
            session=session,
            facade=facade,
            gcps=gcps,
            planned_poses=poses,
            log_path=log_path,
        )
        feat_a = rec.synthesize(poses[0], 0, scene.seed + 100)
        feat_b = rec.synthesize(poses[1], 1, scene.seed + 101)
        session.bootstrap(feat_a, feat_b)
        self.sessions[sid] = rec
        rec.emit(
            "SessionCreated",
            {
                "protocol": PROTOCOL_VERSION,
                "session_id": sid,
                "scene": scene.to_dict(),
                "n_cameras": session.rmap.n_cameras,
                "n_points": session.rmap.n_points,
                "map_hash": session.map_hash(),
            },
        )
        return rec

    def get(self, session_id: str) -> SessionRecord:
        rec = self.sessions.get(session_id)
        if rec is None:
            raise UnknownSession(f"no session {session_id!r}")
        return rec

    # -- commands -----------------------------------------------------------
    def capture(self, session_id: str, pose: Pose, seed: int | None = None) -> dict:
        rec = self.get(session_id)
        with rec.lock:
            image_id = rec.next_image_id
            rec.next_image_id += 1
            if seed is None:
                seed = rec.scene.seed + 100 + image_id
            features = rec.synthesize(pose, image_id, seed)
            report = rec.session.integrate_image(features)
            payload = {
                "image_id": report.image_id,
                "status": report.status,
                "inlier_count": report.inlier_count,
                "new_point_count": report.new_point_count,
                "timings_ms": report.timings_ms,
                "n_cameras": rec.session.rmap.n_cameras,
                "n_points": rec.session.rmap.n_points,
                "revision": rec.session.revision,
                "map_hash": rec.session.map_hash(),
                "capture": {"q": list(map(float, pose.q)), "t": list(map(float, pose.t))},
                "capture_seed": seed,
                "mesh_stale": report.status == "Localized",
            }
            return rec.emit("IntegrationEvent", payload)

    def snapshot(self, session_id: str, overlay: str = "none") -> dict:
        if overlay not in ("gsd", "redundancy", "none"):
            raise InvalidConfig(f"unknown overlay {overlay!r}")
        rec = self.get(session_id)
        with rec.lock:
            mesh = rec.session.mesh()
            payload = {
                "protocol": PROTOCOL_VERSION,
                "session_id": session_id,
                "seq": rec.last_seq,
                "revision": rec.session.revision,
                "n_vertices": int(len(mesh.vertices)),
                "n_faces": int(mesh.n_faces),
                "vertices_b64": _b64(mesh.vertices.astype("<f4")),
                "faces_b64": _b64(mesh.faces.astype("<u4")),
                "overlay": None,
                "color_tables": color_tables(),
            }
            if overlay != "none":
                ov = rec.session.overlay()
                values = ov.gsd if overlay == "gsd" else ov.redundancy.astype(float)
                entry = {
                    "kind": overlay,
                    "values_b64": _b64(np.asarray(values, dtype="<f4")),
                    "observed_b64": _b64(ov.observed.astype("<u1")),
                }
                if overlay == "gsd":
                    finite = np.asarray(values)[np.isfinite(values)]
                    lo = float(finite.min()) if len(finite) else 1e-3
                    hi = float(finite.max()) if len(finite) else 1e-1
                    if not hi > lo:
                        hi = lo * 10.0
                    entry["scale"] = {"lo": lo, "hi": hi}
                payload["overlay"] = entry
        return payload

    def report(self, session_id: str) -> dict:
        rec = self.get(session_id)
        with rec.lock:
            return {
                "protocol": PROTOCOL_VERSION,
                "session_id": session_id,
                "n_cameras": rec.session.rmap.n_cameras,
                "n_points": rec.session.rmap.n_points,
                "map_hash": rec.session.map_hash(),
                "revision": rec.session.revision,
                "last_seq": rec.last_seq,
                "integrations": [
                    {
                        "image_id": r.image_id,
                        "status": r.status,
                        "inlier_count": r.inlier_count,
                        "new_point_count": r.new_point_count,
                        "timings_ms": r.timings_ms,
                    }
                    for r in rec.session.reports
                ],
            }

    # -- persistence --------------------------------------------------------
    def resume_log(self, path: str | os.PathLike) -> SessionRecord:
        """Rebuild one session by replaying its JSONL event log."""
        lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s.strip()]
        if not lines or lines[0]["kind"] != "SessionCreated":
            raise InvalidConfig(f"{path}: not a session log")
        head = lines[0]["payload"]
        scene = SceneConfig.from_dict(head["scene"])
        rec = self.create_session(scene, session_id=head["session_id"], log=False)
        for line in lines[1:]:
            if line["kind"] != "IntegrationEvent":
                continue
            p = line["payload"]
            pose = Pose(q=np.asarray(p["capture"]["q"]), t=np.asarray(p["capture"]["t"]))
            self.capture(rec.id, pose, seed=p["capture_seed"])
        # reattach the log for future appends
        if self.log_dir is not None:
            rec.log_path = self.log_dir / f"{rec.id}.jsonl"
        return rec

    def resume_logs(self, log_dir: str | os.PathLike | None = None) -> list[SessionRecord]:
        root = Path(log_dir) if log_dir is not None else self.log_dir
        if root is None or not root.is_dir():
            return []
        return [self.resume_log(p) for p in sorted(root.glob("*.jsonl"))]


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")


# ---------------------------------------------------------------------------
# HTTP app


def create_app(service: SessionService | None = None) -> FastAPI:
    service = service or SessionService()
    app = FastAPI(title="skysweep session service", version=str(PROTOCOL_VERSION))
    app.state.service = service

    @app.exception_handler(SkysweepError)
    async def _on_domain_error(_req: Request, exc: SkysweepError):
        status = 404 if isinstance(exc, UnknownSession) else 400
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.post("/sessions")
    def create_session(body: CreateSessionRequest):
        rec = service.create_session(_scene_from_request(body))
        return rec.events[0]["payload"]

    @app.post("/sessions/{session_id}/capture")
    def capture(session_id: str, body: CaptureRequest):
        return service.capture(session_id, body.pose.resolve(), seed=body.seed)

    @app.get("/sessions/{session_id}/snapshot")
    def snapshot(session_id: str, overlay: str = "none"):
        return service.snapshot(session_id, overlay)

    @app.get("/sessions/{session_id}/report")
    def report(session_id: str):
        return service.report(session_id)

    @app.get("/sessions/{session_id}/events")
    def events(session_id: str, request: Request, since: int = 0):
        rec = service.get(session_id)
        resume_from = since
        last_id = request.headers.get("last-event-id")
        if last_id is not None:
            resume_from = max(resume_from, int(last_id))

        async def stream(cursor=resume_from):
            # async polling keeps the generator cancellable when the
            # client disconnects (a thread parked on a condition is not)
            idle_s = 0.0
            while True:
                with rec.cond:
                    pending = [e for e in rec.events if e["seq"] > cursor]
                if pending:
                    idle_s = 0.0
                    for event in pending:
                        cursor = event["seq"]
                        data = json.dumps(event["payload"], sort_keys=True)
                        yield f"id: {event['seq']}\nevent: {event['kind']}\ndata: {data}\n\n"
                    continue
                if await request.is_disconnected():
                    return
                await asyncio.sleep(SSE_POLL_S)
                idle_s += SSE_POLL_S
                if idle_s >= SSE_HEARTBEAT_S:
                    idle_s = 0.0
                    yield ": heartbeat\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def serve(
    port: int | None = None,
    log_dir: str | None = None,
    resume: str | None = None,
    host: str = "127.0.0.1",
):
    """Run the service with uvicorn (blocking)."""
    import uvicorn

    if port is None:
        port = int(os.environ.get("SKYS_PORT", DEFAULT_PORT))
    service = SessionService(log_dir=log_dir)
    if resume:
        target = Path(resume)
        if target.is_dir():
            service.resume_logs(target)
        else:
            service.resume_log(target)
    uvicorn.run(create_app(service), host=host, port=port, log_level="warning")
