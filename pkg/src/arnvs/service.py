"""Session-oriented streaming view-synthesis service.

HTTP: create sessions, push posed input views, request generated views,
inspect state. WS: bidirectional pose-in / frame-out streaming with one
in-flight generation per session. Images travel as base64 PNG inside JSON.
Sessions share read-only model parameters; per-session mutation is serialized
by a lock (second concurrent generate gets 409, or queues when configured).
"""

from __future__ import annotations

import base64
import copy
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import Body, FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .checkpoint import load_checkpoint
from .config import RunConfig
from .engine import EngineError, Session, session_new
from .geometry import GeometryError, Pose

POSE_SCHEMA = {
    "type": "array",
    "minItems": 4,
    "maxItems": 4,
    "items": {"type": "array", "minItems": 4, "maxItems": 4, "items": {"type": "number"}},
    "description": "row-major camera-to-world 4x4 matrix, bottom row (0,0,0,1)",
}


class SessionConfigBody(BaseModel):
    window_k: int | None = Field(default=None, ge=1)
    num_steps: int | None = Field(default=None, ge=1)
    seed: int | None = None
    context_noise_level: int | None = Field(default=None, ge=0)
    augmentation_enabled: bool | None = None

    model_config = {"extra": "forbid"}


class InputBody(BaseModel):
    png: str = Field(description="base64-encoded PNG")
    pose: list

    model_config = {"extra": "forbid"}


class GenerateBody(BaseModel):
    pose: list

    model_config = {"extra": "forbid"}


@dataclass
class SessionEntry:
    session: Session
    created_at: float
    lock: threading.Lock = field(default_factory=threading.Lock)


def _png_to_array(b64: str, image_size: int) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise HTTPException(422, f"undecodable PNG payload: {exc}") from exc
    if img.size != (image_size, image_size):
        raise HTTPException(422, f"image must be {image_size}x{image_size}, got {img.size}")
    arr = np.asarray(img, dtype=np.float32)
    return arr / 127.5 - 1.0


def _array_to_png(image: np.ndarray) -> str:
    u8 = np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _parse_pose(data) -> Pose:
    try:
        return Pose.from_json(data)
    except (GeometryError, ValueError, TypeError) as exc:
        raise HTTPException(422, f"invalid pose: {exc}") from exc


def create_app(checkpoint_path=None, cfg: RunConfig | None = None, model=None) -> FastAPI:
    """model overrides checkpoint loading: (params, denoiser_config, schedule)."""
    cfg = cfg or RunConfig()
    if model is None and checkpoint_path is not None:
        state, dconfig, schedule, _ = load_checkpoint(checkpoint_path)
        model = (state.ema, dconfig, schedule)

    app = FastAPI(title="arnvs view streaming service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, SessionEntry] = {}
    registry_lock = threading.Lock()

    def _entry(session_id: str) -> SessionEntry:
        entry = sessions.get(session_id)
        if entry is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return entry

    def _handle(session_id: str, entry: SessionEntry) -> dict:
        s = entry.session
        return {
            "session_id": session_id,
            "created_at": entry.created_at,
            "config": s.rollout.to_json(),
            "stats": {
                "frames_committed": len(s.committed),
                "cache_bytes": sum(c.size_bytes() for c in s.caches.values()),
                "window_k": s.rollout.window_k,
                "image_size": s.config.image_size,
            },
        }

    def _generate(entry: SessionEntry, pose: Pose) -> dict:
        t0 = time.perf_counter()
        image = entry.session.generate_view(pose)
        diag = entry.session.diagnostics[-1]
        return {
            "frame_index": len(entry.session.committed) - 1,
            "png": _array_to_png(image),
            "diagnostics": {
                "window": list(diag.window),
                "steps": diag.steps,
                "attention_flops": diag.attention_flops,
                "latency_ms": (time.perf_counter() - t0) * 1e3,
                "pose": pose.to_json(),
            },
        }

    @app.get("/api/health")
    def health():
        return {"status": "ok", "model_loaded": model is not None, "sessions": len(sessions)}

    @app.get("/api/schema")
    def schema():
        return {
            "pose": POSE_SCHEMA,
            "session_config": SessionConfigBody.model_json_schema(),
            "input": InputBody.model_json_schema(),
            "generate": GenerateBody.model_json_schema(),
        }

    @app.post("/api/session", status_code=201)
    def create_session(raw: dict | None = Body(default=None)):
        if model is None:
            raise HTTPException(503, "model not loaded")
        try:
            body = SessionConfigBody(**(raw or {}))
        except Exception as exc:
            raise HTTPException(400, f"invalid session config: {exc}") from exc
        params, dconfig, schedule = model
        overrides = {}
        if body.window_k is not None:
            overrides["window.window_k"] = body.window_k
        if body.num_steps is not None:
            if body.num_steps > schedule.T:
                raise HTTPException(400, f"num_steps must be <= {schedule.T}")
            overrides["sampler.num_steps"] = body.num_steps
        if body.context_noise_level is not None:
            if body.context_noise_level >= schedule.T:
                raise HTTPException(400, f"context_noise_level must be < {schedule.T}")
            overrides["augmentation.context_noise_level"] = body.context_noise_level
        if body.augmentation_enabled is not None:
            overrides["augmentation.enabled"] = body.augmentation_enabled
        run_cfg = copy.deepcopy(cfg)
        for dotted, value in overrides.items():
            section, leaf = dotted.split(".")
            setattr(getattr(run_cfg, section), leaf, value)
        seed = body.seed if body.seed is not None else int(time.time_ns() % (2**31))
        try:
            rcfg = run_cfg.rollout_config(seed=seed)
            session = session_new(params, dconfig, schedule, rcfg)
        except (ValueError, EngineError) as exc:
            raise HTTPException(400, f"invalid session config: {exc}") from exc
        with registry_lock:
            if len(sessions) >= cfg.service.max_sessions:
                raise HTTPException(503, f"session cap {cfg.service.max_sessions} reached")
            session_id = uuid.uuid4().hex
            entry = SessionEntry(session=session, created_at=time.time())
            sessions[session_id] = entry
        return _handle(session_id, entry)

    @app.post("/api/session/{session_id}/input")
    def push_input(session_id: str, body: InputBody):
        entry = _entry(session_id)
        params, dconfig, schedule = model
        image = _png_to_array(body.png, dconfig.image_size)
        pose = _parse_pose(body.pose)
        with entry.lock:
            try:
                entry.session.push_input_view(image, pose)
            except EngineError as exc:
                raise HTTPException(422, str(exc)) from exc
        return _handle(session_id, entry)["stats"]

    @app.post("/api/session/{session_id}/generate")
    def generate(session_id: str, body: GenerateBody):
        entry = _entry(session_id)
        pose = _parse_pose(body.pose)
        blocking = cfg.service.queue_requests
        if not entry.lock.acquire(blocking=blocking):
            raise HTTPException(409, "a generation for this session is already in flight")
        try:
            return _generate(entry, pose)
        finally:
            entry.lock.release()

    @app.get("/api/session/{session_id}/state")
    def state(session_id: str):
        entry = _entry(session_id)
        handle = _handle(session_id, entry)
        handle["committed"] = [
            {"frame_id": f.frame_id, "pose": f.pose.to_json(), "source": f.source, "noise_level": f.noise_level}
            for f in entry.session.committed
        ]
        return handle

    @app.websocket("/api/session/{session_id}/stream")
    async def stream(ws: WebSocket, session_id: str):
        import anyio

        await ws.accept()
        entry = sessions.get(session_id)
        if entry is None:
            await ws.send_json({"error": f"unknown session {session_id}"})
            await ws.close(code=4004)
            return
        try:
            while True:
                msg = await ws.receive_json()
                try:
                    pose = _parse_pose(msg.get("pose"))
                except HTTPException as exc:
                    await ws.send_json({"error": exc.detail})
                    continue

                def run_one(p=pose):
                    with entry.lock:
                        return _generate(entry, p)

                result = await anyio.to_thread.run_sync(run_one)
                await ws.send_json(result)
        except WebSocketDisconnect:
            return

    app.state.sessions = sessions
    return app


def mount_viewer(app: FastAPI, static_dir) -> None:
    """Serve built viewer assets at the root path."""
    app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="viewer")
