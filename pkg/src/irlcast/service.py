"""What-if HTTP service: scenario browsing, drivable-mask edit sessions,
and full re-prediction with the session's effective mask."""

from __future__ import annotations

import os
import threading
import uuid

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .cli import prediction_payload
from .config import RunConfig
from .pipeline import Predictor
from .scene import load_scenario, scenario_to_dict


class Session:
    """Mask edits for one scenario; the base scenario is never mutated."""

    def __init__(self, scenario_id: str):
        self.scenario_id = scenario_id
        self.blocked: set = set()


class MaskRequest(BaseModel):
    blocked_cells: list = Field(default_factory=list)
    revert: list = Field(default_factory=list)


class SessionRequest(BaseModel):
    scenario_id: str


class PredictRequest(BaseModel):
    seed: int = 0
    K: int | None = None
    L: int | None = None
    full_plans: bool = False


def create_app(corpus_dir: str, stage1_path: str | None, stage2_path: str | None,
               cfg: RunConfig, ui_origin: str = "*") -> FastAPI:
    predictor = None
    if (stage1_path and stage2_path and os.path.exists(stage1_path)
            and os.path.exists(stage2_path)):
        predictor = Predictor.load(cfg, stage1_path, stage2_path)
    scenarios = {}
    for name in sorted(os.listdir(corpus_dir)):
        if name.endswith(".json") and name != "run_config.json":
            scenario = load_scenario(os.path.join(corpus_dir, name))
            scenarios[scenario.id] = scenario

    sessions: dict[str, Session] = {}
    lock = threading.Lock()

    app = FastAPI(title="irlcast what-if service")
    app.add_middleware(CORSMiddleware, allow_origins=[ui_origin],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(404)
    async def not_found(request: Request, exc):
        return JSONResponse(status_code=404,
                            content={"error": "not-found",
                                     "message": str(getattr(exc, "detail", "unknown path"))})

    @app.get("/api/health")
    def health():
        from . import __version__
        return {"status": "ok", "version": __version__}

    @app.get("/api/scenarios")
    def list_scenarios():
        return {"scenarios": sorted(scenarios)}

    @app.get("/api/scenarios/{scenario_id}")
    def get_scenario(scenario_id: str):
        if scenario_id not in scenarios:
            return JSONResponse(status_code=404, content={
                "error": "unknown-scenario", "message": scenario_id})
        return scenario_to_dict(scenarios[scenario_id])

    @app.post("/api/sessions")
    def open_session(req: SessionRequest):
        if req.scenario_id not in scenarios:
            return JSONResponse(status_code=404, content={
                "error": "unknown-scenario", "message": req.scenario_id})
        sid = uuid.uuid4().hex[:12]
        with lock:
            sessions[sid] = Session(req.scenario_id)
        return {"session_id": sid, "scenario_id": req.scenario_id}

    def _session(sid: str):
        with lock:
            return sessions.get(sid)

    @app.post("/api/sessions/{sid}/mask")
    def edit_mask(sid: str, req: MaskRequest):
        session = _session(sid)
        if session is None:
            return JSONResponse(status_code=404, content={
                "error": "unknown-session", "message": sid})
        scenario = scenarios[session.scenario_id]
        side = scenario.grid_side
        noop = []
        for r, c in list(req.blocked_cells) + list(req.revert):
            if not (0 <= r < side and 0 <= c < side):
                return JSONResponse(status_code=422, content={
                    "error": "cell-out-of-range",
                    "message": f"cell ({r},{c}) outside the {side}x{side} grid"})
        with lock:
            for r, c in req.blocked_cells:
                if not scenario.drivable_mask[r, c]:
                    noop.append([r, c])   # already undrivable in the base scene
                else:
                    session.blocked.add((r, c))
            for r, c in req.revert:
                session.blocked.discard((r, c))
            blocked = sorted(session.blocked)
        return {"session_id": sid,
                "blocked_cells": [list(c) for c in blocked],
                "noop_cells": noop}

    @app.post("/api/sessions/{sid}/predict")
    def predict(sid: str, req: PredictRequest):
        session = _session(sid)
        if session is None:
            return JSONResponse(status_code=404, content={
                "error": "unknown-session", "message": sid})
        if predictor is None:
            return JSONResponse(status_code=409, content={
                "error": "missing-checkpoint",
                "message": "service started without trained checkpoints"})
        scenario = scenarios[session.scenario_id]
        with lock:
            blocked = sorted(session.blocked)
        try:
            pred = predictor.predict(scenario, seed=req.seed, k=req.K,
                                     l=req.L, blocked_cells=blocked)
        except Exception as exc:  # compute failure -> diagnostic id
            diag = uuid.uuid4().hex[:8]
            return JSONResponse(status_code=500, content={
                "error": "prediction-failed", "diagnostic_id": diag,
                "message": f"{type(exc).__name__}: {exc}"})
        payload = prediction_payload(pred, cfg, req.seed,
                                     full_plans=req.full_plans)
        payload["blocked_cells"] = [list(c) for c in blocked]
        return payload

    return app
