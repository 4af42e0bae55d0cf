"""FastAPI front end over the pipeline.

Endpoints are stateless (paths in, artifact paths out), so one running
service can serve several clients while each request remains an isolated,
deterministic pipeline invocation. The CLI talks to this app in-process
by default and over HTTP when pointed at a server.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..config import ConfigError
from ..fileio import FileFormatError
from ..sector import SectorError
from .schemas import (EvalRequest, EvalResponse, FuseRequest, FuseResponse,
                      HealthResponse, SimRequest, SimResponse, TrackRequest,
                      TrackResponse)

_CLIENT_ERRORS = (ConfigError, pipeline.PipelineError, FileFormatError,
                  SectorError, FileNotFoundError, ValueError)


def create_app() -> FastAPI:
    app = FastAPI(title="echofusion", version=__version__)

    def guarded(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/sim", response_model=SimResponse)
    def sim(req: SimRequest):
        result = guarded(pipeline.run_sim, req.config_path, req.out_dir,
                         req.overrides)
        return SimResponse(**result)

    @app.post("/track", response_model=TrackResponse)
    def track(req: TrackRequest):
        result = guarded(pipeline.run_track, req.frames_dir, req.out_dir,
                         segmentation=req.segmentation,
                         camera_mode=req.camera_mode,
                         distance_mm=req.distance_mm,
                         view_angle_deg=req.view_angle_deg,
                         config_path=req.config_path,
                         overrides=req.overrides)
        return TrackResponse(**result)

    @app.post("/fuse", response_model=FuseResponse)
    def fuse(req: FuseRequest):
        result = guarded(pipeline.run_fuse, req.frames_dir, req.trajectory_path,
                         req.out_path,
                         camera_mode=req.camera_mode,
                         distance_mm=req.distance_mm,
                         view_angle_deg=req.view_angle_deg,
                         config_path=req.config_path,
                         overrides=req.overrides)
        return FuseResponse(**result)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        report = guarded(pipeline.run_eval, req.trajectory_paths,
                         gt_path=req.gt_path, seg_pairs_dir=req.seg_pairs_dir)
        return EvalResponse(report=report,
                            text=pipeline.render_report_text(report))

    return app
