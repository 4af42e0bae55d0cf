"""Pydantic request/response models for the pipeline service.

Volumes stay on disk: requests carry filesystem paths, responses carry the
paths of the artifacts written plus summary numbers.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class SimRequest(BaseModel):
    config_path: str
    out_dir: str
    overrides: list[str] = Field(default_factory=list)


class SimResponse(BaseModel):
    frames: int
    out_dir: str
    gt_path: str
    camera_path: str


class TrackRequest(BaseModel):
    frames_dir: str
    out_dir: str
    segmentation: Literal["external", "threshold"] = "external"
    camera_mode: Literal["auto", "manual"] = "auto"
    distance_mm: Optional[float] = None
    view_angle_deg: Optional[float] = None
    config_path: Optional[str] = None
    overrides: list[str] = Field(default_factory=list)


class TrackResponse(BaseModel):
    trajectory_path: str
    mesh_path: str
    tsdf_path: str
    weight_path: str
    total_frames: int
    losses: int
    longest_run: int


class FuseRequest(BaseModel):
    frames_dir: str
    trajectory_path: str
    out_path: str
    camera_mode: Literal["auto", "manual"] = "auto"
    distance_mm: Optional[float] = None
    view_angle_deg: Optional[float] = None
    config_path: Optional[str] = None
    overrides: list[str] = Field(default_factory=list)


class FuseResponse(BaseModel):
    volume_path: str
    slice_paths: list[str]
    frames_used: int


class EvalRequest(BaseModel):
    trajectory_paths: list[str]
    gt_path: Optional[str] = None
    seg_pairs_dir: Optional[str] = None


class EvalResponse(BaseModel):
    report: dict
    text: str


class HealthResponse(BaseModel):
    status: str
    version: str
