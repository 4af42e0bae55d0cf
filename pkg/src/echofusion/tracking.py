"""Frame-to-model tracking: render depth from each incoming segmentation,
raycast the TSDF model from the previous pose, align by point-to-plane ICP
and integrate on success. Failed frames reset to the previous pose, are
never integrated, and count as tracking losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .camera import (CameraModel, DepthImage, bilateral_depth_filter,
                     compute_vertex_normal_maps, reject_grazing, render_depth)
from .core import RigidPose, SegmentationVolume, VoxelVolume, voxel_to_world
from .icp import IcpAlignmentError, IcpConfig, icp_align
from .tsdf import TsdfGrid, integrate, raycast

TRACKED = "tracked"
LOST = "lost"


@dataclass(frozen=True)
class TrackResult:
    pose: RigidPose            # frame camera -> global (model) frame
    status: str                # "tracked" | "lost"
    inlier_ratio: float
    mean_residual_mm: float


@dataclass(frozen=True)
class TrackerConfig:
    icp: IcpConfig = field(default_factory=IcpConfig)
    min_inlier_ratio: float = 0.25
    max_mean_residual_mm: float = 10.0
    grid_max_dim: int = 256
    grid_extent_scale: float = 1.5
    grid_voxel_size_mm: float | None = None
    truncation_voxels: float = 4.0
    max_weight: float = 64.0
    # bilateral prefilter for the ICP maps (raw depth is what gets fused);
    # voxelised segmentations render with staircase noise that breaks
    # finite-difference normals otherwise
    smooth_spatial_sigma_px: float = 2.0
    smooth_range_sigma_mm: float = 3.0
    smooth_radius_px: int = 4
    # pixels seen at grazing incidence are dropped from alignment and
    # fusion: the sector's crop planes pass through the camera apex and
    # would otherwise enter the model and pin the pose to zero motion
    max_incidence_deg: float = 75.0


class Tracker:
    """Owns the TSDF model and the current global pose.

    The global frame is the camera frame of the first successfully tracked
    frame. Single ownership: one track_frame call at a time.
    """

    def __init__(self, camera: CameraModel, config: TrackerConfig = TrackerConfig()):
        self.camera = camera          # camera in the probe frame (fixed offset)
        self.config = config
        self.grid: TsdfGrid | None = None
        self.pose = RigidPose.identity()
        self.results: list[TrackResult] = []
        self.losses = 0

    @property
    def intrinsics(self) -> CameraModel:
        """Camera with the pose stripped; global-frame ops set their own."""
        return self.camera.with_pose(RigidPose.identity())

    def track_frame(self, seg: SegmentationVolume,
                    intensity: VoxelVolume | None = None) -> TrackResult:
        if not bool(seg.data.any()):
            return self.record_loss()

        depth = render_depth(seg, self.camera)
        if not bool(depth.valid_mask().any()):
            return self.record_loss()
        cfg = self.config
        smoothed = bilateral_depth_filter(
            depth.depth, cfg.smooth_spatial_sigma_px,
            cfg.smooth_range_sigma_mm, cfg.smooth_radius_px)
        maps = reject_grazing(
            compute_vertex_normal_maps(DepthImage(smoothed.astype(np.float32)),
                                       self.camera),
            cfg.max_incidence_deg)
        if not bool(maps.valid.any()):
            return self.record_loss()
        fuse_depth = DepthImage(np.where(maps.valid, depth.depth, 0.0)
                                .astype(np.float32))

        if self.grid is None:
            self._bootstrap(seg)
            cam = self.intrinsics.with_pose(self.pose)
            integrate(self.grid, fuse_depth, cam)
            return self._record(TrackResult(self.pose, TRACKED, 1.0, 0.0))

        model_maps = reject_grazing(
            raycast(self.grid, self.intrinsics.with_pose(self.pose)),
            cfg.max_incidence_deg)
        try:
            res = icp_align(maps, model_maps, self.intrinsics,
                            init=RigidPose.identity(), cfg=self.config.icp)
        except IcpAlignmentError:
            return self.record_loss()
        if res.inlier_ratio < self.config.min_inlier_ratio \
                or res.mean_residual_mm > self.config.max_mean_residual_mm:
            return self.record_loss()

        # res.pose maps current-frame camera points into the previous frame
        self.pose = self.pose.compose(res.pose)
        integrate(self.grid, fuse_depth, self.intrinsics.with_pose(self.pose))
        return self._record(TrackResult(self.pose, TRACKED,
                                        res.inlier_ratio, res.mean_residual_mm))

    def _bootstrap(self, seg: SegmentationVolume):
        """Size the model grid from the first frame's foreground, expressed
        in the global (first camera) frame."""
        cfg = self.config
        idx = np.argwhere(seg.data > 0)
        pts_probe = voxel_to_world(seg, idx)
        pts_cam = self.camera.pose.inverse().apply(pts_probe)
        self.grid = TsdfGrid.fit_to_points(
            pts_cam, max_dim=cfg.grid_max_dim, scale=cfg.grid_extent_scale,
            voxel_size=cfg.grid_voxel_size_mm,
            truncation_voxels=cfg.truncation_voxels, max_weight=cfg.max_weight)
        self.pose = RigidPose.identity()

    def _record(self, result: TrackResult) -> TrackResult:
        self.results.append(result)
        return result

    def record_loss(self) -> TrackResult:
        """Count a loss and hold the pose (also used by the pipeline when a
        frame cannot even be loaded)."""
        self.losses += 1
        return self._record(TrackResult(self.pose, LOST, 0.0, 0.0))


class RobustnessMetrics(NamedTuple):
    total_frames: int
    num_losses: int
    longest_run: int


def robustness_metrics(results) -> RobustnessMetrics:
    """Loss count and longest run of consecutively tracked frames."""
    statuses = [r.status if hasattr(r, "status") else str(r) for r in results]
    losses = sum(1 for s in statuses if s == LOST)
    longest = run = 0
    for s in statuses:
        if s == TRACKED:
            run += 1
            longest = max(longest, run)
        else:
            run = 0
    return RobustnessMetrics(len(statuses), losses, longest)
