"""Path-level orchestration of the four pipeline stages. The service
endpoints and the CLI are thin shells around these functions.

Frame files are numbered pairs `frame_0000_intensity.mha` /
`frame_0000_seg.mha`, processed in lexicographic order. `sim` additionally
writes the ground-truth camera trajectory (gt.jsonl, absolute camera-to-
world poses in the same JSONL schema as tracked trajectories) and a
`camera.json` sidecar with the exact fan geometry for manual-camera runs.
"""

from __future__ import annotations

import json
import math
import statistics
from pathlib import Path

import numpy as np

from . import fileio
from .camera import build_camera, camera_offset_pose
from .compound import GridSpec, compound, default_grid_spec, orthogonal_slices
from .config import PipelineConfig, load_config
from .core import RigidPose, dice_score, rotation_angle_deg
from .sector import estimate_sector
from .sim import FanSpec, generate_trajectory, render_frame, threshold_discriminator
from .tracking import Tracker, robustness_metrics

GT_FILENAME = "gt.jsonl"
CAMERA_SIDECAR = "camera.json"


class PipelineError(Exception):
    pass


def _frame_stem(index: int) -> str:
    return f"frame_{index:04d}"


def run_sim(config_path, out_dir, overrides=()) -> dict:
    """Render the configured sequence into numbered volume pairs plus the
    ground-truth trajectory; byte-deterministic for a fixed config."""
    cfg = load_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    probes = generate_trajectory(cfg.trajectory, cfg.scene, cfg.fan)
    entries = []
    for k, probe in enumerate(probes):
        intensity, seg, gt_cam = render_frame(
            cfg.scene, probe, cfg.fan, cfg.frames, cfg.artifacts,
            seed=cfg.trajectory.seed * 100003 + k)
        stem = _frame_stem(k)
        fileio.write_volume(intensity, out / f"{stem}_intensity.mha")
        fileio.write_volume(seg, out / f"{stem}_seg.mha")
        entries.append(fileio.TrajectoryEntry(
            frame=k, status="tracked", pose=gt_cam,
            inlier_ratio=1.0, mean_residual_mm=0.0))
    fileio.write_trajectory(entries, out / GT_FILENAME)

    placement = cfg.fan.camera_placement()
    sidecar = {
        "distance_mm": placement.distance,
        "view_angle_deg": placement.view_angle,
        "fan": {
            "depth_yz_mm": cfg.fan.depth_yz_mm,
            "angle_yz_deg": cfg.fan.angle_yz_deg,
            "depth_xy_mm": cfg.fan.depth_xy_mm,
            "angle_xy_deg": cfg.fan.angle_xy_deg,
            "range_mm": cfg.fan.range_mm,
        },
    }
    (out / CAMERA_SIDECAR).write_text(json.dumps(sidecar, indent=2) + "\n")
    return {
        "frames": len(probes),
        "out_dir": str(out),
        "gt_path": str(out / GT_FILENAME),
        "camera_path": str(out / CAMERA_SIDECAR),
    }


def discover_frames(frames_dir) -> list[tuple[Path, Path | None]]:
    """Ordered (intensity, seg) pairs; seg may be missing for a frame."""
    frames_dir = Path(frames_dir)
    intensities = sorted(frames_dir.glob("*_intensity.mha"))
    pairs = []
    for ipath in intensities:
        spath = ipath.with_name(ipath.name.replace("_intensity", "_seg"))
        pairs.append((ipath, spath if spath.exists() else None))
    return pairs


def _resolve_placement_and_support(cfg: PipelineConfig, frames_dir,
                                   camera_mode, distance_mm, view_angle_deg,
                                   first_intensity):
    """Camera placement plus a sector-support test for compounding.

    manual: explicit flags or the simulator sidecar; auto: sector geometry
    estimated from the first intensity volume.
    """
    from .camera import CameraPlacement

    sidecar = Path(frames_dir) / CAMERA_SIDECAR
    if camera_mode == "manual":
        if distance_mm is not None and view_angle_deg is not None:
            placement = CameraPlacement(distance_mm, view_angle_deg)
            fan = None
        elif sidecar.exists():
            meta = json.loads(sidecar.read_text())
            placement = CameraPlacement(meta["distance_mm"], meta["view_angle_deg"])
            fan = FanSpec(**meta["fan"]) if "fan" in meta else None
        else:
            raise PipelineError(
                "manual camera needs --distance-mm/--view-angle-deg or a "
                f"{CAMERA_SIDECAR} sidecar")
        if fan is None:
            fan = FanSpec(placement.distance, placement.view_angle,
                          placement.distance, placement.view_angle,
                          range_mm=1e6)
        return placement, fan.support
    # auto
    estimate = estimate_sector(first_intensity, cfg.sector)
    fit_yz, fit_xy = estimate.fit_yz, estimate.fit_xy
    fan = FanSpec(depth_yz_mm=-float(fit_yz.apex[0]),
                  angle_yz_deg=fit_yz.opening_angle,
                  depth_xy_mm=-float(fit_xy.apex[1]),
                  angle_xy_deg=fit_xy.opening_angle,
                  range_mm=1e6)
    return estimate.placement, fan.support


def run_track(frames_dir, out_dir, segmentation="external", camera_mode="auto",
              distance_mm=None, view_angle_deg=None, config_path=None,
              overrides=()) -> dict:
    """Track the frame sequence; writes trajectory.jsonl, mesh.ply and the
    TSDF snapshot (tsdf.mha + tsdf_weight.mha). Per-frame failures are
    recorded as losses, never raised."""
    cfg = load_config(config_path, overrides)
    pairs = discover_frames(frames_dir)
    if not pairs:
        raise PipelineError(f"no frames found in {frames_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    first_intensity = fileio.read_volume(pairs[0][0])
    placement, _support = _resolve_placement_and_support(
        cfg, frames_dir, camera_mode, distance_mm, view_angle_deg, first_intensity)

    cam = build_camera(placement, cfg.camera.width, cfg.camera.height,
                       near=cfg.camera.near_mm)
    tracker = Tracker(cam, cfg.tracker)

    entries = []
    for k, (ipath, spath) in enumerate(pairs):
        try:
            if segmentation == "threshold" or spath is None:
                intensity = fileio.read_volume(ipath)
                seg = threshold_discriminator(intensity, cfg.discriminator_threshold)
            else:
                seg = fileio.read_volume(spath, segmentation=True)
            result = tracker.track_frame(seg)
        except Exception:
            result = tracker.record_loss()
        entries.append(fileio.TrajectoryEntry(
            frame=k, status=result.status, pose=result.pose,
            inlier_ratio=result.inlier_ratio,
            mean_residual_mm=result.mean_residual_mm))

    fileio.write_trajectory(entries, out / "trajectory.jsonl")
    from .tsdf import extract_mesh
    if tracker.grid is not None:
        mesh = extract_mesh(tracker.grid)
        tsdf_vol, weight_vol = tracker.grid.to_volumes()
        fileio.write_volume(tsdf_vol, out / "tsdf.mha")
        fileio.write_volume(weight_vol, out / "tsdf_weight.mha")
    else:
        from .tsdf import TriangleMesh
        mesh = TriangleMesh.empty()
    fileio.write_mesh_ply(mesh, out / "mesh.ply")

    metrics = robustness_metrics([e.status for e in entries])
    return {
        "trajectory_path": str(out / "trajectory.jsonl"),
        "mesh_path": str(out / "mesh.ply"),
        "tsdf_path": str(out / "tsdf.mha"),
        "weight_path": str(out / "tsdf_weight.mha"),
        "total_frames": metrics.total_frames,
        "losses": metrics.num_losses,
        "longest_run": metrics.longest_run,
    }


def run_fuse(frames_dir, trajectory_path, out_path, camera_mode="auto",
             distance_mm=None, view_angle_deg=None, config_path=None,
             overrides=()) -> dict:
    """Compound tracked frames into one volume plus orthogonal slice PGMs."""
    cfg = load_config(config_path, overrides)
    pairs = discover_frames(frames_dir)
    if not pairs:
        raise PipelineError(f"no frames found in {frames_dir}")
    entries = fileio.read_trajectory(trajectory_path)
    if len(entries) != len(pairs):
        raise PipelineError(
            f"trajectory has {len(entries)} frames but {len(pairs)} volume "
            "pairs found")

    first_intensity = fileio.read_volume(pairs[0][0])
    placement, support = _resolve_placement_and_support(
        cfg, frames_dir, camera_mode, distance_mm, view_angle_deg, first_intensity)
    cam_offset = camera_offset_pose(placement)

    frames = []
    for entry, (ipath, _spath) in zip(entries, pairs):
        if entry.status != "tracked":
            continue
        vol = fileio.read_volume(ipath)
        frames.append((vol, entry.pose.compose(cam_offset.inverse())))
    if not frames:
        raise PipelineError("no tracked frames to compound")

    spec = default_grid_spec(frames, max_dim=cfg.compound.max_dim)
    if cfg.compound.spacing_mm:
        s = cfg.compound.spacing_mm
        lo = np.asarray(spec.origin)
        extent = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
        dims = np.maximum(np.floor(extent / s).astype(int) + 1, 2)
        spec = GridSpec(tuple(int(d) for d in dims), (s,) * 3, tuple(lo))

    result = compound(frames, spec, support=lambda i, pts: support(pts))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_volume(result.volume, out_path)

    stem = out_path.with_suffix("")
    xy, yz, xz = orthogonal_slices(result.volume)
    slice_paths = []
    for name, img in (("xy", xy), ("yz", yz), ("xz", xz)):
        p = Path(f"{stem}_{name}.pgm")
        fileio.write_gray_pgm(img, p)
        slice_paths.append(str(p))
    return {
        "volume_path": str(out_path),
        "slice_paths": slice_paths,
        "frames_used": len(frames),
    }


def _stats(values) -> dict:
    if not values:
        return {"mean": 0.0, "std": 0.0, "median": 0.0, "range": [0.0, 0.0]}
    return {
        "mean": float(statistics.fmean(values)),
        "std": float(statistics.pstdev(values)) if len(values) > 1 else 0.0,
        "median": float(statistics.median(values)),
        "range": [float(min(values)), float(max(values))],
    }


def relative_to_first(entries) -> dict[int, RigidPose]:
    """Frame poses re-expressed relative to the first frame's camera."""
    if not entries:
        return {}
    base = entries[0].pose.inverse()
    return {e.frame: base.compose(e.pose) for e in entries}


def run_eval(trajectory_paths, gt_path=None, seg_pairs_dir=None) -> dict:
    """Robustness metrics across sequences, pose errors against a ground
    truth trajectory, and Dice statistics over segmentation pairs."""
    if isinstance(trajectory_paths, (str, Path)):
        trajectory_paths = [trajectory_paths]
    sequences = [fileio.read_trajectory(p) for p in trajectory_paths]
    if not sequences:
        raise PipelineError("no trajectories given")

    totals, losses, longest = [], [], []
    for entries in sequences:
        m = robustness_metrics([e.status for e in entries])
        totals.append(m.total_frames)
        losses.append(m.num_losses)
        longest.append(m.longest_run)
    report = {
        "sequences": len(sequences),
        "robustness": {
            "total_frames": _stats(totals),
            "tracking_losses": _stats(losses),
            "longest_run": _stats(longest),
        },
    }

    if gt_path is not None:
        est = relative_to_first(sequences[0])
        gt = relative_to_first(fileio.read_trajectory(gt_path))
        rot_sq, tr_sq = [], []
        for entries in sequences[:1]:
            for e in entries:
                if e.status != "tracked" or e.frame not in gt:
                    continue
                rel_est = est[e.frame]
                rel_gt = gt[e.frame]
                rot_sq.append(rotation_angle_deg(
                    rel_gt.rotation.T @ rel_est.rotation) ** 2)
                tr_sq.append(float(np.sum(
                    (rel_gt.translation - rel_est.translation) ** 2)))
        if rot_sq:
            report["pose_error"] = {
                "frames_compared": len(rot_sq),
                "rotation_rmse_deg": math.sqrt(statistics.fmean(rot_sq)),
                "translation_rmse_mm": math.sqrt(statistics.fmean(tr_sq)),
            }

    if seg_pairs_dir is not None:
        dices = []
        pred_paths = sorted(Path(seg_pairs_dir).glob("*_pred.mha"))
        for pred_path in pred_paths:
            gt_seg_path = pred_path.with_name(pred_path.name.replace("_pred", "_gt"))
            if not gt_seg_path.exists():
                continue
            pred = fileio.read_volume(pred_path, segmentation=True)
            truth = fileio.read_volume(gt_seg_path, segmentation=True)
            dices.append(dice_score(pred, truth))
        report["dice"] = {"pairs": len(dices), **_stats(dices)}

    return report


def format_mean_std(mean: float, std: float) -> str:
    """Table-style 'mean(std)' cell, e.g. 98.11(54.65)."""
    return f"{mean:.2f}({std:.2f})"


def render_report_text(report: dict) -> str:
    """Human-readable report; robustness rows mirror the mean (std) /
    median / range table layout."""
    lines = ["robustness", "  {:<42s} {:>16s} {:>8s} {:>14s}".format(
        "", "mean (std)", "median", "range")]
    rows = [("total frames", "total_frames"),
            ("no. of tracking losses", "tracking_losses"),
            ("longest sequence without tracking loss", "longest_run")]
    for label, key in rows:
        s = report["robustness"][key]
        rng = f"[{s['range'][0]:g}, {s['range'][1]:g}]"
        lines.append("  {:<42s} {:>16s} {:>8g} {:>14s}".format(
            label, format_mean_std(s["mean"], s["std"]), s["median"], rng))
    if "pose_error" in report:
        pe = report["pose_error"]
        lines.append("pose error vs ground truth "
                     f"({pe['frames_compared']} tracked frames)")
        lines.append(f"  rotation RMSE:    {pe['rotation_rmse_deg']:.4f} deg")
        lines.append(f"  translation RMSE: {pe['translation_rmse_mm']:.4f} mm")
    if "dice" in report:
        d = report["dice"]
        lines.append(f"dice over {d['pairs']} segmentation pairs")
        lines.append(f"  mean(std): {d['mean']:.4f}({d['std']:.4f})")
    return "\n".join(lines) + "\n"
