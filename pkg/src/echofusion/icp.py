"""Point-to-plane ICP with projective data association, coarse-to-fine over
a depth pyramid.

The per-iteration solve linearises the rigid increment as a 6-vector twist
(3 rotation + 3 translation); the 6x6 normal equations are solved by
eigendecomposition with relative eigenvalue truncation, so partially
observable geometry (e.g. a fronto-parallel plane) yields the component
that is observable plus a degenerate-direction count instead of a failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, VertexNormalMaps, map_pyramid
from .core import RigidPose, pose_from_twist


class IcpAlignmentError(Exception):
    """Alignment could not be estimated (too few pairs / no constraints)."""


@dataclass(frozen=True)
class IcpConfig:
    pyramid_levels: int = 3
    iterations_per_level: tuple = (10, 5, 4)   # coarse -> fine
    distance_gate_mm: float = 25.0
    normal_gate_deg: float = 30.0
    translation_eps_mm: float = 1e-3
    rotation_eps_rad: float = 1e-5
    min_matches: int = 6
    # directions below the floor are truncated out of the solve (true
    # nullspaces sit at ~1e-14 relative); directions below the flag level
    # are merely reported as degenerate (soft modes still carry signal)
    eig_floor_rel: float = 1e-11
    degenerate_rel_threshold: float = 1e-6
    # trust region: a Gauss-Newton step computed from badly-initialised
    # correspondences can leap along weakly-constrained directions; capping
    # the per-iteration increment keeps re-association self-correcting and
    # costs nothing near convergence
    max_step_translation_mm: float = 3.0
    max_step_rotation_rad: float = 0.05
    # translation-only bootstrap from the visible-surface centroids; a no-op
    # when the maps already overlap, it widens the basin for large offsets
    centroid_init: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("need at least one pyramid level")
        if len(self.iterations_per_level) != self.pyramid_levels:
            raise ValueError("iterations_per_level must list one entry per level")
        if self.distance_gate_mm <= 0 or self.normal_gate_deg <= 0:
            raise ValueError("gates must be positive")


@dataclass(frozen=True)
class IcpResult:
    pose: RigidPose                # src -> dst camera frame
    inlier_ratio: float
    mean_residual_mm: float
    degenerate_directions: int
    iterations: int


def point_to_plane_system(src_pts, dst_pts, dst_normals):
    """Normal equations of the linearised point-to-plane cost.

    Returns (ata, atb, residuals) where the Gauss-Newton step solves
    ata @ xi = -atb for xi = (omega, upsilon). atb equals the gradient of
    0.5 * sum(((R p + u) - q) . n)^2 at the identity increment.
    """
    p = np.asarray(src_pts, dtype=np.float64)
    q = np.asarray(dst_pts, dtype=np.float64)
    n = np.asarray(dst_normals, dtype=np.float64)
    r = np.sum((p - q) * n, axis=1)
    jac = np.hstack([np.cross(p, n), n])
    ata = jac.T @ jac
    atb = jac.T @ r
    return ata, atb, r


def solve_increment(ata, atb, floor_rel: float, flag_rel: float = 1e-6):
    """Truncated solve of ata @ xi = -atb.

    Eigen-directions below ``floor_rel`` times the largest eigenvalue are
    dropped from the solve; the count of directions below ``flag_rel`` is
    reported so callers can surface weakly-observable geometry.
    """
    w, v = np.linalg.eigh(ata)
    w_max = float(w[-1])
    if w_max <= 0.0:
        raise IcpAlignmentError("degenerate normal equations")
    keep = w > floor_rel * w_max
    if not np.any(keep):
        raise IcpAlignmentError("degenerate normal equations")
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    xi = -(v @ (inv * (v.T @ atb)))
    return xi, int(np.count_nonzero(w <= flag_rel * w_max))


def _associate(src_v, src_n, dst: VertexNormalMaps, cam: CameraModel,
               pose: RigidPose, cfg: IcpConfig):
    """Projective correspondences for the current pose estimate.

    Returns (p_transformed, q, n_q, matched_count); inputs are flattened
    valid-src arrays so repeated calls skip mask bookkeeping.
    """
    p = src_v @ pose.rotation.T + pose.translation
    n = src_n @ pose.rotation.T

    z = p[:, 2]
    front = z > 1e-9
    u = np.full(len(p), -1, dtype=np.int64)
    v = np.full(len(p), -1, dtype=np.int64)
    u[front] = np.floor(cam.fx * p[front, 0] / z[front] + cam.cx + 0.5).astype(np.int64)
    v[front] = np.floor(cam.fy * p[front, 1] / z[front] + cam.cy + 0.5).astype(np.int64)
    inb = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)

    ui = np.where(inb, u, 0)
    vi = np.where(inb, v, 0)
    ok = inb & dst.valid[vi, ui]
    q = dst.vertices[vi, ui].astype(np.float64)
    nq = dst.normals[vi, ui].astype(np.float64)

    dist_ok = np.linalg.norm(p - q, axis=1) <= cfg.distance_gate_mm
    cos_gate = np.cos(np.deg2rad(cfg.normal_gate_deg))
    norm_ok = np.sum(n * nq, axis=1) >= cos_gate
    sel = ok & dist_ok & norm_ok
    return p[sel], q[sel], nq[sel], int(np.count_nonzero(sel))


def icp_align(src: VertexNormalMaps, dst: VertexNormalMaps, dst_cam: CameraModel,
              init: RigidPose = RigidPose(), cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Estimate the rigid transform taking src camera points onto the dst
    surface, minimising the point-to-plane residual.

    Both maps must come from the same intrinsics (``dst_cam``); the pyramid
    is rebuilt internally from the maps' implicit depth (vertex z), using
    validity-aware 2x2 averaging.
    """
    levels = cfg.pyramid_levels
    src_levels, cams = map_pyramid(src, dst_cam, levels)
    dst_levels, _ = map_pyramid(dst, dst_cam, levels)

    pose = init
    if cfg.centroid_init:
        sv0 = src.vertices[src.valid].astype(np.float64)
        dv0 = dst.vertices[dst.valid].astype(np.float64)
        if len(sv0) and len(dv0):
            shift = dv0.mean(axis=0) - (sv0 @ pose.rotation.T + pose.translation).mean(axis=0)
            pose = RigidPose(np.eye(3), shift).compose(pose)
    total_iterations = 0
    degenerate = 0
    for level in range(levels - 1, -1, -1):
        src_maps = src_levels[level]
        dst_maps = dst_levels[level]
        sv = src_maps.vertices[src_maps.valid].astype(np.float64)
        sn = src_maps.normals[src_maps.valid].astype(np.float64)
        if len(sv) < cfg.min_matches:
            raise IcpAlignmentError("too few correspondences")
        iters = cfg.iterations_per_level[levels - 1 - level]
        # re-association can drift along weakly-constrained directions once
        # the true cost has bottomed out; remember the best pose seen and
        # restore it when leaving the level
        best_cost = np.inf
        best_pose = pose
        for it in range(iters + 1):
            p, q, nq, count = _associate(sv, sn, dst_maps, cams[level], pose, cfg)
            if count < cfg.min_matches:
                raise IcpAlignmentError("too few correspondences")
            ata, atb, residuals = point_to_plane_system(p, q, nq)
            cost = float(np.mean(np.abs(residuals)))
            if cost < best_cost:
                best_cost = cost
                best_pose = pose
            if it == iters:
                break
            xi, degenerate = solve_increment(ata, atb, cfg.eig_floor_rel,
                                             cfg.degenerate_rel_threshold)
            scale = min(1.0,
                        cfg.max_step_rotation_rad / max(np.linalg.norm(xi[:3]), 1e-12),
                        cfg.max_step_translation_mm / max(np.linalg.norm(xi[3:]), 1e-12))
            xi = xi * scale
            pose = pose_from_twist(xi[:3], xi[3:]).compose(pose)
            total_iterations += 1
            if np.linalg.norm(xi[3:]) < cfg.translation_eps_mm \
                    and np.linalg.norm(xi[:3]) < cfg.rotation_eps_rad:
                best_cost = np.inf  # converged: trust the stepped pose
                best_pose = pose
                break
        pose = best_pose

    # final statistics at full resolution against the returned pose
    sv = src.vertices[src.valid].astype(np.float64)
    sn = src.normals[src.valid].astype(np.float64)
    if len(sv) == 0:
        raise IcpAlignmentError("too few correspondences")
    p, q, nq, count = _associate(sv, sn, dst, dst_cam, pose, cfg)
    if count < cfg.min_matches:
        raise IcpAlignmentError("too few correspondences")
    _, _, residuals = point_to_plane_system(p, q, nq)
    inlier_ratio = count / len(sv)
    mean_residual = float(np.mean(np.abs(residuals)))
    return IcpResult(pose=pose, inlier_ratio=float(inlier_ratio),
                     mean_residual_mm=mean_residual,
                     degenerate_directions=degenerate,
                     iterations=total_iterations)
