"""Truncated signed distance field model: depth integration, model raycast
and iso-surface extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .camera import CameraModel, DepthImage, VertexNormalMaps
from .core import VoxelVolume, trilinear_sample_many
from .kernels import integrate_kernel, raycast_kernel

DEFAULT_MAX_DIM = 256
DEFAULT_TRUNCATION_VOXELS = 4.0
DEFAULT_MAX_WEIGHT = 64.0


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (N, 3) mm
    normals: np.ndarray    # (N, 3) unit
    triangles: np.ndarray  # (M, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.shape != n.shape:
            raise ValueError("vertex/normal count mismatch")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), np.int64))


class TsdfGrid:
    """Voxelised truncated signed distance + weight field.

    Mutable by design: `integrate` updates it in place. One writer at a
    time; see module concurrency notes.
    """

    def __init__(self, dims, voxel_size: float, origin,
                 truncation: float | None = None,
                 max_weight: float = DEFAULT_MAX_WEIGHT):
        dims = tuple(int(d) for d in dims)
        if any(d < 2 for d in dims):
            raise ValueError("grid dims must be >= 2 per axis")
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        self.truncation = float(truncation) if truncation is not None \
            else DEFAULT_TRUNCATION_VOXELS * self.voxel_size
        self.max_weight = float(max_weight)
        self.tsdf = np.zeros(dims, np.float32)
        self.weight = np.zeros(dims, np.float32)

    @property
    def dims(self):
        return self.tsdf.shape

    @classmethod
    def fit_to_points(cls, points, max_dim: int = DEFAULT_MAX_DIM,
                      scale: float = 1.5,
                      voxel_size: float | None = None,
                      truncation_voxels: float = DEFAULT_TRUNCATION_VOXELS,
                      max_weight: float = DEFAULT_MAX_WEIGHT) -> "TsdfGrid":
        """Grid covering the bounding box of `points` grown by `scale`.

        The voxel size is chosen so the largest axis fits in `max_dim`
        voxels unless given explicitly.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot fit a grid to zero points")
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        center = 0.5 * (lo + hi)
        extent = np.maximum((hi - lo) * scale, 1e-3)
        if voxel_size is None:
            voxel_size = float(extent.max()) / max_dim
        dims = np.maximum(np.ceil(extent / voxel_size).astype(int) + 1, 2)
        origin = center - (dims - 1) * voxel_size / 2.0
        return cls(dims, voxel_size, origin,
                   truncation=truncation_voxels * voxel_size,
                   max_weight=max_weight)

    def copy(self) -> "TsdfGrid":
        g = TsdfGrid(self.dims, self.voxel_size, self.origin,
                     truncation=self.truncation, max_weight=self.max_weight)
        g.tsdf = self.tsdf.copy()
        g.weight = self.weight.copy()
        return g

    def observed_voxels(self) -> int:
        return int(np.count_nonzero(self.weight > 0))

    def to_volumes(self) -> tuple[VoxelVolume, VoxelVolume]:
        """Snapshot as (tsdf, weight) float32 volumes for export."""
        sp = (self.voxel_size,) * 3
        return (VoxelVolume(self.tsdf.copy(), sp, self.origin),
                VoxelVolume(self.weight.copy(), sp, self.origin))


def integrate(grid: TsdfGrid, d: DepthImage, cam: CameraModel) -> TsdfGrid:
    """Fuse one depth frame at cam.pose (frame-to-global) into the grid.

    Voxels whose projective signed distance is below -truncation are left
    untouched; everything else merges by capped weighted running average.
    """
    pose_inv = cam.pose.inverse()
    integrate_kernel(grid.tsdf, grid.weight, grid.origin, grid.voxel_size,
                     grid.truncation, grid.max_weight,
                     d.depth,
                     np.ascontiguousarray(pose_inv.rotation),
                     np.ascontiguousarray(pose_inv.translation),
                     cam.fx, cam.fy, cam.cx, cam.cy)
    return grid


def raycast(grid: TsdfGrid, cam: CameraModel) -> VertexNormalMaps:
    """Predict vertex/normal maps by marching rays to the tsdf zero
    crossing; normals come from the interpolated tsdf gradient."""
    verts, normals, valid = raycast_kernel(
        grid.tsdf, grid.weight, grid.origin, grid.voxel_size, grid.truncation,
        np.ascontiguousarray(cam.pose.rotation),
        np.ascontiguousarray(cam.pose.translation),
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    return VertexNormalMaps(verts, normals, valid.astype(bool))


def extract_mesh(grid: TsdfGrid) -> TriangleMesh:
    """Marching-cubes triangulation of the tsdf = 0 level set.

    Cubes are only emitted where all corners were observed (weight > 0);
    vertex normals are the normalised tsdf gradient, pointing outward
    (toward positive tsdf).
    """
    observed = grid.weight > 0
    if not observed.any():
        return TriangleMesh.empty()
    # unobserved voxels hold tsdf 0, which would read as a crossing right at
    # the observation boundary; treating unknown space as free keeps the
    # level set strictly inside the observed region
    field = np.where(observed, grid.tsdf, 1.0).astype(np.float32)
    try:
        verts_idx, faces, _, _ = measure.marching_cubes(
            field, level=0.0, mask=observed)
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if len(verts_idx) == 0:
        return TriangleMesh.empty()

    verts = grid.origin + verts_idx.astype(np.float64) * grid.voxel_size
    normals = _gradient_normals(grid, verts)
    return TriangleMesh(verts, normals, faces.astype(np.int64))


def _gradient_normals(grid: TsdfGrid, points: np.ndarray) -> np.ndarray:
    """Central-difference tsdf gradient at world points, normalised."""
    field = np.where(grid.weight > 0, grid.tsdf, 1.0).astype(np.float32)
    vol = VoxelVolume(field, (grid.voxel_size,) * 3, grid.origin)
    eps = grid.voxel_size
    lo = grid.origin
    hi = grid.origin + (np.asarray(grid.dims) - 1) * grid.voxel_size
    grad = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = eps
        p_hi = np.clip(points + step, lo, hi)
        p_lo = np.clip(points - step, lo, hi)
        v_hi, _ = trilinear_sample_many(vol, p_hi)
        v_lo, _ = trilinear_sample_many(vol, p_lo)
        grad[:, axis] = v_hi - v_lo
    norm = np.linalg.norm(grad, axis=1)
    fallback = norm <= 1e-12
    grad[fallback] = (0.0, 0.0, 1.0)
    norm[fallback] = 1.0
    return grad / norm[:, None]
