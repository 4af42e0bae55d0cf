"""Shared value types: voxel volumes, rigid poses, overlap metrics.

World-coordinate convention used throughout the package: the probe sits at
y < 0 looking toward +y, and the volume origin is a central point of the
xz-plane at y = 0. Units are millimetres everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_DTYPES = (np.uint8, np.int16, np.float32)

ROTATION_TOL = 1e-6


def _as_readonly(a, dtype=None, shape=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VoxelVolume:
    """Dense 3D scalar grid with physical spacing and origin.

    ``data`` is indexed ``[ix, iy, iz]``; ``origin`` is the world position of
    the centre of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("volume data must be 3-dimensional")
        if not any(data.dtype == np.dtype(t) for t in SUPPORTED_DTYPES):
            raise ValueError(f"unsupported element kind {data.dtype}; "
                             f"use one of uint8, int16, float32")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_readonly(self.spacing, np.float64, (3,)))
        object.__setattr__(self, "origin", _as_readonly(self.origin, np.float64, (3,)))
        if np.any(self.spacing <= 0):
            raise ValueError("spacing components must be strictly positive")

    @property
    def dims(self):
        return self.data.shape

    def extent_mm(self):
        """Physical size along each axis, voxel-centre to voxel-centre."""
        return (np.asarray(self.dims) - 1) * self.spacing

    def diagonal_mm(self) -> float:
        return float(np.linalg.norm(np.asarray(self.dims) * self.spacing))


class SegmentationVolume(VoxelVolume):
    """A uint8 VoxelVolume restricted to values {0, 1}."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.dtype != np.uint8:
            raise ValueError("segmentation volumes must be uint8")
        if self.data.size and int(self.data.max()) > 1:
            raise ValueError("segmentation voxels must be 0 or 1")


def voxel_to_world(vol: VoxelVolume, idx) -> np.ndarray:
    """World position (mm) of a possibly fractional voxel index."""
    return vol.origin + np.asarray(idx, dtype=np.float64) * vol.spacing


def world_to_voxel(vol: VoxelVolume, point) -> np.ndarray:
    """Fractional voxel index of a world position (mm)."""
    return (np.asarray(point, dtype=np.float64) - vol.origin) / vol.spacing


def trilinear_sample_many(vol: VoxelVolume, points) -> tuple[np.ndarray, np.ndarray]:
    """Trilinearly sample the volume at world points of shape (N, 3).

    Returns ``(values, valid)``; samples whose 8-corner neighbourhood is not
    fully inside the grid come back invalid with value NaN.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    f = (pts - vol.origin) / vol.spacing
    n = np.asarray(vol.dims)
    valid = np.all((f >= 0.0) & (f <= n - 1), axis=1)

    i0 = np.clip(np.floor(f).astype(np.int64), 0, np.maximum(n - 2, 0))
    frac = f - i0
    i1 = np.minimum(i0 + 1, n - 1)
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    x0 = np.clip(x0, 0, n[0] - 1); y0 = np.clip(y0, 0, n[1] - 1); z0 = np.clip(z0, 0, n[2] - 1)

    d = vol.data.astype(np.float64, copy=False)
    c000 = d[x0, y0, z0]; c100 = d[x1, y0, z0]
    c010 = d[x0, y1, z0]; c110 = d[x1, y1, z0]
    c001 = d[x0, y0, z1]; c101 = d[x1, y0, z1]
    c011 = d[x0, y1, z1]; c111 = d[x1, y1, z1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    values = c0 * (1 - fz) + c1 * fz
    values = np.where(valid, values, np.nan)
    return values, valid


def trilinear_sample(vol: VoxelVolume, world_point) -> float:
    """Trilinear interpolation at one world point; NaN when out of bounds."""
    values, _ = trilinear_sample_many(vol, np.asarray(world_point)[None, :])
    return float(values[0])


def dice_score(a: VoxelVolume, b: VoxelVolume) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|) of two binary volumes.

    Two entirely empty volumes score 1.0 by convention, so dice(a, a) is
    always 1.0.
    """
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")
    fa = a.data > 0
    fb = b.data > 0
    denom = int(fa.sum()) + int(fb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(fa, fb).sum()) / denom


# --- rigid transforms -------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormalized(m) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) to ``m`` via SVD with det fix."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def axis_angle_rotation(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0:
        return np.eye(3)
    a = a / n
    k = skew(a)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def rotation_angle_deg(r) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (float(np.trace(np.asarray(r))) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform: p_out = rotation @ p_in + translation (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _as_readonly(self.rotation, np.float64, (3, 3))
        t = _as_readonly(self.translation, np.float64, (3,))
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "RigidPose") -> float:
        """Relative rotation angle in degrees."""
        return rotation_angle_deg(self.rotation.T @ other.rotation)

    def translation_distance_to(self, other: "RigidPose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


def pose_from_twist(omega, upsilon) -> RigidPose:
    """Small-angle twist update (3 rotation + 3 translation components).

    The rotation is the first-order I + [omega]x re-orthonormalised exactly,
    which keeps RigidPose invariants tight for the increments ICP produces.
    """
    r = orthonormalized(np.eye(3) + skew(omega))
    return RigidPose(r, np.asarray(upsilon, dtype=np.float64))
