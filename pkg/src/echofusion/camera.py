"""Virtual pinhole camera: intrinsics from sector placement, depth rendering
from binary segmentations, and per-pixel vertex/normal map computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import tandg

from .core import RigidPose, SegmentationVolume, VoxelVolume
from .kernels import render_depth_kernel

DEFAULT_IMAGE_SIZE = 480

# Camera axes expressed in probe/world coordinates: optical axis +y,
# image u along +x, image v along -z. Right-handed, det = +1.
PROBE_CAMERA_ROTATION = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, -1.0, 0.0],
])


@dataclass(frozen=True)
class CameraPlacement:
    """Virtual camera spot: apex distance below y=0 on the line x=z=0, and
    the field-of-view angle applied to both image axes."""

    distance: float
    view_angle: float

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if not 0 < self.view_angle < 180:
            raise ValueError("view angle must lie in (0, 180) degrees")


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidPose = field(default_factory=RigidPose.identity)
    near: float = 1.0
    far: float = math.inf

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    def with_pose(self, pose: RigidPose) -> "CameraModel":
        return CameraModel(self.width, self.height, self.fx, self.fy,
                           self.cx, self.cy, pose, self.near, self.far)

    def downsampled(self) -> "CameraModel":
        """Intrinsics after 2x2 block averaging (pixel centres shift 0.5)."""
        return CameraModel(self.width // 2, self.height // 2,
                           self.fx / 2.0, self.fy / 2.0,
                           (self.cx - 0.5) / 2.0, (self.cy - 0.5) / 2.0,
                           self.pose, self.near, self.far)


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel camera-z depth in mm, 0 = invalid / no hit.

    The stored value is the z component of the camera-frame surface point,
    so back-projection is vertex = depth * ((u-cx)/fx, (v-cy)/fy, 1).
    """

    depth: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float32))
        if d.ndim != 2:
            raise ValueError("depth image must be 2-dimensional")
        d.flags.writeable = False
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True)
class VertexNormalMaps:
    """Camera-frame 3D point and unit normal per pixel, plus validity."""

    vertices: np.ndarray
    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float32))
        n = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float32))
        m = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
        if v.ndim != 3 or v.shape[2] != 3 or v.shape != n.shape or v.shape[:2] != m.shape:
            raise ValueError("inconsistent map shapes")
        for a in (v, n, m):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "valid", m)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]


def focal_from_view_angle(width: int, view_angle_deg: float) -> float:
    """Pinhole focal length in px: half the width over tan of half the angle.

    Uses degree-exact tangent so that e.g. a 90 degree angle on a 480 px
    image gives exactly 240 px.
    """
    return (width / 2.0) / float(tandg(view_angle_deg / 2.0))


def camera_offset_pose(placement: CameraPlacement) -> RigidPose:
    """Fixed camera-in-probe pose: at (0, -distance, 0) looking along +y."""
    return RigidPose(PROBE_CAMERA_ROTATION,
                     np.array([0.0, -placement.distance, 0.0]))


def build_camera(placement: CameraPlacement,
                 width: int = DEFAULT_IMAGE_SIZE,
                 height: int = DEFAULT_IMAGE_SIZE,
                 near: float = 1.0,
                 far: float = math.inf) -> CameraModel:
    """Camera at (0, -distance, 0) looking along +y with fx = fy from the
    view angle and the principal point at the image centre."""
    f = focal_from_view_angle(width, placement.view_angle)
    pose = camera_offset_pose(placement)
    return CameraModel(width=width, height=height, fx=f, fy=f,
                       cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                       pose=pose, near=near, far=far)


def render_depth(seg: SegmentationVolume | VoxelVolume, cam: CameraModel,
                 step: float | None = None,
                 smooth_sigma_voxels: float = 0.7) -> DepthImage:
    """Ray-march the segmentation and return first-surface depths.

    The binary occupancy is pre-smoothed by a small Gaussian and the ray
    stops at the first 0.5-crossing of the interpolated field, which
    recovers the surface to well below voxel quantisation. Step defaults
    to half the minimum voxel spacing; the hit is refined by one bisection
    step. Purely per-pixel, so results are independent of traversal order.
    """
    if step is None:
        step = 0.5 * float(np.min(seg.spacing))
    far = cam.far
    if not math.isfinite(far):
        far = float(np.linalg.norm(cam.pose.translation - seg.origin)) + seg.diagonal_mm()
    field = seg.data.astype(np.float32)
    if smooth_sigma_voxels > 0:
        field = ndimage.gaussian_filter(field, smooth_sigma_voxels)
    depth = render_depth_kernel(
        np.ascontiguousarray(field),
        seg.origin, seg.spacing,
        np.ascontiguousarray(cam.pose.rotation),
        np.ascontiguousarray(cam.pose.translation),
        cam.fx, cam.fy, cam.cx, cam.cy,
        cam.width, cam.height, float(step), cam.near, far, 0.5)
    return DepthImage(depth)


def render_grayscale(intensity: VoxelVolume, d: DepthImage,
                     cam: CameraModel) -> np.ndarray:
    """Visualization companion to the depth channel: the co-registered
    intensity sampled at each depth hit, min-max normalised to uint8.
    Tracking never consumes this."""
    from .core import trilinear_sample_many

    verts = back_project(d.depth.astype(np.float64), cam)
    valid = d.depth > 0
    pts_world = cam.pose.apply(verts[valid].reshape(-1, 3))
    values, ok = trilinear_sample_many(intensity, pts_world)
    values = np.where(ok, values, 0.0)
    img = np.zeros(d.depth.shape, np.float64)
    img[valid] = values
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        img = (img - lo) / (hi - lo) * 255.0
    return np.floor(img + 0.5).astype(np.uint8)


def back_project(depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Camera-frame points for every pixel of a depth array (invalid -> 0)."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    kx = (u[None, :] - cam.cx) / cam.fx
    ky = (v[:, None] - cam.cy) / cam.fy
    verts = np.empty((h, w, 3), np.float64)
    verts[:, :, 0] = depth * kx
    verts[:, :, 1] = depth * ky
    verts[:, :, 2] = depth
    return verts


def compute_vertex_normal_maps(d: DepthImage, cam: CameraModel) -> VertexNormalMaps:
    """Back-project depths and take normals from forward vertex differences.

    Normals are oriented toward the camera (negative z for a fronto-parallel
    plane). A pixel is valid when itself and its +u/+v neighbours carry
    depth and the cross product is non-degenerate.
    """
    depth = d.depth.astype(np.float64)
    verts = back_project(depth, cam)
    h, w = depth.shape
    ok = depth > 0

    du = np.zeros_like(verts)
    dv = np.zeros_like(verts)
    du[:, :-1, :] = verts[:, 1:, :] - verts[:, :-1, :]
    dv[:-1, :, :] = verts[1:, :, :] - verts[:-1, :, :]

    n = np.cross(dv, du)
    norm = np.linalg.norm(n, axis=2)
    valid = ok.copy()
    valid[:, -1] = False
    valid[-1, :] = False
    valid[:, :-1] &= ok[:, 1:]
    valid[:-1, :] &= ok[1:, :]
    valid &= norm > 1e-12

    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[:, :, None]
    n[~valid] = 0.0
    v_out = np.where(valid[:, :, None], verts, 0.0)
    return VertexNormalMaps(v_out.astype(np.float32), n.astype(np.float32), valid)


def bilateral_depth_filter(depth: np.ndarray, spatial_sigma_px: float = 2.0,
                           range_sigma_mm: float = 3.0,
                           radius_px: int = 4) -> np.ndarray:
    """Edge-preserving depth smoothing for map computation.

    Voxelised segmentations render with half-voxel staircase noise that
    wrecks finite-difference normals; bilateral smoothing flattens the
    staircase while silhouettes (large depth jumps) stay sharp. Invalid
    pixels neither contribute nor get filled.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    acc = np.zeros_like(d)
    wsum = np.zeros_like(d)
    inv2_s = 1.0 / (2.0 * spatial_sigma_px ** 2)
    inv2_r = 1.0 / (2.0 * range_sigma_mm ** 2)
    h, w = d.shape
    for dy in range(-radius_px, radius_px + 1):
        for dx in range(-radius_px, radius_px + 1):
            w_s = np.exp(-(dx * dx + dy * dy) * inv2_s)
            ys = slice(max(0, dy), min(h, h + dy))
            yd = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            shifted = d[ys, xs]
            ok = valid[ys, xs] & valid[yd, xd]
            diff = shifted - d[yd, xd]
            w_r = np.where(ok, np.exp(-diff * diff * inv2_r) * w_s, 0.0)
            acc[yd, xd] += w_r * np.where(ok, shifted, 0.0)
            wsum[yd, xd] += w_r
    out = np.where(valid & (wsum > 0), acc / np.maximum(wsum, 1e-30), 0.0)
    return out


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 averaging of valid depths; a block with no valid pixel is invalid."""
    h, w = depth.shape
    h2, w2 = h // 2, w // 2
    blocks = depth[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h2, w2, 4)
    valid = blocks > 0
    count = valid.sum(axis=2)
    total = np.where(valid, blocks, 0.0).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return out.astype(depth.dtype)


def incidence_cosines(maps: VertexNormalMaps) -> np.ndarray:
    """Cosine of the angle between each surface normal and the reverse
    viewing ray (1 = fronto-parallel, 0 = grazing); 0 where invalid."""
    v = maps.vertices.astype(np.float64)
    norms = np.linalg.norm(v, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        rays = v / np.maximum(norms, 1e-12)[:, :, None]
    cosi = -np.sum(maps.normals.astype(np.float64) * rays, axis=2)
    return np.where(maps.valid, cosi, 0.0)


def reject_grazing(maps: VertexNormalMaps, max_incidence_deg: float) -> VertexNormalMaps:
    """Invalidate pixels seen at more than ``max_incidence_deg``.

    Grazing surfaces are both unreliable (rim pixels) and actively harmful
    for sector data: the fan's crop planes pass through the camera apex,
    so they show up at near-90 degree incidence, move rigidly with the
    camera, and would otherwise anchor the alignment to zero motion.
    """
    keep = incidence_cosines(maps) >= math.cos(math.radians(max_incidence_deg))
    valid = maps.valid & keep
    return VertexNormalMaps(
        np.where(valid[:, :, None], maps.vertices, 0.0).astype(np.float32),
        np.where(valid[:, :, None], maps.normals, 0.0).astype(np.float32),
        valid)


def downsample_normals(normals: np.ndarray, valid: np.ndarray):
    """2x2 valid-aware averaging of a unit normal field, renormalised.

    Averaging (rather than recomputing from smoothed vertices) preserves
    the fine-scale normal variation that pins tangential sliding during
    coarse registration.
    """
    h, w = valid.shape
    h2, w2 = h // 2, w // 2
    n = np.where(valid[:, :, None], normals, 0.0)[:h2 * 2, :w2 * 2]
    blocks = n.reshape(h2, 2, w2, 2, 3).sum(axis=(1, 3))
    count = valid[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    norm = np.linalg.norm(blocks, axis=2)
    ok = (count > 0) & (norm > 1e-9)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = blocks / np.maximum(norm, 1e-30)[:, :, None]
    out[~ok] = 0.0
    return out, ok


def depth_pyramid(d: DepthImage, cam: CameraModel, levels: int):
    """Coarse-to-fine is easiest as fine-to-coarse storage: index 0 is the
    input resolution."""
    depths = [d.depth.astype(np.float64)]
    cams = [cam]
    for _ in range(levels - 1):
        depths.append(downsample_depth(depths[-1]))
        cams.append(cams[-1].downsampled())
    return depths, cams


def map_pyramid(maps: VertexNormalMaps, cam: CameraModel, levels: int):
    """Per-level VertexNormalMaps: vertices re-projected from depth-aware
    downsampled depth, normals averaged down from the finest level."""
    depth0 = np.where(maps.valid, maps.vertices[:, :, 2], 0.0).astype(np.float64)
    out = [maps]
    cams = [cam]
    depth = depth0
    normals = maps.normals.astype(np.float64)
    valid = maps.valid
    for _ in range(levels - 1):
        depth = downsample_depth(depth)
        normals, n_ok = downsample_normals(normals, valid)
        cams.append(cams[-1].downsampled())
        verts = back_project(depth, cams[-1])
        valid = (depth > 0) & n_ok
        verts = np.where(valid[:, :, None], verts, 0.0)
        out.append(VertexNormalMaps(verts.astype(np.float32),
                                    normals.astype(np.float32), valid))
    return out, cams
