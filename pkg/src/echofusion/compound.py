"""Fuse tracked intensity frames into one extended-field-of-view volume by
weighted averaging in a global output grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RigidPose, VoxelVolume, trilinear_sample_many

_CHUNK_VOXELS = 1 << 19


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: tuple
    origin: tuple


@dataclass(frozen=True)
class CompoundResult:
    """Accumulated average plus the per-voxel contribution count; intensity
    is only defined where weight > 0 (zero elsewhere)."""

    volume: VoxelVolume     # float32 average
    weight: VoxelVolume     # float32 contribution count


def default_grid_spec(frames, max_dim: int = 320) -> GridSpec:
    """Output grid covering every transformed frame bounding box at the
    finest frame spacing (coarsened if the grid would exceed max_dim)."""
    if not frames:
        raise ValueError("empty frame list")
    corners_all = []
    spacing = None
    for vol, pose in frames:
        n = np.asarray(vol.dims)
        lo = vol.origin
        hi = vol.origin + (n - 1) * vol.spacing
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        corners_all.append(pose.apply(corners))
        s = float(np.min(vol.spacing))
        spacing = s if spacing is None else min(spacing, s)
    pts = np.concatenate(corners_all, axis=0)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    if float(extent.max()) / spacing > max_dim:
        spacing = float(extent.max()) / max_dim
    dims = np.maximum(np.floor(extent / spacing).astype(int) + 1, 2)
    return GridSpec(tuple(int(d) for d in dims), (spacing,) * 3, tuple(lo))


def compound(frames, grid_spec: GridSpec | None = None,
             support=None) -> CompoundResult:
    """Average the frames into the output grid.

    ``frames`` is a sequence of (VoxelVolume, RigidPose) with poses mapping
    frame-local (volume) coordinates to the global frame. ``support`` is an
    optional per-frame callable support(frame_index, local_points) -> bool
    mask restricting samples to the sector footprint; volume bounds always
    apply. Each contributing frame has weight 1, so the result is invariant
    to frame order.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame list")
    spec = grid_spec if grid_spec is not None else default_grid_spec(frames)
    dims = tuple(int(d) for d in spec.dims)
    origin = np.asarray(spec.origin, dtype=np.float64)
    spacing = np.asarray(spec.spacing, dtype=np.float64)

    n_total = dims[0] * dims[1] * dims[2]
    accum = np.zeros(n_total, np.float64)
    wsum = np.zeros(n_total, np.float64)
    inverses = [pose.inverse() for _vol, pose in frames]

    for start in range(0, n_total, _CHUNK_VOXELS):
        stop = min(start + _CHUNK_VOXELS, n_total)
        flat = np.arange(start, stop)
        iz = flat % dims[2]
        iy = (flat // dims[2]) % dims[1]
        ix = flat // (dims[2] * dims[1])
        pts_global = origin + np.stack([ix, iy, iz], axis=1) * spacing
        for f_idx, (vol, _pose) in enumerate(frames):
            local = inverses[f_idx].apply(pts_global)
            values, valid = trilinear_sample_many(vol, local)
            if support is not None:
                valid = valid & support(f_idx, local)
            accum[flat[valid]] += values[valid]
            wsum[flat[valid]] += 1.0

    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(wsum > 0, accum / np.maximum(wsum, 1e-30), 0.0)
    # voxels were enumerated z-fastest; volume storage is [ix, iy, iz]
    out3 = out.reshape(dims[0], dims[1], dims[2]).astype(np.float32)
    w3 = wsum.reshape(dims[0], dims[1], dims[2]).astype(np.float32)
    return CompoundResult(VoxelVolume(out3, spec.spacing, spec.origin),
                          VoxelVolume(w3, spec.spacing, spec.origin))


def slice_indices(vol: VoxelVolume) -> tuple[int, int, int]:
    """Central slice index along each axis (floor of dims/2)."""
    return tuple(int(d) // 2 for d in vol.dims)


def orthogonal_slices(vol: VoxelVolume):
    """The three central planes as min-max normalised 8-bit images.

    Returns (xy, yz, xz); a constant volume normalises to all-zero slices.
    """
    cx, cy, cz = slice_indices(vol)
    planes = {
        "xy": vol.data[:, :, cz],
        "yz": vol.data[cx, :, :],
        "xz": vol.data[:, cy, :],
    }
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    out = []
    for key in ("xy", "yz", "xz"):
        plane = planes[key].astype(np.float64)
        if hi > lo:
            img = np.floor((plane - lo) / (hi - lo) * 255.0 + 0.5)
        else:
            img = np.zeros_like(plane)
        out.append(img.astype(np.uint8))
    return tuple(out)
