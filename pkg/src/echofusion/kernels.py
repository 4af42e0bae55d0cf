"""Numba kernels for the per-pixel / per-voxel hot loops.

All kernels are sequential @njit functions: results are bit-deterministic
and independent of any threading configuration. ECHOFUSION_THREADS is still
honoured by capping numba's thread pool at import time so that embedding
applications cannot oversubscribe through us.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit

_cap = os.environ.get("ECHOFUSION_THREADS")
if _cap:
    try:
        numba.set_num_threads(max(1, min(int(_cap), numba.config.NUMBA_NUM_THREADS)))
    except ValueError:
        pass


@njit(cache=True)
def _ray_aabb(ox, oy, oz, dx, dy, dz, lo0, lo1, lo2, hi0, hi1, hi2):
    """Entry/exit distances of a ray against an axis-aligned box."""
    tmin = -1.0e30
    tmax = 1.0e30
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    lo = (lo0, lo1, lo2)
    hi = (hi0, hi1, hi2)
    for a in range(3):
        if abs(d[a]) < 1e-12:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            t0 = (lo[a] - o[a]) / d[a]
            t1 = (hi[a] - o[a]) / d[a]
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tmin:
                tmin = t0
            if t1 < tmax:
                tmax = t1
    return tmin, tmax


@njit(cache=True, inline="always")
def _occupancy_at(occ, px, py, pz):
    """Trilinear occupancy sample; negative outside the grid."""
    nx, ny, nz = occ.shape
    if px < 0.0 or py < 0.0 or pz < 0.0 or px > nx - 1.0 or py > ny - 1.0 or pz > nz - 1.0:
        return -1.0
    i0 = min(int(np.floor(px)), nx - 2)
    j0 = min(int(np.floor(py)), ny - 2)
    k0 = min(int(np.floor(pz)), nz - 2)
    fx = px - i0
    fy = py - j0
    fz = pz - k0
    acc = 0.0
    for di in range(2):
        wi = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wj = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wk = fz if dk == 1 else 1.0 - fz
                acc += wi * wj * wk * occ[i0 + di, j0 + dj, k0 + dk]
    return acc


@njit(cache=True)
def render_depth_kernel(occ, org, sp, rot, trans, fx, fy, cx, cy,
                        width, height, step, near, far, level):
    """March camera rays through an occupancy field.

    ``occ`` is float32 (a binary segmentation, optionally pre-smoothed);
    the surface is the first crossing of ``level`` along the ray, sampled
    trilinearly at ``step`` mm and refined by one bisection step. Returns
    a (height, width) float32 image of camera-z depths, 0 = no hit.
    """
    depth = np.zeros((height, width), np.float32)
    lo0 = org[0]
    lo1 = org[1]
    lo2 = org[2]
    nx, ny, nz = occ.shape
    hi0 = org[0] + (nx - 1) * sp[0]
    hi1 = org[1] + (ny - 1) * sp[1]
    hi2 = org[2] + (nz - 1) * sp[2]
    for v in range(height):
        for u in range(width):
            kx = (u - cx) / fx
            ky = (v - cy) / fy
            knorm = np.sqrt(kx * kx + ky * ky + 1.0)
            # unit ray direction in world coordinates
            dx = (rot[0, 0] * kx + rot[0, 1] * ky + rot[0, 2]) / knorm
            dy = (rot[1, 0] * kx + rot[1, 1] * ky + rot[1, 2]) / knorm
            dz = (rot[2, 0] * kx + rot[2, 1] * ky + rot[2, 2]) / knorm
            tmin, tmax = _ray_aabb(trans[0], trans[1], trans[2], dx, dy, dz,
                                   lo0, lo1, lo2, hi0, hi1, hi2)
            s0 = max(tmin, near * knorm)
            s1 = min(tmax, far * knorm)
            if s1 <= s0:
                continue
            s = s0
            s_prev = -1.0
            hit = -1.0
            while s <= s1:
                px = (trans[0] + s * dx - org[0]) / sp[0]
                py = (trans[1] + s * dy - org[1]) / sp[1]
                pz = (trans[2] + s * dz - org[2]) / sp[2]
                if _occupancy_at(occ, px, py, pz) > level:
                    hit = s
                    break
                s_prev = s
                s += step
            if hit < 0.0:
                continue
            if s_prev > 0.0:
                # one bisection step between last background and first hit
                sm = 0.5 * (s_prev + hit)
                px = (trans[0] + sm * dx - org[0]) / sp[0]
                py = (trans[1] + sm * dy - org[1]) / sp[1]
                pz = (trans[2] + sm * dz - org[2]) / sp[2]
                if _occupancy_at(occ, px, py, pz) > level:
                    hit = 0.5 * (s_prev + sm)
                else:
                    hit = 0.5 * (sm + hit)
            d_cam = hit / knorm
            if near < d_cam < far:
                depth[v, u] = d_cam
    return depth


@njit(cache=True)
def integrate_kernel(tsdf, weight, grid_org, voxel_size, truncation, max_weight,
                     depth, rot_wc, trans_wc, fx, fy, cx, cy):
    """Fuse one depth frame into the TSDF by weighted running average.

    ``rot_wc``/``trans_wc`` map world (grid) points into the camera frame.
    Projective signed distance: depth(pixel) - voxel camera z, clamped to
    [-1, 1] after division by the truncation band.
    """
    nx, ny, nz = tsdf.shape
    height, width = depth.shape
    for i in range(nx):
        wx = grid_org[0] + i * voxel_size
        for j in range(ny):
            wy = grid_org[1] + j * voxel_size
            for k in range(nz):
                wz = grid_org[2] + k * voxel_size
                zc = rot_wc[2, 0] * wx + rot_wc[2, 1] * wy + rot_wc[2, 2] * wz + trans_wc[2]
                if zc <= 0.0:
                    continue
                xc = rot_wc[0, 0] * wx + rot_wc[0, 1] * wy + rot_wc[0, 2] * wz + trans_wc[0]
                yc = rot_wc[1, 0] * wx + rot_wc[1, 1] * wy + rot_wc[1, 2] * wz + trans_wc[1]
                u = int(np.floor(fx * xc / zc + cx + 0.5))
                v = int(np.floor(fy * yc / zc + cy + 0.5))
                if u < 0 or u >= width or v < 0 or v >= height:
                    continue
                d = depth[v, u]
                if d <= 0.0:
                    continue
                sdf = d - zc
                if sdf < -truncation:
                    continue
                val = sdf / truncation
                if val > 1.0:
                    val = 1.0
                elif val < -1.0:
                    val = -1.0
                w_old = weight[i, j, k]
                w_new = w_old + 1.0
                tsdf[i, j, k] = (tsdf[i, j, k] * w_old + val) / w_new
                if w_new > max_weight:
                    w_new = max_weight
                weight[i, j, k] = w_new


@njit(cache=True, inline="always")
def _tsdf_trilinear(tsdf, weight, gx, gy, gz):
    """Trilinear TSDF sample in grid-index coordinates.

    Returns (value, ok); ok is False outside the grid or where any of the
    8 corners is unobserved (zero weight).
    """
    nx, ny, nz = tsdf.shape
    if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > nx - 1.0 or gy > ny - 1.0 or gz > nz - 1.0:
        return 0.0, False
    i0 = int(np.floor(gx))
    j0 = int(np.floor(gy))
    k0 = int(np.floor(gz))
    if i0 > nx - 2:
        i0 = nx - 2
    if j0 > ny - 2:
        j0 = ny - 2
    if k0 > nz - 2:
        k0 = nz - 2
    fx = gx - i0
    fy = gy - j0
    fz = gz - k0
    acc = 0.0
    for di in range(2):
        wi = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wj = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wk = fz if dk == 1 else 1.0 - fz
                if weight[i0 + di, j0 + dj, k0 + dk] <= 0.0:
                    return 0.0, False
                acc += wi * wj * wk * tsdf[i0 + di, j0 + dj, k0 + dk]
    return acc, True


@njit(cache=True)
def raycast_kernel(tsdf, weight, grid_org, voxel_size, truncation,
                   rot_cw, trans_cw, fx, fy, cx, cy, width, height):
    """Raycast the TSDF zero crossing from a camera pose.

    ``rot_cw``/``trans_cw`` map camera points to world (grid) coordinates.
    Far from the surface the march advances half a truncation band per step,
    near it (|tsdf| < 0.8) half a voxel; the +to- crossing is localised by
    linear interpolation. Outputs are camera-frame vertex and normal maps
    with a validity mask.
    """
    verts = np.zeros((height, width, 3), np.float32)
    normals = np.zeros((height, width, 3), np.float32)
    valid = np.zeros((height, width), np.uint8)
    nx, ny, nz = tsdf.shape
    lo0 = grid_org[0]
    lo1 = grid_org[1]
    lo2 = grid_org[2]
    hi0 = grid_org[0] + (nx - 1) * voxel_size
    hi1 = grid_org[1] + (ny - 1) * voxel_size
    hi2 = grid_org[2] + (nz - 1) * voxel_size
    coarse = 0.5 * truncation
    fine = 0.5 * voxel_size
    grad_eps = voxel_size
    for v in range(height):
        for u in range(width):
            kx = (u - cx) / fx
            ky = (v - cy) / fy
            knorm = np.sqrt(kx * kx + ky * ky + 1.0)
            dx = (rot_cw[0, 0] * kx + rot_cw[0, 1] * ky + rot_cw[0, 2]) / knorm
            dy = (rot_cw[1, 0] * kx + rot_cw[1, 1] * ky + rot_cw[1, 2]) / knorm
            dz = (rot_cw[2, 0] * kx + rot_cw[2, 1] * ky + rot_cw[2, 2]) / knorm
            tmin, tmax = _ray_aabb(trans_cw[0], trans_cw[1], trans_cw[2],
                                   dx, dy, dz, lo0, lo1, lo2, hi0, hi1, hi2)
            if tmax <= tmin:
                continue
            s = max(tmin, 0.0)
            f_prev = 0.0
            s_prev = -1.0
            prev_ok = False
            while s <= tmax:
                gx = (trans_cw[0] + s * dx - lo0) / voxel_size
                gy = (trans_cw[1] + s * dy - lo1) / voxel_size
                gz = (trans_cw[2] + s * dz - lo2) / voxel_size
                f, ok = _tsdf_trilinear(tsdf, weight, gx, gy, gz)
                if ok and prev_ok and f_prev > 0.0 and f <= 0.0:
                    denom = f_prev - f
                    if denom <= 1e-12:
                        s_hit = s
                    else:
                        s_hit = s_prev + (s - s_prev) * f_prev / denom
                    wxh = trans_cw[0] + s_hit * dx
                    wyh = trans_cw[1] + s_hit * dy
                    wzh = trans_cw[2] + s_hit * dz
                    # normal from the TSDF gradient (central differences)
                    g0p, ok0p = _tsdf_trilinear(tsdf, weight, (wxh + grad_eps - lo0) / voxel_size, (wyh - lo1) / voxel_size, (wzh - lo2) / voxel_size)
                    g0m, ok0m = _tsdf_trilinear(tsdf, weight, (wxh - grad_eps - lo0) / voxel_size, (wyh - lo1) / voxel_size, (wzh - lo2) / voxel_size)
                    g1p, ok1p = _tsdf_trilinear(tsdf, weight, (wxh - lo0) / voxel_size, (wyh + grad_eps - lo1) / voxel_size, (wzh - lo2) / voxel_size)
                    g1m, ok1m = _tsdf_trilinear(tsdf, weight, (wxh - lo0) / voxel_size, (wyh - grad_eps - lo1) / voxel_size, (wzh - lo2) / voxel_size)
                    g2p, ok2p = _tsdf_trilinear(tsdf, weight, (wxh - lo0) / voxel_size, (wyh - lo1) / voxel_size, (wzh + grad_eps - lo2) / voxel_size)
                    g2m, ok2m = _tsdf_trilinear(tsdf, weight, (wxh - lo0) / voxel_size, (wyh - lo1) / voxel_size, (wzh - grad_eps - lo2) / voxel_size)
                    if ok0p and ok0m and ok1p and ok1m and ok2p and ok2m:
                        gx_ = g0p - g0m
                        gy_ = g1p - g1m
                        gz_ = g2p - g2m
                        gn = np.sqrt(gx_ * gx_ + gy_ * gy_ + gz_ * gz_)
                        if gn > 1e-12:
                            # camera-frame vertex and normal
                            pxc = wxh - trans_cw[0]
                            pyc = wyh - trans_cw[1]
                            pzc = wzh - trans_cw[2]
                            verts[v, u, 0] = rot_cw[0, 0] * pxc + rot_cw[1, 0] * pyc + rot_cw[2, 0] * pzc
                            verts[v, u, 1] = rot_cw[0, 1] * pxc + rot_cw[1, 1] * pyc + rot_cw[2, 1] * pzc
                            verts[v, u, 2] = rot_cw[0, 2] * pxc + rot_cw[1, 2] * pyc + rot_cw[2, 2] * pzc
                            gx_ /= gn
                            gy_ /= gn
                            gz_ /= gn
                            normals[v, u, 0] = rot_cw[0, 0] * gx_ + rot_cw[1, 0] * gy_ + rot_cw[2, 0] * gz_
                            normals[v, u, 1] = rot_cw[0, 1] * gx_ + rot_cw[1, 1] * gy_ + rot_cw[2, 1] * gz_
                            normals[v, u, 2] = rot_cw[0, 2] * gx_ + rot_cw[1, 2] * gy_ + rot_cw[2, 2] * gz_
                            valid[v, u] = 1
                    break
                if ok:
                    s_prev = s
                    f_prev = f
                    prev_ok = True
                    s += fine if abs(f) < 0.8 else coarse
                else:
                    prev_ok = False
                    s += coarse
    return verts, normals, valid
