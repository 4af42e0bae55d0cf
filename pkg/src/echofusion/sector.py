"""Recover the ultrasound sector apex and opening angle from an intensity
volume, and turn them into a virtual camera placement.

The chain per central slice: threshold + morphological closing -> Canny
edges -> Hough line pairs -> intersection/opening angle. The camera distance
is the smaller of the two apex depths below y=0 and the view angle the wider
of the two openings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import CameraPlacement
from .core import VoxelVolume

log = logging.getLogger(__name__)

DISAGREEMENT_WARN_DEG = 30.0


class SectorError(Exception):
    """Sector geometry could not be recovered."""


@dataclass(frozen=True)
class SectorParams:
    """Detection knobs; config section [sector]."""

    threshold: float = 1.0
    closing_kernel: int = 5
    canny_sigma: float = 1.4
    canny_low_ratio: float = 0.10
    canny_high_ratio: float = 0.30
    hough_angle_step_deg: float = 0.5
    hough_rho_step_px: float = 1.0
    min_line_separation_deg: float = 10.0
    nms_angle_deg: float = 5.0
    nms_rho_px: float = 5.0
    min_votes_ratio: float = 0.25
    refine_band_px: float = 1.5   # 0 disables the least-squares line polish


@dataclass(frozen=True)
class SectorFit2D:
    """One in-slice fit: apex in slice mm coordinates and opening angle."""

    apex: np.ndarray                # (2,) mm, slice axes order
    opening_angle: float            # degrees
    line_params: tuple              # two (angle_rad, offset_px) pairs
    apex_px: np.ndarray = field(default=None)


@dataclass(frozen=True)
class SectorEstimate:
    placement: CameraPlacement
    fit_yz: SectorFit2D
    fit_xy: SectorFit2D


def extract_sector_mask(image: np.ndarray, params: SectorParams = SectorParams()) -> np.ndarray:
    """Threshold above the zero padding, then close small speckle holes."""
    img = np.asarray(image, dtype=np.float64)
    mask = img > params.threshold
    if not mask.any():
        raise SectorError("no sector found")
    k = int(params.closing_kernel)
    if k > 1:
        # pad so the erosion half of the closing cannot shave border pixels
        padded = np.pad(mask, k, mode="constant")
        closed = ndimage.binary_closing(padded, structure=np.ones((k, k), bool))
        mask = closed[k:-k, k:-k]
    return mask


def canny_edges(mask: np.ndarray, params: SectorParams = SectorParams()) -> np.ndarray:
    """Canny on a binary mask: Gaussian smoothing, Sobel gradients,
    non-maximum suppression and double-threshold hysteresis (thresholds as
    fractions of the maximum gradient magnitude)."""
    img = ndimage.gaussian_filter(np.asarray(mask, dtype=np.float64), params.canny_sigma)
    gr = ndimage.sobel(img, axis=0)
    gc = ndimage.sobel(img, axis=1)
    mag = np.hypot(gr, gc)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag, dtype=bool)
    nms = _interpolated_nms(mag, gr, gc)

    high = params.canny_high_ratio * peak
    low = params.canny_low_ratio * peak
    strong = nms & (mag >= high)
    weak = nms & (mag >= low)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), int))
    if n == 0:
        return np.zeros_like(weak)
    keep = np.zeros(n + 1, bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def _interpolated_nms(mag, gr, gc):
    """Thin the gradient ridge: keep pixels not below both magnitudes
    interpolated along the gradient direction."""
    p = np.pad(mag, 1, mode="constant")
    c = p[1:-1, 1:-1]
    east = p[1:-1, 2:]
    west = p[1:-1, :-2]
    south = p[2:, 1:-1]
    north = p[:-2, 1:-1]
    se = p[2:, 2:]
    nw = p[:-2, :-2]
    sw = p[2:, :-2]
    ne = p[:-2, 2:]

    abs_r = np.abs(gr)
    abs_c = np.abs(gc)
    same = gr * gc >= 0

    with np.errstate(invalid="ignore", divide="ignore"):
        w_h = np.where(abs_c > 0, abs_r / np.maximum(abs_c, 1e-300), 0.0)
        w_v = np.where(abs_r > 0, abs_c / np.maximum(abs_r, 1e-300), 0.0)

    # gradient closer to the column axis: compare against E/W neighbours
    m1_h = np.where(same, (1 - w_h) * east + w_h * se, (1 - w_h) * east + w_h * ne)
    m2_h = np.where(same, (1 - w_h) * west + w_h * nw, (1 - w_h) * west + w_h * sw)
    # gradient closer to the row axis: compare against N/S neighbours
    m1_v = np.where(same, (1 - w_v) * south + w_v * se, (1 - w_v) * south + w_v * sw)
    m2_v = np.where(same, (1 - w_v) * north + w_v * nw, (1 - w_v) * north + w_v * ne)

    horizontal = abs_c >= abs_r
    m1 = np.where(horizontal, m1_h, m1_v)
    m2 = np.where(horizontal, m2_h, m2_v)
    return (mag > 0) & (c >= m1) & (c >= m2)


def _line_metric_sep_deg(theta1: float, theta2: float) -> float:
    """Angular separation of two undirected lines, degrees in [0, 90]."""
    d = abs(theta1 - theta2) % np.pi
    return np.degrees(min(d, np.pi - d))


def hough_sector_lines(edges: np.ndarray, params: SectorParams = SectorParams()):
    """Two dominant lines from a (theta, rho) accumulator.

    theta is the normal angle of row*cos(theta) + col*sin(theta) = rho.
    Peaks are non-maximum suppressed over a (nms_angle x nms_rho) window
    with angle wraparound, and the runner-up must differ from the winner by
    the configured minimum separation.
    """
    pts = np.argwhere(edges)
    if len(pts) < 2:
        raise SectorError("sector lines not found")
    h, w = edges.shape
    diag = float(np.hypot(h, w))
    theta_step = np.deg2rad(params.hough_angle_step_deg)
    thetas = np.arange(0.0, np.pi - 1e-9, theta_step)
    n_rho = int(np.ceil(diag / params.hough_rho_step_px))
    rho_edges_lo = -(n_rho + 0.5) * params.hough_rho_step_px

    rows = pts[:, 0:1].astype(np.float64)
    cols = pts[:, 1:2].astype(np.float64)
    rho = rows * np.cos(thetas)[None, :] + cols * np.sin(thetas)[None, :]
    rho_idx = np.floor((rho - rho_edges_lo) / params.hough_rho_step_px).astype(np.int64)
    n_bins = 2 * n_rho + 1
    rho_idx = np.clip(rho_idx, 0, n_bins - 1)
    theta_idx = np.broadcast_to(np.arange(len(thetas))[None, :], rho_idx.shape)
    acc = np.bincount((theta_idx * n_bins + rho_idx).ravel(),
                      minlength=len(thetas) * n_bins).reshape(len(thetas), n_bins)
    acc = acc.astype(np.float64)

    # NMS with wraparound: theta +- 180 deg is the same line with rho negated
    wa = max(1, int(round(params.nms_angle_deg / params.hough_angle_step_deg)))
    wr = max(1, int(round(params.nms_rho_px / params.hough_rho_step_px)))
    padded = np.vstack([acc[-wa:, ::-1], acc, acc[:wa, ::-1]])
    local_max = ndimage.maximum_filter(padded, size=(2 * wa + 1, 2 * wr + 1),
                                       mode="constant")[wa:-wa]
    min_votes = max(params.min_votes_ratio * acc.max(), 2.0)
    peak_mask = (acc >= local_max) & (acc >= min_votes)
    peaks = np.argwhere(peak_mask)
    if len(peaks) == 0:
        raise SectorError("sector lines not found")
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -acc[peaks[:, 0], peaks[:, 1]]))
    peaks = peaks[order]

    first = peaks[0]
    second = None
    for cand in peaks[1:]:
        sep = _line_metric_sep_deg(thetas[first[0]], thetas[cand[0]])
        if sep >= params.min_line_separation_deg:
            second = cand
            break
    if second is None:
        raise SectorError("sector lines not found")

    def to_line(peak):
        theta = float(thetas[peak[0]])
        rho_val = rho_edges_lo + (peak[1] + 0.5) * params.hough_rho_step_px
        return _refine_line((theta, float(rho_val)), pts, params)

    return to_line(first), to_line(second)


def _refine_line(line, edge_pts, params: SectorParams):
    """Total-least-squares polish of a Hough line against the edge pixels
    within refine_band_px of it; removes accumulator quantisation bias."""
    if params.refine_band_px <= 0:
        return line
    theta, rho = line
    n = np.array([np.cos(theta), np.sin(theta)])
    d = edge_pts @ n - rho
    sel = np.abs(d) <= params.refine_band_px
    if int(sel.sum()) < 5:
        return line
    pts = edge_pts[sel].astype(np.float64)
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    w, v = np.linalg.eigh(cov)
    normal = v[:, 0]  # smallest-variance direction
    theta_new = float(np.arctan2(normal[1], normal[0]) % np.pi)
    n_new = np.array([np.cos(theta_new), np.sin(theta_new)])
    rho_new = float(centroid @ n_new)
    return (theta_new, rho_new)


def line_intersection_angle(l1, l2, toward=None):
    """Intersection point and opening angle of two (angle, offset) lines.

    The opening is measured between the flank directions oriented along
    ``toward`` (default: the +row direction, where the sector opens in our
    slice convention).
    """
    t1, r1 = l1
    t2, r2 = l2
    if _line_metric_sep_deg(t1, t2) <= 0.1:
        raise SectorError("parallel flanks")
    a = np.array([[np.cos(t1), np.sin(t1)], [np.cos(t2), np.sin(t2)]])
    point = np.linalg.solve(a, np.array([r1, r2]))
    d1 = np.array([-np.sin(t1), np.cos(t1)])
    d2 = np.array([-np.sin(t2), np.cos(t2)])
    hint = np.array([1.0, 0.0]) if toward is None else np.asarray(toward, dtype=np.float64)
    for d in (d1, d2):
        s = float(d @ hint)
        if s < 0 or (s == 0 and d[1] < 0):
            d *= -1.0
    angle = float(np.degrees(np.arccos(np.clip(d1 @ d2, -1.0, 1.0))))
    return point, angle


def fit_sector_slice(image: np.ndarray, spacing2, origin2,
                     params: SectorParams = SectorParams()) -> SectorFit2D:
    """Run the full per-slice chain and convert to physical coordinates.

    ``spacing2``/``origin2`` are the slice's (axis0, axis1) mm scales; the
    opening angle is computed on spacing-scaled flank directions so
    anisotropic voxels do not bias it.
    """
    spacing2 = np.asarray(spacing2, dtype=np.float64)
    origin2 = np.asarray(origin2, dtype=np.float64)
    mask = extract_sector_mask(image, params)
    edges = canny_edges(mask, params)
    l1, l2 = hough_sector_lines(edges, params)

    centroid = np.array(ndimage.center_of_mass(mask))
    point_px, _ = line_intersection_angle(l1, l2)
    hint = centroid - point_px
    if np.linalg.norm(hint) < 1e-9:
        hint = None
    point_px, _ = line_intersection_angle(l1, l2, toward=hint)

    dirs = []
    for theta, _rho in (l1, l2):
        d = np.array([-np.sin(theta), np.cos(theta)])
        if hint is not None and d @ hint < 0:
            d = -d
        d_mm = d * spacing2
        dirs.append(d_mm / np.linalg.norm(d_mm))
    angle_mm = float(np.degrees(np.arccos(np.clip(dirs[0] @ dirs[1], -1.0, 1.0))))

    apex_mm = origin2 + point_px * spacing2
    return SectorFit2D(apex=apex_mm, opening_angle=angle_mm,
                       line_params=(l1, l2), apex_px=point_px)


def estimate_sector(vol: VoxelVolume, params: SectorParams = SectorParams()) -> SectorEstimate:
    """Fit both central slices and combine per the min-distance /
    max-angle rule."""
    nx, ny, nz = vol.dims
    yz = vol.data[nx // 2, :, :]
    fit_yz = fit_sector_slice(yz, (vol.spacing[1], vol.spacing[2]),
                              (vol.origin[1], vol.origin[2]), params)
    xy = vol.data[:, :, nz // 2]
    fit_xy = fit_sector_slice(xy, (vol.spacing[0], vol.spacing[1]),
                              (vol.origin[0], vol.origin[1]), params)

    depth_yz = -float(fit_yz.apex[0])
    depth_xy = -float(fit_xy.apex[1])
    if depth_yz <= 0 or depth_xy <= 0:
        raise SectorError("sector apex does not lie behind the y=0 plane")
    if abs(fit_yz.opening_angle - fit_xy.opening_angle) > DISAGREEMENT_WARN_DEG:
        log.warning("central-slice fits disagree by %.1f deg (yz %.1f, xy %.1f); "
                    "continuing with the min-distance/max-angle rule",
                    abs(fit_yz.opening_angle - fit_xy.opening_angle),
                    fit_yz.opening_angle, fit_xy.opening_angle)
    placement = CameraPlacement(distance=min(depth_yz, depth_xy),
                                view_angle=max(fit_yz.opening_angle, fit_xy.opening_angle))
    return SectorEstimate(placement=placement, fit_yz=fit_yz, fit_xy=fit_xy)


def estimate_camera_placement(vol: VoxelVolume,
                              params: SectorParams = SectorParams()) -> CameraPlacement:
    return estimate_sector(vol, params).placement
