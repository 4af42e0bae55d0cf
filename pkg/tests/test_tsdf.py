import numpy as np
import pytest

from echofusion.camera import CameraModel, DepthImage
from echofusion.core import RigidPose, axis_angle_rotation
from echofusion.tsdf import TsdfGrid, TriangleMesh, extract_mesh, integrate, raycast

from .test_camera import analytic_sphere_depth


def small_cam(width=120, height=120, fov_px=100.0, pose=None):
    return CameraModel(width, height, fov_px, fov_px,
                       (width - 1) / 2.0, (height - 1) / 2.0,
                       pose or RigidPose.identity())


def plane_depth(cam, d):
    return DepthImage(np.full((cam.height, cam.width), float(d), np.float32))


def make_grid(voxel=1.0, half=30.0, center=(0.0, 0.0, 40.0)):
    n = int(2 * half / voxel) + 1
    origin = np.asarray(center) - half
    return TsdfGrid((n, n, n), voxel, origin)


class TestIntegrate:
    def test_plane_zero_crossing_on_central_ray(self):
        cam = small_cam()
        grid = make_grid(voxel=1.0)
        integrate(grid, plane_depth(cam, 40.0), cam)
        # walk the central grid column (x=y=0 is the grid centre index)
        ci = grid.dims[0] // 2
        col_t = grid.tsdf[ci, ci, :]
        col_w = grid.weight[ci, ci, :]
        z = grid.origin[2] + np.arange(grid.dims[2]) * grid.voxel_size
        observed = col_w > 0
        sign_change = np.nonzero((col_t[:-1] > 0) & (col_t[1:] <= 0)
                                 & observed[:-1] & observed[1:])[0]
        assert len(sign_change) == 1
        z_cross = z[sign_change[0]]
        assert abs(z_cross - 40.0) <= grid.voxel_size

    def test_all_invalid_depth_leaves_grid_untouched(self):
        cam = small_cam()
        grid = make_grid()
        before_t = grid.tsdf.copy()
        before_w = grid.weight.copy()
        integrate(grid, DepthImage(np.zeros((cam.height, cam.width), np.float32)), cam)
        assert np.array_equal(grid.tsdf, before_t)
        assert np.array_equal(grid.weight, before_w)

    def test_double_integration_fixed_point(self):
        cam = small_cam()
        g1 = make_grid()
        integrate(g1, plane_depth(cam, 40.0), cam)
        g2 = g1.copy()
        integrate(g2, plane_depth(cam, 40.0), cam)
        assert np.array_equal(g1.tsdf, g2.tsdf)
        touched = g1.weight > 0
        assert np.array_equal(g2.weight[touched], 2.0 * g1.weight[touched])
        assert g2.weight.max() <= g2.max_weight

    def test_clamp_invariant(self):
        cam = small_cam()
        grid = make_grid()
        rng = np.random.default_rng(3)
        for _ in range(5):
            depth = rng.uniform(0.0, 70.0, size=(cam.height, cam.width)).astype(np.float32)
            depth[rng.uniform(size=depth.shape) < 0.3] = 0.0
            integrate(grid, DepthImage(depth), cam)
        assert float(np.abs(grid.tsdf).max()) <= 1.0
        assert float(grid.weight.min()) >= 0.0
        assert float(grid.weight.max()) <= grid.max_weight

    def test_unobserved_voxels_have_zero_weight(self):
        cam = small_cam()
        grid = make_grid()
        integrate(grid, plane_depth(cam, 40.0), cam)
        # voxels more than a truncation behind the plane stay untouched
        ci = grid.dims[0] // 2
        z = grid.origin[2] + np.arange(grid.dims[2]) * grid.voxel_size
        behind = z > 40.0 + grid.truncation + grid.voxel_size
        assert not grid.weight[ci, ci, behind].any()

    def test_order_insensitive_below_weight_cap(self):
        cam = small_cam()
        da = plane_depth(cam, 40.0)
        db = plane_depth(cam, 45.0)
        g_ab = make_grid()
        integrate(integrate(g_ab, da, cam), db, cam)
        g_ba = make_grid()
        integrate(integrate(g_ba, db, cam), da, cam)
        below = (g_ab.weight < g_ab.max_weight) & (g_ba.weight < g_ba.max_weight)
        assert np.abs(g_ab.tsdf[below] - g_ba.tsdf[below]).max() < 1e-6


def orbit_cameras(n, radius=40.0, width=160):
    """Cameras on a circle looking at the world origin."""
    cams = []
    for k in range(n):
        rot_w = axis_angle_rotation((0, 1, 0), 2 * np.pi * k / n)
        # base: camera at -z looking +z
        base_r = np.eye(3)
        base_t = np.array([0.0, 0.0, -radius])
        pose = RigidPose(rot_w @ base_r, rot_w @ base_t)
        cams.append(small_cam(width, width, fov_px=width * 0.9, pose=pose))
    return cams


class TestRaycast:
    def test_zero_weight_grid_all_invalid(self):
        grid = make_grid()
        maps = raycast(grid, small_cam())
        assert not maps.valid.any()

    def test_render_raycast_consistency_single_frame(self):
        cam = small_cam(160, 160, 140.0)
        depth = analytic_sphere_depth(cam, (0.0, 0.0, 40.0), 15.0)
        grid = make_grid(voxel=0.5, half=25.0, center=(0.0, 0.0, 40.0))
        integrate(grid, depth, cam)
        maps = raycast(grid, cam)
        both = maps.valid & depth.valid_mask()
        assert both.sum() > 0.5 * depth.valid_mask().sum()
        err = np.abs(maps.vertices[both][:, 2] - depth.depth[both])
        assert (err <= grid.voxel_size).mean() >= 0.95

    def test_sphere_fused_from_20_views(self):
        center = np.array([0.0, 0.0, 0.0])
        radius = 15.0
        grid = TsdfGrid((61, 61, 61), 1.0, center - 30.0)
        cams = orbit_cameras(20)
        for cam in cams:
            c_cam = cam.pose.inverse().apply(center[None, :])[0]
            integrate(grid, analytic_sphere_depth(cam, c_cam, radius), cam)
        maps = raycast(grid, cams[0])
        assert maps.valid.sum() > 500
        pts = cams[0].pose.apply(maps.vertices[maps.valid].astype(np.float64))
        err = np.linalg.norm(pts - center, axis=1) - radius
        rms = float(np.sqrt(np.mean(err ** 2)))
        assert rms < grid.voxel_size

    def test_raycast_normals_unit_and_camera_facing(self):
        cam = small_cam(120, 120, 100.0)
        depth = analytic_sphere_depth(cam, (0.0, 0.0, 40.0), 15.0)
        grid = make_grid(voxel=0.75)
        integrate(grid, depth, cam)
        maps = raycast(grid, cam)
        n = maps.normals[maps.valid]
        assert np.abs(np.linalg.norm(n, axis=1) - 1.0).max() < 1e-4
        # looking along +z, visible surface normals must point back
        assert (n[:, 2] < 0).mean() > 0.99


def sphere_sdf_grid(radius=15.0, voxel=1.0, half=25.0):
    n = int(2 * half / voxel) + 1
    origin = -np.array([half, half, half])
    grid = TsdfGrid((n, n, n), voxel, origin)
    ax = [origin[a] + np.arange(n) * voxel for a in range(3)]
    x, y, z = np.meshgrid(*ax, indexing="ij")
    sdf = np.sqrt(x * x + y * y + z * z) - radius
    grid.tsdf = np.clip(sdf / grid.truncation, -1.0, 1.0).astype(np.float32)
    grid.weight = np.ones_like(grid.tsdf)
    return grid


def mesh_area(mesh: TriangleMesh) -> float:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


class TestExtractMesh:
    def test_sphere_sdf_radius_error(self):
        grid = sphere_sdf_grid(radius=15.0, voxel=1.0)
        mesh = extract_mesh(grid)
        assert len(mesh.vertices) > 100
        r = np.linalg.norm(mesh.vertices, axis=1)
        rms = float(np.sqrt(np.mean((r - 15.0) ** 2)))
        assert rms < 0.2 * grid.voxel_size

    def test_zero_weight_grid_empty_mesh(self):
        grid = make_grid()
        mesh = extract_mesh(grid)
        assert len(mesh.vertices) == 0
        assert len(mesh.triangles) == 0

    def test_box_sdf_area(self):
        half_ext = np.array([15.0, 12.0, 10.0])
        voxel = 1.0
        n = 61
        origin = -np.array([30.0, 30.0, 30.0])
        grid = TsdfGrid((n, n, n), voxel, origin)
        ax = [origin[a] + np.arange(n) * voxel for a in range(3)]
        x, y, z = np.meshgrid(*ax, indexing="ij")
        q = np.stack([np.abs(x) - half_ext[0], np.abs(y) - half_ext[1],
                      np.abs(z) - half_ext[2]], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        sdf = outside + inside
        grid.tsdf = np.clip(sdf / grid.truncation, -1.0, 1.0).astype(np.float32)
        grid.weight = np.ones_like(grid.tsdf)
        mesh = extract_mesh(grid)
        analytic = 8.0 * (half_ext[0] * half_ext[1] + half_ext[0] * half_ext[2]
                          + half_ext[1] * half_ext[2])
        assert mesh_area(mesh) == pytest.approx(analytic, rel=0.05)

    def test_mesh_normals_unit_and_outward(self):
        grid = sphere_sdf_grid()
        mesh = extract_mesh(grid)
        norms = np.linalg.norm(mesh.normals, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-4
        outward = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        assert (np.sum(outward * mesh.normals, axis=1) > 0.9).mean() > 0.99

    def test_mesh_indices_in_range(self):
        mesh = extract_mesh(sphere_sdf_grid())
        assert mesh.triangles.max() < len(mesh.vertices)


class TestGridFit:
    def test_fit_to_points_covers_bbox(self):
        pts = np.array([[0.0, 0.0, 30.0], [10.0, 5.0, 50.0]])
        grid = TsdfGrid.fit_to_points(pts, max_dim=64)
        lo = grid.origin
        hi = grid.origin + (np.asarray(grid.dims) - 1) * grid.voxel_size
        assert (lo <= pts.min(axis=0)).all()
        assert (hi >= pts.max(axis=0)).all()

    def test_snapshot_volumes(self):
        grid = sphere_sdf_grid()
        tv, wv = grid.to_volumes()
        assert tv.data.dtype == np.float32
        assert np.array_equal(tv.data, grid.tsdf)
        assert np.allclose(tv.spacing, grid.voxel_size)
