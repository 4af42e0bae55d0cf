import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echofusion.core import (
    RigidPose,
    SegmentationVolume,
    VoxelVolume,
    axis_angle_rotation,
    dice_score,
    pose_from_twist,
    trilinear_sample,
    voxel_to_world,
    world_to_voxel,
)


def make_vol(data, spacing=(1, 1, 1), origin=(0, 0, 0)):
    return VoxelVolume(np.asarray(data), spacing, origin)


def seg_from(mask):
    return SegmentationVolume(np.asarray(mask, dtype=np.uint8), (1, 1, 1), (0, 0, 0))


class TestVoxelWorld:
    def test_identity_case(self):
        vol = make_vol(np.zeros((4, 4, 4), np.uint8), (1, 1, 1), (-10, -10, -10))
        assert np.allclose(voxel_to_world(vol, (0, 0, 0)), (-10, -10, -10))

    def test_direct_formula(self):
        vol = make_vol(np.zeros((4, 4, 4), np.uint8), (0.5, 0.5, 0.5), (0, 0, 0))
        assert np.allclose(voxel_to_world(vol, (2, 0, 0)), (1, 0, 0))

    def test_fractional_index(self):
        vol = make_vol(np.zeros((4, 4, 4), np.uint8), (2, 1, 1), (-1, 0, 2))
        assert np.allclose(voxel_to_world(vol, (1.5, 2, 3)), (2, 2, 5))

    @given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 7))
    def test_round_trip_on_integer_indices(self, i, j, k):
        vol = make_vol(np.zeros((8, 8, 8), np.uint8), (0.7, 1.3, 2.1), (-3.3, 0.1, 9.0))
        back = world_to_voxel(vol, voxel_to_world(vol, (i, j, k)))
        assert np.max(np.abs(back - (i, j, k))) < 1e-9

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            make_vol(np.zeros((2, 2, 2), np.uint8), (1, 0, 1))

    def test_rejects_unsupported_dtype(self):
        with pytest.raises(ValueError):
            make_vol(np.zeros((2, 2, 2), np.float64))


class TestTrilinear:
    def test_voxel_center_reproduces_value(self):
        data = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
        vol = make_vol(data, (2, 2, 2), (-1, -1, -1))
        for idx in [(0, 0, 0), (1, 2, 1), (2, 2, 2)]:
            p = voxel_to_world(vol, idx)
            assert trilinear_sample(vol, p) == pytest.approx(float(data[idx]))

    def test_midpoint_between_voxels(self):
        data = np.zeros((2, 1, 1), np.float32)
        data[1, 0, 0] = 1.0
        vol = make_vol(data)
        assert trilinear_sample(vol, (0.5, 0, 0)) == pytest.approx(0.5)

    def test_out_of_bounds_marker(self):
        vol = make_vol(np.ones((2, 2, 2), np.float32))
        assert np.isnan(trilinear_sample(vol, (5.0, 0.0, 0.0)))
        assert np.isnan(trilinear_sample(vol, (-0.01, 0.0, 0.0)))


class TestDice:
    def test_identical_masks(self):
        m = np.zeros((4, 4, 4), np.uint8)
        m[1:3, 1:3, 1:3] = 1
        assert dice_score(seg_from(m), seg_from(m)) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros((4, 4, 4), np.uint8)
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert dice_score(seg_from(a), seg_from(b)) == 0.0

    def test_partial_overlap(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros((4, 4, 4), np.uint8)
        a[0, 0, 0] = a[0, 0, 1] = 1
        b[0, 0, 1] = b[0, 0, 2] = 1
        assert dice_score(seg_from(a), seg_from(b)) == 0.5

    def test_empty_vs_empty_is_one(self):
        z = seg_from(np.zeros((3, 3, 3), np.uint8))
        assert dice_score(z, z) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(seg_from(np.zeros((2, 2, 2))), seg_from(np.zeros((3, 2, 2))))

    @settings(max_examples=25)
    @given(st.integers(0, 2 ** 27 - 1), st.integers(0, 2 ** 27 - 1))
    def test_symmetry(self, bits_a, bits_b):
        a = np.array([(bits_a >> i) & 1 for i in range(27)], np.uint8).reshape(3, 3, 3)
        b = np.array([(bits_b >> i) & 1 for i in range(27)], np.uint8).reshape(3, 3, 3)
        assert dice_score(seg_from(a), seg_from(b)) == dice_score(seg_from(b), seg_from(a))

    def test_segmentation_rejects_nonbinary(self):
        with pytest.raises(ValueError):
            seg_from(np.full((2, 2, 2), 3))


def random_pose(rng):
    axis = rng.normal(size=3)
    r = axis_angle_rotation(axis, rng.uniform(-np.pi, np.pi))
    return RigidPose(r, rng.uniform(-50, 50, size=3))


class TestRigidPose:
    def test_orthonormality_enforced(self):
        with pytest.raises(ValueError):
            RigidPose(np.eye(3) * 1.01, np.zeros(3))

    def test_reflection_rejected(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidPose(m, np.zeros(3))

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert np.max(np.abs(ident.rotation - np.eye(3))) < 1e-6
            assert np.max(np.abs(ident.translation)) < 1e-6

    def test_composition_associative(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b, c = (random_pose(rng) for _ in range(3))
            ab_c = a.compose(b).compose(c)
            a_bc = a.compose(b.compose(c))
            assert np.max(np.abs(ab_c.matrix() - a_bc.matrix())) < 1e-6

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        pts = rng.uniform(-10, 10, size=(5, 3))
        hom = np.c_[pts, np.ones(5)] @ p.matrix().T
        assert np.allclose(p.apply(pts), hom[:, :3])

    def test_twist_update_stays_orthonormal(self):
        p = pose_from_twist((0.2, -0.1, 0.05), (1.0, 2.0, 3.0))
        assert np.max(np.abs(p.rotation.T @ p.rotation - np.eye(3))) < 1e-12

    def test_zero_twist_is_identity(self):
        p = pose_from_twist((0, 0, 0), (0, 0, 0))
        assert np.allclose(p.matrix(), np.eye(4))
