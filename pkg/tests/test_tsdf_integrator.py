"""Tests for raycast TSDF integration and the voxel update algebra."""
import numpy as np
import pytest

from services.panoptic_frontend import PanopticImage
from services.tsdf_integrator import (IntegrationConfig, compute_projective_distance, compute_weight,
                                      fuse_observations, integrate_frame, update_label_weight)
from services.volumetric_map import VolumetricMap
from utils.errors import InputError
from utils.geometry import CameraFrame, intrinsics_matrix


def _pool(voxels: int, block_side: int = 8) -> VolumetricMap:
    """Map whose first `voxels` flat indices are allocated"""
    volume = VolumetricMap(0.05, block_side)
    per_block = block_side ** 3
    volume.allocate_blocks(np.array([[i, 0, 0] for i in range(-(-voxels // per_block))]))
    return volume


def _fuse(volume, flat, sdf, weights, codes, colors=None):
    flat = np.asarray(flat, dtype=np.int64)
    if colors is None:
        colors = np.zeros((len(flat), 3))
    return fuse_observations(volume, flat, np.asarray(sdf, dtype=np.float64),
                             np.asarray(weights, dtype=np.float64), np.asarray(colors, dtype=np.float64),
                             np.asarray(codes, dtype=np.int64))


def _voxel(volume, index):
    return (volume.flat_view("tsdf")[index], volume.flat_view("weight_d")[index],
            volume.flat_view("label")[index], volume.flat_view("weight_l")[index])


class TestUpdateAlgebra:

    def test_first_observation(self):
        volume = _pool(1)
        _fuse(volume, [0], [0.03], [0.7], [-2])
        tsdf, weight_d, label, weight_l = _voxel(volume, 0)
        assert tsdf == pytest.approx(0.03)
        assert weight_d == pytest.approx(0.7)
        assert label == -2
        assert weight_l == pytest.approx(0.7)

    def test_weighted_average(self):
        volume = _pool(1)
        _fuse(volume, [0], [0.01], [1.0], [-2])
        _fuse(volume, [0], [0.03], [1.0], [-2])
        tsdf, weight_d, _, _ = _voxel(volume, 0)
        assert tsdf == pytest.approx(0.02)
        assert weight_d == pytest.approx(2.0)

    def test_same_label_increments(self):
        assert update_label_weight(-2, 2.0, -2, 1.0) == (-2, 3.0)

    def test_different_label_decrements(self):
        assert update_label_weight(-2, 2.0, 3, 0.5) == (-2, 1.5)

    def test_replace_when_observation_outweighs(self):
        assert update_label_weight(-2, 0.5, 3, 1.0) == (3, 0.5)

    def test_equal_weight_keeps_label(self):
        assert update_label_weight(-2, 1.0, 3, 1.0) == (-2, 0.0)

    def test_color_average_saturates(self):
        volume = _pool(1)
        _fuse(volume, [0], [0.0], [1.0], [0], colors=[[255, 10, 0]])
        _fuse(volume, [0], [0.0], [3.0], [0], colors=[[255, 30, 0]])
        np.testing.assert_allclose(volume.flat_view("color")[0], [255.0, 25.0, 0.0])
        assert volume.flat_view("color").max() <= 255.0

    def test_empty_frame(self):
        volume = _pool(1)
        assert _fuse(volume, [], [], [], []) == (0, 0)


class TestScalarOracle:
    """The vectorised update against a per-voxel scalar replay"""

    def test_fuzzed_sequences(self):
        rng = np.random.default_rng(0)
        n_voxels, steps = 10000, 20
        volume = _pool(n_voxels)
        flat = np.arange(n_voxels)
        sdf = rng.uniform(-0.2, 0.2, size=(steps, n_voxels))
        weights = rng.uniform(0.05, 2.0, size=(steps, n_voxels))
        codes = rng.choice([0, -1, -2, 3, 4], size=(steps, n_voxels))
        for t in range(steps):
            _fuse(volume, flat, sdf[t], weights[t], codes[t])

        expected_tsdf = (weights * sdf).sum(axis=0) / weights.sum(axis=0)
        np.testing.assert_allclose(volume.flat_view("tsdf")[:n_voxels], expected_tsdf, atol=1e-5)
        np.testing.assert_allclose(volume.flat_view("weight_d")[:n_voxels], weights.sum(axis=0))

        labels = volume.flat_view("label")[:n_voxels]
        weight_l = volume.flat_view("weight_l")[:n_voxels]
        for v in range(n_voxels):
            label, weight = 0, 0.0
            for t in range(steps):
                label, weight = update_label_weight(label, weight, int(codes[t, v]), float(weights[t, v]))
            assert labels[v] == label
            assert weight_l[v] == weight
        assert np.all(weight_l <= volume.flat_view("weight_d")[:n_voxels] + 1e-9)

    def test_merged_frame_observations(self):
        volume = _pool(1)
        _fuse(volume, [0], [0.0], [1.0], [-1])
        # one frame: label 3 twice (0.8 total), label -1 once (0.3)
        _fuse(volume, [0, 0, 0], [0.01, 0.02, 0.03], [0.5, 0.3, 0.3], [3, -1, 3])
        label, weight = -1, 1.0
        for observed, w in [(3, 0.8), (-1, 0.3)]:
            label, weight = update_label_weight(label, weight, observed, w)
        tsdf, weight_d, got_label, got_weight = _voxel(volume, 0)
        assert got_label == label
        assert got_weight == pytest.approx(weight)
        assert weight_d == pytest.approx(2.1)
        assert tsdf == pytest.approx((0.5 * 0.01 + 0.3 * 0.02 + 0.3 * 0.03) / 2.1)

    def test_equal_merged_weights_apply_lower_code_first(self):
        volume = _pool(1)
        _fuse(volume, [0, 0], [0.0, 0.0], [1.0, 1.0], [5, -2])
        label, weight = 0, 0.0
        for observed, w in [(-2, 1.0), (5, 1.0)]:
            label, weight = update_label_weight(label, weight, observed, w)
        assert _voxel(volume, 0)[2] == label
        assert _voxel(volume, 0)[3] == pytest.approx(weight)

    def test_two_label_weight_is_net_support(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            observed = rng.choice([-1, 7], size=30)
            weights = rng.uniform(0.1, 1.0, size=30)
            label, weight = 0, 0.0
            # seed the voxel so it never holds the unknown label
            label, weight = update_label_weight(label, weight, int(observed[0]), float(weights[0]))
            for code, w in zip(observed[1:], weights[1:]):
                label, weight = update_label_weight(label, weight, int(code), float(w))
            support = weights[observed == label].sum() - weights[observed != label].sum()
            assert weight == pytest.approx(abs(support))


class TestProjectiveDistance:

    def test_on_surface(self):
        assert compute_projective_distance([0, 0, 1], [0, 0, 1], [0, 0, 0]) == pytest.approx(0.0)

    def test_one_voxel_in_front(self):
        d = compute_projective_distance([0, 0, 0.95], [0, 0, 1], [0, 0, 0])
        assert d == pytest.approx(0.05, abs=1e-9)

    def test_clamped_behind(self):
        assert compute_projective_distance([0, 0, 3], [0, 0, 1], [0, 0, 0], truncation=0.2) == -0.2

    def test_vectorised(self):
        d = compute_projective_distance(np.array([[0, 0, 0.9], [0, 0, 1.1]]),
                                        np.array([[0, 0, 1.0], [0, 0, 1.0]]), np.zeros(3))
        np.testing.assert_allclose(d, [0.1, -0.1])

    def test_degenerate_ray(self):
        with pytest.raises(InputError):
            compute_projective_distance([0, 0, 0], [0, 0, 0], [0, 0, 0])


class TestWeights:

    def test_quadric(self):
        assert compute_weight(1.0) == 1.0
        assert compute_weight(2.0, "quadric") == 0.25

    def test_constant(self):
        np.testing.assert_array_equal(compute_weight(np.array([0.5, 3.0]), "constant"), [1.0, 1.0])

    def test_non_positive_depth(self):
        with pytest.raises(InputError):
            compute_weight(0.0)

    def test_unknown_mode(self):
        with pytest.raises(InputError):
            IntegrationConfig(weight_mode="linear")


class TestIntegrateFrame:

    def _wall_frame(self, depth_value=1.0, shape=(12, 16)):
        depth = np.full(shape, depth_value)
        color = np.full(shape + (3,), 120, dtype=np.uint8)
        return CameraFrame(intrinsics_matrix(20.0, 20.0, 7.5, 5.5), np.eye(4), depth, color)

    def test_wall_band(self):
        volume = VolumetricMap(0.05, 8)
        cam = self._wall_frame()
        labels = PanopticImage(np.full(cam.depth.shape, -2, dtype=np.int64))
        stats = integrate_frame(volume, cam, labels, IntegrationConfig(weight_mode="constant"))
        assert stats.pixels_integrated == 12 * 16
        assert stats.blocks_allocated == volume.block_count > 0
        assert stats.labels_replaced == stats.voxels_updated

        # voxel just in front of the wall on the optical axis is positive, just behind negative
        front = volume.flat_indices(volume.world_to_global(np.array([[0.001, 0.001, 0.96]])))[0]
        behind = volume.flat_indices(volume.world_to_global(np.array([[0.001, 0.001, 1.04]])))[0]
        assert volume.flat_view("tsdf")[front] > 0
        assert volume.flat_view("tsdf")[behind] < 0
        assert volume.flat_view("label")[front] == -2

        observed = volume.flat_view("weight_d") > 0
        assert np.all(np.abs(volume.flat_view("tsdf")[observed]) <= volume.truncation + 1e-12)
        assert np.all(volume.flat_view("weight_l") <= volume.flat_view("weight_d") + 1e-12)

    def test_zero_depth_skipped(self):
        volume = VolumetricMap(0.05, 8)
        cam = self._wall_frame(depth_value=0.0)
        stats = integrate_frame(volume, cam, PanopticImage.unknown(12, 16), IntegrationConfig())
        assert stats.pixels_integrated == 0
        assert volume.block_count == 0

    def test_max_ray_length(self):
        volume = VolumetricMap(0.05, 8)
        cam = self._wall_frame(depth_value=3.0)
        stats = integrate_frame(volume, cam, PanopticImage.unknown(12, 16), IntegrationConfig(max_ray_length=2.0))
        assert stats.pixels_integrated == 0

    def test_invalid_pose(self):
        volume = VolumetricMap(0.05, 8)
        cam = self._wall_frame()
        cam.pose = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(InputError):
            integrate_frame(volume, cam, PanopticImage.unknown(12, 16), IntegrationConfig())

    def test_label_shape_mismatch(self):
        volume = VolumetricMap(0.05, 8)
        with pytest.raises(InputError):
            integrate_frame(volume, self._wall_frame(), PanopticImage.unknown(3, 3), IntegrationConfig())

    def test_repeated_frames_accumulate(self):
        volume = VolumetricMap(0.05, 8)
        cam = self._wall_frame()
        labels = PanopticImage(np.full(cam.depth.shape, 4, dtype=np.int64))
        integrate_frame(volume, cam, labels, IntegrationConfig())
        once = volume.flat_view("weight_d").copy()
        tsdf_once = volume.flat_view("tsdf").copy()
        integrate_frame(volume, cam, labels, IntegrationConfig())
        np.testing.assert_allclose(volume.flat_view("weight_d"), 2 * once)
        np.testing.assert_allclose(volume.flat_view("tsdf"), tsdf_once, atol=1e-12)
        np.testing.assert_allclose(volume.flat_view("weight_l"), volume.flat_view("weight_d"))

    def test_band_options(self):
        volume = VolumetricMap(0.05, 8)
        assert IntegrationConfig().resolve_bands(volume) == (0.2, 0.2)
        assert IntegrationConfig(truncation=0.1, behind_truncation=0.06).resolve_bands(volume) == (0.1, 0.06)
        with pytest.raises(InputError):
            IntegrationConfig(truncation=0.04).resolve_bands(volume)
        with pytest.raises(InputError):
            IntegrationConfig(truncation=0.5).resolve_bands(volume)
