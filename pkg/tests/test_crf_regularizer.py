"""Tests for map division and dense CRF regularization."""
import sys
import time

import numpy as np
import pytest

from services.crf_regularizer import (CrfConfig, CrfSubmap, blocks_in_frustum, build_submap,
                                      build_unary, divide_map, mean_field_brute, mean_field_fast,
                                      pairwise_kernels, regularize)
from services.mesh_extractor import extract_mesh
from services.tsdf_integrator import update_label_weight
from services.volumetric_map import VolumetricMap
from utils.errors import CrfSizeError, InputError
from utils.geometry import CameraFrame, intrinsics_matrix


def _random_submap(seed, n=60, label_choices=(-1, 3, 5)):
    rng = np.random.default_rng(seed)
    return CrfSubmap(
        blocks=[],
        flat=np.arange(n),
        positions=rng.uniform(0.0, 0.2, size=(n, 3)),
        colors=rng.uniform(0.0, 255.0, size=(n, 3)),
        labels=rng.choice(label_choices, size=n),
        weight_l=rng.uniform(0.0, 1.0, size=n),
        weight_d=np.full(n, 1.0) + rng.uniform(0.0, 1.0, size=n),
    )


def _fill_block(volume, index, label=-1, weight_l=0.8, outlier=None):
    """Observe every voxel of a block on the surface; optionally plant one weak outlier"""
    block = volume.get_or_allocate_block(index)
    block.tsdf[...] = 0.0
    block.weight_d[...] = 1.0
    block.color[...] = 100.0
    block.label[...] = label
    block.weight_l[...] = weight_l
    if outlier is not None:
        block.label[outlier] = 3
        block.weight_l[outlier] = 0.1
    return block


def _observe(volume, indices):
    for index in indices:
        volume.get_or_allocate_block(index).weight_d[0, 0, 0] = 1.0


def _grid_submap(side, spacing, seed=0):
    """Flat side x side node grid with two stuff halves and 10% random labels"""
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    positions = np.column_stack([u.ravel() * spacing, v.ravel() * spacing, np.zeros(side * side)])
    labels = np.where(u.ravel() < side // 2, -1, -2)
    noisy = rng.random(len(labels)) < 0.1
    labels[noisy] = rng.choice([-1, -2, 5], size=int(noisy.sum()))
    colors = np.where((u.ravel() < side // 2)[:, None], 150.0, 200.0) + rng.normal(0.0, 5.0, (side * side, 3))
    weight_d = rng.uniform(1.0, 3.0, size=len(labels))
    return CrfSubmap(blocks=[], flat=np.arange(len(labels)), positions=positions, colors=colors,
                     labels=labels, weight_l=weight_d * rng.uniform(0.1, 0.9, size=len(labels)),
                     weight_d=weight_d)


def _two_region_map(seed, noise_rate=0.05):
    """4x4 blocks holding a flat surface at z = 0.15 m: stuff -1 left of x = 0.64 m, -2 right of it.

    A noise_rate share of voxels carries the other region's label at full
    confidence while keeping its region's color.
    """
    rng = np.random.default_rng(seed)
    volume = VolumetricMap(0.04, 8)
    for i in range(4):
        for j in range(4):
            block = volume.get_or_allocate_block((i, j, 0))
            centers = volume.global_to_world(volume.block_global_coords(block)).reshape(8, 8, 8, 3)
            left = centers[..., 0] < 0.64
            block.tsdf[...] = np.clip(0.15 - centers[..., 2], -volume.truncation, volume.truncation)
            block.weight_d[...] = 1.0
            block.color[...] = np.where(left[..., None], [150.0, 140.0, 120.0], [200.0, 200.0, 190.0])
            block.label[...] = np.where(left, -1, -2)
            flip = rng.random(left.shape) < noise_rate
            block.label[flip] = np.where(left[flip], -2, -1)
            block.weight_l[...] = 0.8
    return volume


def _vertex_accuracy(volume):
    """Share of mesh vertices (away from the region border) labeled with their region"""
    mesh = extract_mesh(volume)
    x = mesh.vertices[:, 0]
    away = np.abs(x - 0.64) > 0.04
    truth = np.where(x < 0.64, -1, -2)
    return float(np.mean(mesh.labels[away] == truth[away]))


class TestUnary:

    def test_confident_voxel(self):
        unary = build_unary([-1], [1.0], [2.0], np.array([-1, 3]))
        np.testing.assert_allclose(unary, -np.log([[0.75, 0.25]]))

    def test_remaining_mass_is_spread(self):
        unary = build_unary([3], [0.0], [1.0], np.array([-1, 3, 5]))
        np.testing.assert_allclose(np.exp(-unary), [[0.25, 0.5, 0.25]])

    def test_fully_confident_is_floored(self):
        unary = build_unary([-1], [2.0], [2.0], np.array([-1, 3]))
        assert unary[0, 0] == pytest.approx(0.0)
        assert np.isfinite(unary[0, 1])

    def test_rows_are_distributions(self):
        submap = _random_submap(0)
        np.testing.assert_allclose(np.exp(-submap.unary).sum(axis=1), 1.0)

    def test_single_label_rejected(self):
        with pytest.raises(InputError):
            build_unary([-1], [1.0], [1.0], np.array([-1]))

    def test_unobserved_rejected(self):
        with pytest.raises(InputError):
            build_unary([-1], [0.0], [0.0], np.array([-1, 3]))


def _replay_labels(observations):
    """Fold (label, weight) observations with the label update rule"""
    label, weight_l, replaced = 0, 0.0, 0
    for observed, weight in observations:
        new_label, weight_l = update_label_weight(label, weight_l, observed, weight)
        if new_label != label and label != 0:
            replaced += 1
        label = new_label
    return label, weight_l, replaced


class TestUnaryApproximation:

    def test_exact_without_replacement(self):
        observations = [(1, 1.0), (2, 0.4), (1, 0.7), (3, 0.2), (1, 1.3), (2, 0.5)]
        label, weight_l, replaced = _replay_labels(observations)
        assert (label, replaced) == (1, 0)
        weight_d = sum(w for _, w in observations)
        current = sum(w for z, w in observations if z == label)
        unary = build_unary([label], [weight_l], [weight_d], np.array([1, 2, 3]))
        assert np.exp(-unary[0, 0]) == pytest.approx(current / weight_d, abs=1e-6)

    def test_tracks_observed_frequency(self):
        rng = np.random.default_rng(7)
        errors = []
        for _ in range(1000):
            true_label = rng.random(60) < 0.7
            observed = np.where(true_label, 1, rng.choice([2, 3, 4], size=60))
            weights = rng.uniform(0.5, 1.5, size=60)
            label, weight_l, _ = _replay_labels(zip(observed.tolist(), weights.tolist()))
            estimate = np.exp(-build_unary([label], [weight_l], [weights.sum()], np.array([1, 2, 3, 4]))[0])
            column = label - 1
            errors.append(abs(estimate[column] - weights[observed == label].sum() / weights.sum()))
        assert np.mean(errors) < 0.05


class TestPairwiseKernels:

    def test_identical_voxels(self):
        assert pairwise_kernels([0, 0, 0], [10, 10, 10], [0, 0, 0], [10, 10, 10], CrfConfig()) == (1.0, 1.0)

    def test_one_bandwidth_apart(self):
        cfg = CrfConfig()
        k1, k2 = pairwise_kernels([0, 0, 0], [0, 0, 0], [cfg.theta_alpha, 0, 0], [cfg.theta_beta, 0, 0], cfg)
        assert k2 == pytest.approx(np.exp(-0.5))
        assert k1 == pytest.approx(np.exp(-1.0))

    def test_color_only_affects_appearance(self):
        cfg = CrfConfig()
        k1, k2 = pairwise_kernels([0, 0, 0], [0, 0, 0], [0, 0, 0], [255, 255, 255], cfg)
        assert k2 == 1.0
        assert k1 < 1e-10


class TestMeanField:

    def test_fast_matches_brute_without_truncation(self):
        cfg = CrfConfig(kernel_radius_sigmas=100.0)
        for seed in range(5):
            brute = _random_submap(seed)
            fast = _random_submap(seed)
            labels_brute = mean_field_brute(brute, cfg)
            labels_fast = mean_field_fast(fast, cfg)
            np.testing.assert_array_equal(labels_fast, labels_brute)
            np.testing.assert_allclose(fast.q, brute.q, atol=1e-9)

    def test_zero_iterations_keeps_unary_argmax(self):
        submap = _random_submap(1)
        submap.weight_l = np.maximum(submap.weight_l, 0.01)
        submap = submap.permuted(np.arange(submap.n_nodes))
        np.testing.assert_array_equal(mean_field_brute(submap, CrfConfig(iterations=0)), submap.labels)

    def test_zero_kernel_weights_keep_labels(self):
        submap = _random_submap(2)
        submap.weight_l = np.maximum(submap.weight_l, 0.01)
        submap = submap.permuted(np.arange(submap.n_nodes))
        np.testing.assert_array_equal(mean_field_fast(submap, CrfConfig(w1=0.0, w2=0.0)), submap.labels)

    def test_marginals_are_distributions(self):
        submap = _random_submap(3)
        mean_field_fast(submap, CrfConfig())
        np.testing.assert_allclose(submap.q.sum(axis=1), 1.0)
        assert np.all(submap.q >= 0)

    def test_node_order_does_not_matter(self):
        submap = _random_submap(4)
        order = np.random.default_rng(9).permutation(submap.n_nodes)
        labels = mean_field_fast(submap, CrfConfig())
        permuted = mean_field_fast(submap.permuted(order), CrfConfig())
        np.testing.assert_array_equal(permuted, labels[order])

    def test_single_label_submap_untouched(self):
        submap = _random_submap(5, label_choices=(-1,))
        assert submap.n_labels == 1
        assert submap.unary is None
        np.testing.assert_array_equal(mean_field_brute(submap, CrfConfig()), submap.labels)

    def test_exhaustive_size_limit(self):
        with pytest.raises(CrfSizeError):
            mean_field_brute(_random_submap(6), CrfConfig(brute_force_max_nodes=10))

    @pytest.mark.parametrize("inference", [mean_field_brute, mean_field_fast])
    def test_confident_neighbor_wins(self, inference):
        submap = CrfSubmap(blocks=[], flat=np.arange(2),
                           positions=np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]]),
                           colors=np.full((2, 3), 120.0), labels=np.array([-1, 3]),
                           weight_l=np.array([1.0, 0.05]), weight_d=np.array([1.0, 1.0]))
        np.testing.assert_array_equal(inference(submap, CrfConfig()), [-1, -1])

    @pytest.mark.slow
    def test_fast_path_scales_past_exhaustive(self):
        cfg = CrfConfig(brute_force_max_nodes=sys.maxsize)
        large = _grid_submap(224, spacing=0.04)
        assert large.n_nodes >= 50000
        small = _grid_submap(45, spacing=0.04)
        start = time.perf_counter()
        mean_field_brute(small, cfg)
        brute_seconds = time.perf_counter() - start
        start = time.perf_counter()
        mean_field_fast(large, cfg)
        fast_seconds = time.perf_counter() - start
        extrapolated = brute_seconds * (large.n_nodes / small.n_nodes) ** 2
        assert fast_seconds <= extrapolated / 5


class TestDivideMap:

    def test_line_of_blocks(self, small_map):
        _observe(small_map, [(i, 0, 0) for i in range(10)])
        groups = divide_map(small_map, 4)
        assert groups == [[(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)],
                          [(4, 0, 0), (5, 0, 0), (6, 0, 0), (7, 0, 0)],
                          [(8, 0, 0), (9, 0, 0)]]

    def test_isolated_blocks_are_singletons(self, small_map):
        _observe(small_map, [(0, 0, 0), (5, 5, 5)])
        assert divide_map(small_map, 25) == [[(0, 0, 0)], [(5, 5, 5)]]

    def test_unobserved_blocks_are_ignored(self, small_map):
        _observe(small_map, [(0, 0, 0)])
        small_map.get_or_allocate_block((1, 0, 0))
        assert divide_map(small_map, 25) == [[(0, 0, 0)]]

    def test_partition_properties(self, small_map):
        rng = np.random.default_rng(0)
        indices = {tuple(int(v) for v in row) for row in rng.integers(0, 6, size=(120, 3))}
        _observe(small_map, indices)
        for max_blocks in (1, 3, 25):
            groups = divide_map(small_map, max_blocks)
            flattened = [b for g in groups for b in g]
            assert sorted(flattened) == sorted(indices)
            assert len(flattened) == len(set(flattened))
            for group in groups:
                assert 1 <= len(group) <= max_blocks
                members = set(group)
                reached = {group[0]}
                frontier = [group[0]]
                while frontier:
                    x, y, z = frontier.pop()
                    for step in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]:
                        neighbor = (x + step[0], y + step[1], z + step[2])
                        if neighbor in members and neighbor not in reached:
                            reached.add(neighbor)
                            frontier.append(neighbor)
                assert reached == members

    def test_invalid_cap(self, small_map):
        with pytest.raises(InputError):
            divide_map(small_map, 0)


class TestBuildSubmap:

    def test_near_surface_voxels_only(self):
        volume = VolumetricMap(0.02, 4)
        block = volume.get_or_allocate_block((0, 0, 0))
        block.weight_d[0, 0, 0] = 1.0
        block.tsdf[0, 0, 0] = 0.01
        block.weight_d[0, 0, 1] = 1.0
        block.tsdf[0, 0, 1] = volume.truncation
        block.tsdf[0, 0, 2] = 0.0
        submap = build_submap(volume, [(0, 0, 0)])
        assert submap.n_nodes == 1
        np.testing.assert_allclose(submap.positions[0], [0.01, 0.01, 0.01])

    def test_missing_blocks(self):
        submap = build_submap(VolumetricMap(0.02, 4), [(3, 3, 3)])
        assert submap.n_nodes == 0
        assert submap.n_labels == 0


class TestRegularize:

    @pytest.mark.parametrize("inference", ["fast", "brute"])
    def test_weak_outlier_is_relabeled(self, inference):
        volume = VolumetricMap(0.02, 4)
        _fill_block(volume, (0, 0, 0), outlier=(1, 1, 1))
        weight_l = volume.flat_view("weight_l").copy()
        stats = regularize(volume, CrfConfig(inference=inference))
        assert stats.labels_changed == 1
        np.testing.assert_array_equal(volume.get_block((0, 0, 0)).label, -1)
        np.testing.assert_array_equal(volume.flat_view("weight_l"), weight_l)

    def test_single_label_submaps_are_skipped(self):
        volume = VolumetricMap(0.02, 4)
        _fill_block(volume, (0, 0, 0))
        stats = regularize(volume, CrfConfig())
        assert (stats.submaps, stats.submaps_skipped, stats.labels_changed) == (1, 1, 0)

    def test_workers_give_identical_maps(self):
        maps = []
        for workers in (1, 3):
            volume = VolumetricMap(0.02, 4)
            _fill_block(volume, (0, 0, 0), outlier=(1, 1, 1))
            _fill_block(volume, (4, 0, 0), label=-2, outlier=(2, 2, 2))
            _fill_block(volume, (8, 0, 0), label=7, outlier=(0, 3, 1))
            stats = regularize(volume, CrfConfig(workers=workers))
            assert stats.submaps == 3
            maps.append(volume.flat_view("label").copy())
        np.testing.assert_array_equal(maps[0], maps[1])

    def test_frustum_only(self):
        volume = VolumetricMap(0.02, 4)
        _fill_block(volume, (0, 0, 5), outlier=(1, 1, 1))
        _fill_block(volume, (-20, 0, 5), outlier=(1, 1, 1))
        shape = (10, 10)
        camera = CameraFrame(intrinsics_matrix(10.0, 10.0, 5.0, 5.0), np.eye(4), np.ones(shape),
                             np.zeros(shape + (3,), dtype=np.uint8))
        assert blocks_in_frustum(volume, camera) == [(0, 0, 5)]
        stats = regularize(volume, CrfConfig(frustum_only=True), camera=camera)
        assert stats.submaps == 1
        assert volume.get_block((0, 0, 5)).label[1, 1, 1] == -1
        assert volume.get_block((-20, 0, 5)).label[1, 1, 1] == 3

    def test_empty_map(self):
        volume = VolumetricMap(0.02, 4)
        stats = regularize(volume, CrfConfig())
        assert stats.submaps == 0
        assert stats.to_dict()["label_count_convention"] == "per_submap"

    def test_salt_and_pepper_noise_is_removed(self):
        volume = _two_region_map(seed=0)
        before = _vertex_accuracy(volume)
        regularize(volume, CrfConfig())
        after = _vertex_accuracy(volume)
        assert before < 0.99
        assert after > before
        assert after > 0.98


class TestCrfConfig:

    @pytest.mark.parametrize("kwargs", [
        {"w1": -1.0},
        {"theta_alpha": 0.0},
        {"iterations": -1},
        {"max_blocks_per_submap": 0},
        {"workers": 0},
        {"inference": "lattice"},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(InputError):
            CrfConfig(**kwargs)
