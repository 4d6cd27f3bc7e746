"""
Online map regularization with a fully connected CRF
Nodes are observed near-surface voxels, labels are panoptic codes. Unary
potentials come from the label/depth weight ratio, pairwise potentials are
Gaussian appearance and smoothness kernels with Potts compatibility. The map
is divided into contiguous groups of blocks so each inference problem stays
small.
"""
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.special import softmax

from services.volumetric_map import BlockIndex, VolumetricMap
from utils.errors import CrfSizeError, InputError
from utils.geometry import CameraFrame

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-10
BRUTE_CHUNK = 512
INFERENCE_METHODS = ("fast", "brute")

_NEIGHBOR_STEPS = sorted([(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)])


@dataclass
class CrfConfig:
    w1: float = 10.0
    w2: float = 15.0
    theta_alpha: float = 0.05
    theta_beta: float = 20.0
    iterations: int = 5
    max_blocks_per_submap: int = 25
    kernel_radius_sigmas: float = 3.0
    brute_force_max_nodes: int = 20000
    frustum_only: bool = False
    workers: int = 1
    inference: str = "fast"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise InputError("kernel weights must be non-negative")
        if self.theta_alpha <= 0 or self.theta_beta <= 0:
            raise InputError("kernel bandwidths must be positive")
        if self.iterations < 0:
            raise InputError("iterations must be non-negative")
        if self.max_blocks_per_submap < 1:
            raise InputError("max_blocks_per_submap must be at least 1")
        if self.kernel_radius_sigmas <= 0:
            raise InputError("kernel_radius_sigmas must be positive")
        if self.workers < 1:
            raise InputError("workers must be at least 1")
        if self.inference not in INFERENCE_METHODS:
            raise InputError(f"inference must be one of {INFERENCE_METHODS}")


@dataclass
class CrfSubmap:
    """One inference problem: near-surface voxels of a contiguous block group"""
    blocks: List[BlockIndex]
    flat: np.ndarray            # indices into the map's flattened pools
    positions: np.ndarray       # Nx3 voxel centers (m)
    colors: np.ndarray          # Nx3
    labels: np.ndarray          # N current label codes
    weight_l: np.ndarray
    weight_d: np.ndarray
    label_set: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    unary: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        self.label_set = np.unique(self.labels).astype(np.int64)
        if self.n_labels >= 2:
            self.unary = build_unary(self.labels, self.weight_l, self.weight_d, self.label_set)

    @property
    def n_nodes(self) -> int:
        return int(len(self.flat))

    @property
    def n_labels(self) -> int:
        return int(len(self.label_set))

    def permuted(self, order: np.ndarray) -> "CrfSubmap":
        """Same problem with nodes reordered"""
        return CrfSubmap(self.blocks, self.flat[order], self.positions[order], self.colors[order],
                         self.labels[order], self.weight_l[order], self.weight_d[order])


@dataclass
class RegularizationStats:
    labels_changed: int = 0
    submaps: int = 0
    submaps_skipped: int = 0
    nodes: int = 0
    seconds: float = 0.0
    label_count_convention: str = "per_submap"
    per_submap: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "labels_changed": self.labels_changed,
            "submaps": self.submaps,
            "submaps_skipped": self.submaps_skipped,
            "nodes": self.nodes,
            "seconds": self.seconds,
            "label_count_convention": self.label_count_convention,
            "per_submap": self.per_submap,
        }


def build_unary(labels: np.ndarray, weight_l: np.ndarray, weight_d: np.ndarray,
                label_set: np.ndarray) -> np.ndarray:
    """N x M negative log probabilities from the label/depth weight ratio.

    The current label gets (1 + W^L / W^D) / 2, the remaining mass is spread
    evenly over the other M - 1 labels.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    weight_l = np.atleast_1d(np.asarray(weight_l, dtype=np.float64))
    weight_d = np.atleast_1d(np.asarray(weight_d, dtype=np.float64))
    label_set = np.asarray(label_set, dtype=np.int64)
    m = len(label_set)
    if m < 2:
        raise InputError("unary potentials need at least two labels")
    if np.any(weight_d <= 0):
        raise InputError("unary potentials need observed voxels (W^D > 0)")
    current = np.clip(0.5 * (1.0 + weight_l / weight_d), 0.0, 1.0)
    other = (1.0 - current) / (m - 1)
    probabilities = np.repeat(other[:, None], m, axis=1)
    columns = np.searchsorted(label_set, labels)
    probabilities[np.arange(len(labels)), columns] = current
    return -np.log(np.maximum(probabilities, PROBABILITY_FLOOR))


def pairwise_kernels(position_a, color_a, position_b, color_b, cfg: CrfConfig):
    """(appearance kernel, smoothness kernel) between voxels a and b"""
    d2 = np.sum(np.square(np.asarray(position_a, float) - np.asarray(position_b, float)), axis=-1)
    c2 = np.sum(np.square(np.asarray(color_a, float) - np.asarray(color_b, float)), axis=-1)
    spatial = d2 / (2.0 * cfg.theta_alpha ** 2)
    k1 = np.exp(-spatial - c2 / (2.0 * cfg.theta_beta ** 2))
    k2 = np.exp(-spatial)
    if np.ndim(k1) == 0:
        return float(k1), float(k2)
    return k1, k2


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T)
    return np.maximum(d2, 0.0)


def _mean_field(submap: CrfSubmap, cfg: CrfConfig, message_fn) -> np.ndarray:
    q = softmax(-submap.unary, axis=1)
    for _ in range(cfg.iterations):
        message = message_fn(q)
        # Potts: every other label's message is a penalty
        penalty = message.sum(axis=1, keepdims=True) - message
        q = softmax(-submap.unary - penalty, axis=1)
    submap.q = q
    return submap.label_set[np.argmax(q, axis=1)]


def mean_field_brute(submap: CrfSubmap, cfg: CrfConfig) -> np.ndarray:
    """Exact dense mean-field over all node pairs; returns the new label codes"""
    if submap.n_labels < 2:
        return submap.labels.copy()
    if submap.n_nodes > cfg.brute_force_max_nodes:
        raise CrfSizeError(
            f"{submap.n_nodes} nodes exceed the exhaustive limit of {cfg.brute_force_max_nodes}")

    spatial = submap.positions / cfg.theta_alpha
    appearance = submap.colors / cfg.theta_beta
    n = submap.n_nodes

    def message_fn(q: np.ndarray) -> np.ndarray:
        message = np.empty_like(q)
        for start in range(0, n, BRUTE_CHUNK):
            stop = min(start + BRUTE_CHUNK, n)
            d2 = _squared_distances(spatial[start:stop], spatial)
            c2 = _squared_distances(appearance[start:stop], appearance)
            kernel = cfg.w1 * np.exp(-0.5 * (d2 + c2)) + cfg.w2 * np.exp(-0.5 * d2)
            kernel[np.arange(stop - start), np.arange(start, stop)] = 0.0
            message[start:stop] = kernel @ q
        return message

    return _mean_field(submap, cfg, message_fn)


def kernel_matrix(submap: CrfSubmap, cfg: CrfConfig) -> sparse.csr_matrix:
    """Weighted kernel sum over node pairs closer than the truncation radius (no self pairs)"""
    n = submap.n_nodes
    radius = cfg.kernel_radius_sigmas * cfg.theta_alpha
    pairs = cKDTree(submap.positions).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return sparse.csr_matrix((n, n))
    a, b = pairs[:, 0], pairs[:, 1]
    k1, k2 = pairwise_kernels(submap.positions[a], submap.colors[a],
                              submap.positions[b], submap.colors[b], cfg)
    values = cfg.w1 * k1 + cfg.w2 * k2
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    return sparse.csr_matrix((np.concatenate([values, values]), (rows, cols)), shape=(n, n))


def mean_field_fast(submap: CrfSubmap, cfg: CrfConfig) -> np.ndarray:
    """Mean-field with messages from a truncated sparse Gaussian kernel"""
    if submap.n_labels < 2:
        return submap.labels.copy()
    if cfg.w1 == 0 and cfg.w2 == 0:
        kernel = sparse.csr_matrix((submap.n_nodes, submap.n_nodes))
    else:
        kernel = kernel_matrix(submap, cfg)
    return _mean_field(submap, cfg, lambda q: np.asarray(kernel @ q))


def divide_map(volume: VolumetricMap, max_blocks: int,
               blocks: Optional[Iterable[BlockIndex]] = None) -> List[List[BlockIndex]]:
    """Partition observed blocks into 6-connected groups of at most max_blocks.

    Groups grow breadth-first from the lowest unassigned block index,
    visiting neighbors in ascending index order.
    """
    if max_blocks < 1:
        raise InputError("max_blocks must be at least 1")
    candidates = volume.observed_blocks() if blocks is None else sorted(set(blocks))
    remaining = set(candidates)
    groups: List[List[BlockIndex]] = []
    for seed in candidates:
        if seed not in remaining:
            continue
        remaining.discard(seed)
        group = [seed]
        queue = deque([seed])
        while queue and len(group) < max_blocks:
            current = queue.popleft()
            for step in _NEIGHBOR_STEPS:
                if len(group) >= max_blocks:
                    break
                neighbor = (current[0] + step[0], current[1] + step[1], current[2] + step[2])
                if neighbor in remaining:
                    remaining.discard(neighbor)
                    group.append(neighbor)
                    queue.append(neighbor)
        groups.append(group)
    return groups


def build_submap(volume: VolumetricMap, blocks: Sequence[BlockIndex]) -> CrfSubmap:
    """Collect observed near-surface voxels (W^D > 0, |tsdf| < truncation) of the blocks"""
    per_block = volume.voxels_per_block
    flat_parts, coord_parts = [], []
    for index in blocks:
        block = volume.get_block(index)
        if block is None:
            continue
        flat_parts.append(block.slot * per_block + np.arange(per_block))
        coord_parts.append(volume.block_global_coords(block))
    if not flat_parts:
        empty = np.empty((0, 3))
        return CrfSubmap(list(blocks), np.empty(0, dtype=np.int64), empty, empty,
                         np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))

    flat = np.concatenate(flat_parts)
    coords = np.concatenate(coord_parts)
    weight_d = volume.flat_view("weight_d")[flat]
    tsdf = volume.flat_view("tsdf")[flat]
    keep = (weight_d > 0) & (np.abs(tsdf) < volume.truncation)
    flat = flat[keep]
    return CrfSubmap(
        blocks=list(blocks),
        flat=flat,
        positions=volume.global_to_world(coords[keep]),
        colors=volume.flat_view("color")[flat].copy(),
        labels=volume.flat_view("label")[flat].copy(),
        weight_l=volume.flat_view("weight_l")[flat].copy(),
        weight_d=weight_d[keep],
    )


def blocks_in_frustum(volume: VolumetricMap, cam: CameraFrame, margin: int = 0,
                      max_depth: Optional[float] = None) -> List[BlockIndex]:
    """Observed blocks with at least one corner projecting into the (margin-padded) image"""
    observed = volume.observed_blocks()
    if not observed:
        return []
    indices = np.asarray(observed, dtype=np.float64)
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    points = (indices[:, None, :] + corners[None, :, :]) * volume.block_size
    world_to_cam = np.linalg.inv(cam.pose)
    cam_points = points @ world_to_cam[:3, :3].T + world_to_cam[:3, 3]
    z = cam_points[..., 2]
    safe_z = np.where(z > 0, z, 1.0)
    pixels = cam_points @ cam.intrinsics.T
    u = pixels[..., 0] / safe_z
    v = pixels[..., 1] / safe_z
    visible = ((z > 0) & (u >= -margin) & (u < cam.width + margin)
               & (v >= -margin) & (v < cam.height + margin))
    if max_depth is not None:
        visible &= z <= max_depth
    return [observed[i] for i in np.flatnonzero(np.any(visible, axis=1))]


def _infer(submap: CrfSubmap, cfg: CrfConfig) -> np.ndarray:
    if cfg.inference == "brute":
        return mean_field_brute(submap, cfg)
    return mean_field_fast(submap, cfg)


def regularize(volume: VolumetricMap, cfg: CrfConfig,
               camera: Optional[CameraFrame] = None) -> RegularizationStats:
    """Divide the map, run mean-field per submap and write argmax labels back (W^L unchanged).

    Takes no instance registry: only voxel label codes change here, so thing
    class probabilities stay with the registry and are read at mesh time.
    """
    start = time.perf_counter()
    stats = RegularizationStats()
    candidates = None
    if cfg.frustum_only and camera is not None:
        candidates = blocks_in_frustum(volume, camera)
    groups = divide_map(volume, cfg.max_blocks_per_submap, candidates)
    submaps = [build_submap(volume, group) for group in groups]
    stats.submaps = len(submaps)

    active = [s for s in submaps if s.n_labels >= 2]
    stats.submaps_skipped = len(submaps) - len(active)
    if cfg.workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(lambda s: _infer(s, cfg), active))
    else:
        results = [_infer(s, cfg) for s in active]

    labels = volume.flat_view("label")
    for submap, new_labels in zip(active, results):
        changed = int(np.count_nonzero(new_labels != submap.labels))
        labels[submap.flat] = new_labels
        stats.labels_changed += changed
        stats.nodes += submap.n_nodes
        stats.per_submap.append({
            "blocks": len(submap.blocks),
            "nodes": submap.n_nodes,
            "labels": submap.n_labels,
            "changed": changed,
        })

    stats.seconds = time.perf_counter() - start
    logger.info(f"Regularized {stats.submaps - stats.submaps_skipped}/{stats.submaps} submaps "
                f"({stats.nodes} nodes), {stats.labels_changed} labels changed "
                f"in {stats.seconds:.2f}s")
    return stats
