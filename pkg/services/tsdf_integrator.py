"""
Raycasting TSDF integration
Fuses depth, color and resolved panoptic labels into the volumetric map by
walking each pixel ray through the truncation band around its surface point.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from services.panoptic_frontend import PanopticImage
from services.volumetric_map import VolumetricMap, unique_rows
from utils.errors import InputError
from utils.geometry import CameraFrame, backproject

logger = logging.getLogger(__name__)

WEIGHT_MODES = ("constant", "quadric")

RAY_CHUNK = 16384


@dataclass
class IntegrationConfig:
    truncation: Optional[float] = None          # None: use the map's truncation
    behind_truncation: Optional[float] = None   # None: same as truncation
    max_ray_length: float = 5.0
    weight_mode: str = "quadric"

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise InputError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.max_ray_length <= 0:
            raise InputError("max_ray_length must be positive")
        if self.behind_truncation is not None and self.behind_truncation <= 0:
            raise InputError("behind_truncation must be positive")

    def resolve_bands(self, volume: VolumetricMap) -> Tuple[float, float]:
        """(front, behind) band widths for this map"""
        front = self.truncation if self.truncation is not None else volume.truncation
        if front <= volume.voxel_size:
            raise InputError(
                f"truncation {front} must exceed voxel size {volume.voxel_size}")
        if front > volume.truncation:
            raise InputError(
                f"truncation {front} exceeds the map's truncation {volume.truncation}")
        behind = self.behind_truncation if self.behind_truncation is not None else front
        return float(front), float(behind)


@dataclass
class IntegrationStats:
    pixels_integrated: int = 0
    observations: int = 0
    voxels_updated: int = 0
    blocks_allocated: int = 0
    labels_replaced: int = 0

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def compute_projective_distance(voxel_center, surface_point, origin,
                                truncation: Optional[float] = None):
    """Signed distance along the ray from voxel center to surface, positive on the sensor side"""
    voxel_center = np.asarray(voxel_center, dtype=np.float64)
    surface_point = np.asarray(surface_point, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    ray = surface_point - origin
    length = np.linalg.norm(ray, axis=-1)
    if np.any(length == 0):
        raise InputError("surface point coincides with the sensor origin")
    direction = ray / length[..., None] if ray.ndim > 1 else ray / length
    along = np.sum((voxel_center - origin) * direction, axis=-1)
    distance = length - along
    if truncation is not None:
        distance = np.clip(distance, -truncation, truncation)
    return distance if np.ndim(distance) else float(distance)


def compute_weight(depth, mode: str = "quadric"):
    """Observation weight: 1 in constant mode, 1/z^2 in quadric mode"""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise InputError("weights are defined for positive depth only")
    if mode == "constant":
        weight = np.ones_like(depth)
    elif mode == "quadric":
        weight = 1.0 / np.square(depth)
    else:
        raise InputError(f"unknown weight mode {mode!r}")
    return weight if weight.ndim else float(weight)


def update_label_weight(label: int, weight_l: float, observed: int, weight: float) -> Tuple[int, float]:
    """Single-observation label rule on integer label codes.

    Same label: weight grows by w. Different label: weight shrinks by w,
    and if w exceeds the stored weight the observed label replaces the
    stored one with the remainder as its weight. Equality keeps the old
    label at zero weight.
    """
    if observed == label:
        return label, weight_l + weight
    if weight > weight_l:
        return observed, weight - weight_l
    return label, weight_l - weight


def _apply_label_round(labels: np.ndarray, weights_l: np.ndarray, flat: np.ndarray,
                       observed: np.ndarray, weight: np.ndarray) -> int:
    current = labels[flat]
    stored = weights_l[flat]
    same = current == observed
    replace = ~same & (weight > stored)
    labels[flat] = np.where(replace, observed, current)
    weights_l[flat] = np.where(same, stored + weight,
                               np.where(replace, weight - stored, stored - weight))
    return int(np.count_nonzero(replace))


def fuse_observations(volume: VolumetricMap, flat: np.ndarray, sdf: np.ndarray,
                      weights: np.ndarray, colors: np.ndarray, codes: np.ndarray) -> Tuple[int, int]:
    """Apply one frame's voxel observations to the pools.

    flat indexes the flattened pools. Repeated voxels are merged: distance
    and color by summed weights, labels summed per (voxel, label) and then
    applied one label at a time in descending weight, ties by ascending
    code. Returns (voxels updated, labels replaced).
    """
    if len(flat) == 0:
        return 0, 0
    tsdf = volume.flat_view("tsdf")
    weight_d = volume.flat_view("weight_d")
    color = volume.flat_view("color")
    labels = volume.flat_view("label")
    weight_l = volume.flat_view("weight_l")

    voxels, inverse = np.unique(flat, return_inverse=True)
    inverse = inverse.reshape(-1)
    sum_w = np.bincount(inverse, weights=weights, minlength=len(voxels))
    sum_wd = np.bincount(inverse, weights=weights * sdf, minlength=len(voxels))
    sum_wc = np.stack([np.bincount(inverse, weights=weights * colors[:, c], minlength=len(voxels))
                       for c in range(3)], axis=1)

    old_w = weight_d[voxels]
    new_w = old_w + sum_w
    tsdf[voxels] = (old_w * tsdf[voxels] + sum_wd) / new_w
    color[voxels] = np.clip((old_w[:, None] * color[voxels] + sum_wc) / new_w[:, None], 0.0, 255.0)
    weight_d[voxels] = new_w

    pairs, pair_inverse = unique_rows(np.stack([flat, codes], axis=1), return_inverse=True)
    pair_weight = np.bincount(pair_inverse.reshape(-1), weights=weights, minlength=len(pairs))
    order = np.lexsort((pairs[:, 1], -pair_weight, pairs[:, 0]))
    pairs, pair_weight = pairs[order], pair_weight[order]

    # rank of each label within its voxel; one round per rank
    starts = np.flatnonzero(np.r_[True, pairs[1:, 0] != pairs[:-1, 0]])
    group_sizes = np.diff(np.r_[starts, len(pairs)])
    rank = np.arange(len(pairs)) - np.repeat(starts, group_sizes)

    replaced = 0
    for r in range(int(rank.max()) + 1):
        sel = rank == r
        replaced += _apply_label_round(labels, weight_l, pairs[sel, 0], pairs[sel, 1], pair_weight[sel])
    return len(voxels), replaced


def _band_voxels(volume: VolumetricMap, origin: np.ndarray, lengths: np.ndarray,
                 directions: np.ndarray, front: float, behind: float,
                 first_pixel: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(pixel, global voxel, projective distance) for every voxel in each ray's band"""
    vs = volume.voxel_size
    offsets = np.arange(-front - vs, behind + vs + 1e-12, 0.5 * vs)
    t = lengths[:, None] + offsets[None, :]
    samples = origin + t[..., None] * directions[:, None, :]
    pixel_of = np.repeat(np.arange(len(lengths)), len(offsets))
    in_front_of_sensor = (t > 0).reshape(-1)
    global_voxels = volume.world_to_global(samples.reshape(-1, 3))[in_front_of_sensor]
    pixel_of = pixel_of[in_front_of_sensor]

    rows = unique_rows(np.column_stack([pixel_of, global_voxels]))
    pixel_of = rows[:, 0]
    global_voxels = rows[:, 1:]

    centers = volume.global_to_world(global_voxels)
    along = np.sum((centers - origin) * directions[pixel_of], axis=1)
    sdf = lengths[pixel_of] - along
    in_band = (sdf <= front) & (sdf >= -behind)
    return (pixel_of[in_band] + first_pixel, global_voxels[in_band],
            np.clip(sdf[in_band], -front, front))


def integrate_frame(volume: VolumetricMap, cam: CameraFrame, resolved: PanopticImage,
                    cfg: IntegrationConfig) -> IntegrationStats:
    """Integrate one posed RGB-D frame with its resolved panoptic labels"""
    cam.validate()
    if resolved.codes.shape != cam.depth.shape:
        raise InputError(
            f"label image {resolved.codes.shape} does not match depth {cam.depth.shape}")
    front, behind = cfg.resolve_bands(volume)
    stats = IntegrationStats()

    points, valid = backproject(cam.depth, cam.intrinsics, cam.pose)
    origin = cam.origin
    rays = points - origin
    lengths = np.linalg.norm(rays, axis=-1)
    valid &= (lengths > 0) & (lengths <= cfg.max_ray_length)
    if not np.any(valid):
        return stats

    lengths = lengths[valid]
    directions = rays[valid] / lengths[:, None]
    depth = cam.depth[valid]
    weights = compute_weight(depth, cfg.weight_mode)
    pixel_colors = cam.color[valid].astype(np.float64)
    pixel_codes = resolved.codes[valid]
    n_pixels = len(lengths)
    stats.pixels_integrated = n_pixels

    chunks = [_band_voxels(volume, origin, lengths[start:start + RAY_CHUNK],
                           directions[start:start + RAY_CHUNK], front, behind, start)
              for start in range(0, n_pixels, RAY_CHUNK)]
    pixel_of = np.concatenate([c[0] for c in chunks])
    global_voxels = np.concatenate([c[1] for c in chunks])
    sdf = np.concatenate([c[2] for c in chunks])
    if len(sdf) == 0:
        return stats

    blocks_before = volume.block_count
    flat = volume.flat_indices(global_voxels, allocate=True)
    stats.blocks_allocated = volume.block_count - blocks_before
    stats.observations = len(flat)
    stats.voxels_updated, stats.labels_replaced = fuse_observations(
        volume, flat, sdf, weights[pixel_of], pixel_colors[pixel_of], pixel_codes[pixel_of])
    logger.debug(f"Integrated {n_pixels} pixels into {stats.voxels_updated} voxels "
                 f"({stats.blocks_allocated} new blocks)")
    return stats
