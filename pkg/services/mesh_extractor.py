"""
Labeled mesh extraction
Runs marching cubes per voxel block over the TSDF zero level set and carries
color, panoptic label and restored thing class onto each vertex.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from skimage import measure

from services.instance_registry import InstanceRegistry, restore_thing_class
from services.volumetric_map import VolumetricMap
from utils.errors import InputError, RegistryError

logger = logging.getLogger(__name__)


@dataclass
class LabeledMesh:
    vertices: np.ndarray                    # Vx3 float64 meters
    triangles: np.ndarray                   # Fx3 int64
    colors: np.ndarray                      # Vx3 uint8
    labels: np.ndarray                      # V panoptic label codes
    class_ids: np.ndarray                   # V restored class IDs (0 = none)
    instance_classes: Dict[int, Tuple[int, float]] = field(default_factory=dict)

    @classmethod
    def empty(cls) -> "LabeledMesh":
        return cls(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64),
                   np.empty((0, 3), dtype=np.uint8), np.empty(0, dtype=np.int64),
                   np.empty(0, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return int(len(self.vertices))

    @property
    def n_triangles(self) -> int:
        return int(len(self.triangles))

    def is_empty(self) -> bool:
        return self.n_vertices == 0

    def validate(self):
        n = self.n_vertices
        if not (len(self.colors) == len(self.labels) == len(self.class_ids) == n):
            raise InputError("per-vertex attribute lengths differ from vertex count")
        if not np.all(np.isfinite(self.vertices)):
            raise InputError("mesh has non-finite vertices")
        if self.n_triangles and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise InputError("triangle index out of range")


_CORNER_OFFSETS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def _padded_block(volume: VolumetricMap, index) -> Dict[str, np.ndarray]:
    """(B+1)^3 arrays of one block plus the first layer of its +x/+y/+z neighbours"""
    side = volume.block_side
    shape = (side + 1,) * 3
    grid = {
        "tsdf": np.full(shape, volume.truncation),
        "weight_d": np.zeros(shape),
        "weight_l": np.zeros(shape),
        "label": np.zeros(shape, dtype=np.int64),
        "color": np.zeros(shape + (3,)),
    }
    for offset in _CORNER_OFFSETS:
        block = volume.get_block(tuple(i + o for i, o in zip(index, offset)))
        if block is None:
            continue
        src = tuple(slice(0, side) if o == 0 else slice(0, 1) for o in offset)
        dst = tuple(slice(0, side) if o == 0 else slice(side, side + 1) for o in offset)
        for name in grid:
            grid[name][dst] = getattr(block, name)[src]
    return grid


def _cell_mask(observed: np.ndarray) -> np.ndarray:
    """True at cell origins whose eight corners are all observed"""
    n = observed.shape[0] - 1
    mask = np.zeros_like(observed)
    inner = np.ones((n, n, n), dtype=bool)
    for dx, dy, dz in _CORNER_OFFSETS:
        inner &= observed[dx:dx + n, dy:dy + n, dz:dz + n]
    mask[:n, :n, :n] = inner
    return mask


def _block_surface(volume: VolumetricMap, index, min_corner_weight: float):
    grid = _padded_block(volume, index)
    observed = grid["weight_d"] > min_corner_weight
    mask = _cell_mask(observed)
    tsdf = grid["tsdf"]
    if not mask.any() or tsdf.min() >= 0.0 or tsdf.max() <= 0.0:
        return None
    try:
        verts, faces, _, _ = measure.marching_cubes(
            tsdf, level=0.0, mask=mask, allow_degenerate=False, method="lewiner")
    except (ValueError, RuntimeError):
        return None
    if len(verts) == 0:
        return None

    side = volume.block_side
    lo = np.floor(verts + 1e-9).astype(np.int64)
    frac = np.clip(verts - lo, 0.0, 1.0)
    axis = np.argmax(frac, axis=1)
    rows = np.arange(len(verts))
    t = frac[rows, axis]
    hi = lo.copy()
    hi[rows, axis] += (t > 0).astype(np.int64)
    lo = np.clip(lo, 0, side)
    hi = np.clip(hi, 0, side)

    lo_idx = (lo[:, 0], lo[:, 1], lo[:, 2])
    hi_idx = (hi[:, 0], hi[:, 1], hi[:, 2])
    # discrete labels are not interpolated: the more confident endpoint wins
    labels = np.where(grid["weight_l"][lo_idx] >= grid["weight_l"][hi_idx],
                      grid["label"][lo_idx], grid["label"][hi_idx])
    colors = (1.0 - t)[:, None] * grid["color"][lo_idx] + t[:, None] * grid["color"][hi_idx]

    origin = np.asarray(index, dtype=np.float64) * side
    world = (origin + 0.5 + verts) * volume.voxel_size
    return world, faces.astype(np.int64), colors, labels.astype(np.int64)


def restore_instance_classes(labels: np.ndarray,
                             registry: Optional[InstanceRegistry]) -> Dict[int, Tuple[int, float]]:
    """Restored (class, probability) for every instance code present; (0, 0.0) when unknown"""
    restored = {}
    for z in np.unique(labels[labels > 0]):
        z = int(z)
        try:
            restored[z] = restore_thing_class(registry, z) if registry is not None else (0, 0.0)
        except RegistryError:
            logger.debug(f"Instance {z} has no class evidence")
            restored[z] = (0, 0.0)
    return restored


def vertex_class_ids(labels: np.ndarray, instance_classes: Dict[int, Tuple[int, float]]) -> np.ndarray:
    class_ids = np.where(labels < 0, -labels, 0).astype(np.int64)
    for z, (class_id, _) in instance_classes.items():
        class_ids[labels == z] = class_id
    return class_ids


def extract_mesh(volume: VolumetricMap, registry: Optional[InstanceRegistry] = None,
                 min_corner_weight: float = 0.0) -> LabeledMesh:
    """Zero level set of the TSDF over all observed blocks as a labeled triangle mesh"""
    parts = []
    offset = 0
    for index in volume.observed_blocks():
        surface = _block_surface(volume, index, min_corner_weight)
        if surface is None:
            continue
        world, faces, colors, labels = surface
        parts.append((world, faces + offset, colors, labels))
        offset += len(world)

    if not parts:
        logger.debug("Mesh extraction found no surface")
        return LabeledMesh.empty()

    vertices = np.concatenate([p[0] for p in parts])
    triangles = np.concatenate([p[1] for p in parts])
    colors = np.clip(np.rint(np.concatenate([p[2] for p in parts])), 0, 255).astype(np.uint8)
    labels = np.concatenate([p[3] for p in parts])
    instance_classes = restore_instance_classes(labels, registry)
    mesh = LabeledMesh(vertices, triangles, colors, labels,
                       vertex_class_ids(labels, instance_classes), instance_classes)
    logger.info(f"Extracted mesh with {mesh.n_vertices} vertices and {mesh.n_triangles} triangles")
    return mesh
