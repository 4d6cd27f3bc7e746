"""
Panoptic label tracking
Resolves detector frame-local instance IDs against instances already in the
map by mask IoU with a reference image rendered from the map.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from services.panoptic_frontend import PanopticImage
from services.volumetric_map import VolumetricMap, UNKNOWN_CODE
from utils.errors import InputError
from utils.geometry import CameraFrame, backproject

logger = logging.getLogger(__name__)


@dataclass
class TrackingConfig:
    iou_threshold: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise InputError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")


@dataclass
class TrackingStats:
    """Per-frame tracking summary"""
    raw_instances: int = 0
    matched: int = 0
    created: int = 0
    mean_match_iou: float = 0.0

    def to_dict(self) -> Dict:
        return {
            "raw_instances": self.raw_instances,
            "matched": self.matched,
            "created": self.created,
            "mean_match_iou": round(self.mean_match_iou, 6),
        }


def render_reference_labels(volume: VolumetricMap, cam: CameraFrame) -> PanopticImage:
    """Map labels at the voxels containing each back-projected depth pixel"""
    codes = np.full(cam.depth.shape, UNKNOWN_CODE, dtype=np.int64)
    if volume.block_count == 0:
        return PanopticImage(codes)

    points, valid = backproject(cam.depth, cam.intrinsics, cam.pose)
    if not np.any(valid):
        return PanopticImage(codes)

    flat = volume.flat_indices(volume.world_to_global(points[valid]))
    hit = flat >= 0
    labels = np.zeros(len(flat), dtype=np.int64)
    labels[hit] = volume.flat_view("label")[flat[hit]]
    codes[valid] = labels
    return PanopticImage(codes)


def compute_iou_matrix(raw: PanopticImage, reference: PanopticImage) -> pd.DataFrame:
    """IoU table U(reference z~, raw z): rows are reference instance IDs, columns raw IDs"""
    if raw.codes.shape != reference.codes.shape:
        raise InputError(
            f"raw image {raw.codes.shape} and reference {reference.codes.shape} differ in size")

    raw_ids, raw_areas = np.unique(raw.codes[raw.codes > 0], return_counts=True)
    ref_ids, ref_areas = np.unique(reference.codes[reference.codes > 0], return_counts=True)
    table = np.zeros((len(ref_ids), len(raw_ids)))
    if len(raw_ids) and len(ref_ids):
        both = (raw.codes > 0) & (reference.codes > 0)
        pairs = np.stack([reference.codes[both], raw.codes[both]], axis=1)
        if len(pairs):
            unique_pairs, overlap = np.unique(pairs, axis=0, return_counts=True)
            rows = np.searchsorted(ref_ids, unique_pairs[:, 0])
            cols = np.searchsorted(raw_ids, unique_pairs[:, 1])
            union = ref_areas[rows] + raw_areas[cols] - overlap
            table[rows, cols] = overlap / union

    return pd.DataFrame(table,
                        index=pd.Index(ref_ids.astype(np.int64), name="reference"),
                        columns=pd.Index(raw_ids.astype(np.int64), name="raw"))


def _remap_instances(codes: np.ndarray, assignment: Dict[int, int]) -> np.ndarray:
    resolved = codes.copy()
    instance = codes > 0
    if not np.any(instance):
        return resolved
    keys = np.array(sorted(assignment), dtype=np.int64)
    values = np.array([assignment[k] for k in keys], dtype=np.int64)
    resolved[instance] = values[np.searchsorted(keys, codes[instance])]
    return resolved


def track_labels(raw: PanopticImage, reference: PanopticImage, volume: VolumetricMap,
                 cfg: TrackingConfig) -> Tuple[PanopticImage, Dict[int, int]]:
    """Greedy exclusive IoU matching of raw instances to reference instances.

    Raw instances are visited by descending mask area (ties: ascending
    frame-local ID). Each takes the reference instance with the highest IoU
    (ties: ascending reference ID) if that IoU exceeds the threshold and the
    reference instance is still free; otherwise a new map ID is allocated.
    """
    iou = compute_iou_matrix(raw, reference)
    areas = raw.instance_areas()
    order = sorted(areas, key=lambda z: (-areas[z], z))

    ref_ids = iou.index.to_numpy()
    table = iou.to_numpy()
    consumed = set()
    assignment: Dict[int, int] = {}
    for z in order:
        if len(ref_ids):
            column = table[:, iou.columns.get_loc(z)]
            best = int(np.argmax(column))
            candidate = int(ref_ids[best])
            if column[best] > cfg.iou_threshold and candidate not in consumed:
                assignment[z] = candidate
                consumed.add(candidate)
                continue
        assignment[z] = volume.allocate_instance_id()

    return PanopticImage(_remap_instances(raw.codes, assignment)), assignment


def summarize_tracking(raw: PanopticImage, reference: PanopticImage,
                       assignment: Dict[int, int]) -> TrackingStats:
    """Matched/created counts and mean IoU of matched pairs"""
    iou = compute_iou_matrix(raw, reference)
    reference_ids = set(int(i) for i in iou.index)
    matches = [(z, zhat) for z, zhat in assignment.items() if zhat in reference_ids]
    stats = TrackingStats(raw_instances=len(assignment), matched=len(matches),
                          created=len(assignment) - len(matches))
    if matches:
        stats.mean_match_iou = float(np.mean([iou.loc[zhat, z] for z, zhat in matches]))
    return stats
