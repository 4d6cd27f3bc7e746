"""
Panoptic label fusion
Combines per-pixel semantic classes and detector instance masks into raw
panoptic labels. Segmentation itself arrives precomputed (see dataset_store).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Set

import numpy as np

from services.volumetric_map import LabelSchema, PanopticLabel, UNKNOWN_CODE
from utils.errors import InputError

logger = logging.getLogger(__name__)

DISTRIBUTION_TOLERANCE = 1e-6

_warned_classes: Set[int] = set()


@dataclass
class Detection:
    """One detector instance: frame-local ID, objectness and thing-class distribution"""
    instance_id: int
    confidence: float
    distribution: Dict[int, float]

    def to_dict(self) -> Dict:
        return {
            "id": int(self.instance_id),
            "confidence": float(self.confidence),
            "distribution": {str(k): float(v) for k, v in sorted(self.distribution.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Detection":
        return cls(
            instance_id=int(data["id"]),
            confidence=float(data["confidence"]),
            distribution={int(k): float(v) for k, v in data["distribution"].items()},
        )


@dataclass
class SegmentationFrame:
    """Semantic class map, instance map (0 = unknown) and detections for one frame"""
    class_map: np.ndarray
    instance_map: np.ndarray
    detections: List[Detection] = field(default_factory=list)

    def detection(self, instance_id: int) -> Detection:
        for det in self.detections:
            if det.instance_id == instance_id:
                return det
        raise InputError(f"no detection for frame-local instance {instance_id}")

    def validate(self, schema: LabelSchema):
        """Raise InputError on inconsistent maps, detections or distributions"""
        if self.class_map.shape != self.instance_map.shape:
            raise InputError(
                f"class map {self.class_map.shape} and instance map "
                f"{self.instance_map.shape} differ in size")
        ids = [det.instance_id for det in self.detections]
        if len(ids) != len(set(ids)):
            raise InputError("duplicate detection IDs")
        if any(i < 1 for i in ids):
            raise InputError("detection IDs must be positive")
        present = set(int(v) for v in np.unique(self.instance_map)) - {0}
        missing = present - set(ids)
        if missing:
            raise InputError(f"instances without detections: {sorted(missing)}")
        for det in self.detections:
            if not 0.0 <= det.confidence <= 1.0:
                raise InputError(f"detection {det.instance_id} confidence {det.confidence} outside [0, 1]")
            total = sum(det.distribution.values())
            if abs(total - 1.0) > DISTRIBUTION_TOLERANCE:
                raise InputError(
                    f"detection {det.instance_id} class distribution sums to {total:.6f}")
            if any(p < 0 for p in det.distribution.values()):
                raise InputError(f"detection {det.instance_id} has negative probabilities")
            unknown = [c for c in det.distribution if not schema.is_thing(c)]
            if unknown:
                raise InputError(
                    f"detection {det.instance_id} distribution has non-thing classes {unknown}")


@dataclass
class PanopticImage:
    """Per-pixel panoptic label codes (see PanopticLabel)"""
    codes: np.ndarray

    @property
    def height(self) -> int:
        return int(self.codes.shape[0])

    @property
    def width(self) -> int:
        return int(self.codes.shape[1])

    def label_at(self, row: int, col: int) -> PanopticLabel:
        return PanopticLabel.from_code(self.codes[row, col])

    def instance_ids(self) -> List[int]:
        return [int(v) for v in np.unique(self.codes) if v > 0]

    def instance_areas(self) -> Dict[int, int]:
        values, counts = np.unique(self.codes[self.codes > 0], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    @classmethod
    def unknown(cls, height: int, width: int) -> "PanopticImage":
        return cls(np.full((height, width), UNKNOWN_CODE, dtype=np.int64))


def _warn_unknown_classes(class_ids: np.ndarray):
    for class_id in class_ids:
        class_id = int(class_id)
        if class_id not in _warned_classes:
            _warned_classes.add(class_id)
            logger.warning(f"Class ID {class_id} is not in the label schema; treating as unknown")


def fuse_panoptic(frame: SegmentationFrame, schema: LabelSchema) -> PanopticImage:
    """Raw panoptic labels: instance IDs take precedence, then stuff classes, else unknown"""
    class_map = np.asarray(frame.class_map, dtype=np.int64)
    instance_map = np.asarray(frame.instance_map, dtype=np.int64)
    if class_map.shape != instance_map.shape:
        raise InputError(
            f"class map {class_map.shape} and instance map {instance_map.shape} differ in size")

    stuff_ids = np.array(schema.stuff_ids, dtype=np.int64)
    known_ids = np.array(schema.class_ids, dtype=np.int64)
    is_instance = instance_map != 0
    is_stuff = ~is_instance & np.isin(class_map, stuff_ids)

    stray = ~is_instance & (class_map != 0) & ~np.isin(class_map, known_ids)
    if np.any(stray):
        _warn_unknown_classes(np.unique(class_map[stray]))

    codes = np.full(class_map.shape, UNKNOWN_CODE, dtype=np.int64)
    codes[is_instance] = instance_map[is_instance]
    codes[is_stuff] = -class_map[is_stuff]
    return PanopticImage(codes)
