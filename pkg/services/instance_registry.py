"""
Thing-class probability registry
Accumulates confidence-weighted class distributions per map instance so that
instance labels can be turned back into thing classes.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from services.panoptic_frontend import SegmentationFrame
from utils.errors import RegistryError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6


@dataclass
class InstanceRecord:
    """Running sums of confidence * class probability (numerator) and confidence (denominator)"""
    numerator: Dict[int, float] = field(default_factory=dict)
    denominator: float = 0.0
    observations: int = 0

    def distribution(self) -> Dict[int, float]:
        if self.denominator <= 0:
            return {}
        return {c: v / self.denominator for c, v in sorted(self.numerator.items())}


class InstanceRegistry:
    """Per-instance thing-class probabilities keyed by map instance ID"""

    def __init__(self):
        self.records: Dict[int, InstanceRecord] = {}

    def __contains__(self, instance_id: int) -> bool:
        return int(instance_id) in self.records

    def __len__(self) -> int:
        return len(self.records)

    def instance_ids(self) -> List[int]:
        return sorted(self.records)

    def record(self, instance_id: int) -> InstanceRecord:
        """Record for instance_id, created with zero state if absent"""
        return self.records.setdefault(int(instance_id), InstanceRecord())

    def add_observation(self, instance_id: int, confidence: float, distribution: Dict[int, float]):
        rec = self.record(instance_id)
        for class_id, prob in distribution.items():
            rec.numerator[int(class_id)] = rec.numerator.get(int(class_id), 0.0) + confidence * prob
        rec.denominator += confidence
        rec.observations += 1

    def distribution(self, instance_id: int) -> Dict[int, float]:
        rec = self.records.get(int(instance_id))
        if rec is None:
            raise RegistryError(f"instance {instance_id} has no registered observations")
        return rec.distribution()

    def to_dict(self) -> Dict:
        return {
            str(z): {
                "denominator": rec.denominator,
                "observations": rec.observations,
                "numerator": {str(c): v for c, v in sorted(rec.numerator.items())},
            }
            for z, rec in sorted(self.records.items())
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "InstanceRegistry":
        registry = cls()
        for z, entry in data.items():
            registry.records[int(z)] = InstanceRecord(
                numerator={int(c): float(v) for c, v in entry["numerator"].items()},
                denominator=float(entry["denominator"]),
                observations=int(entry.get("observations", 0)),
            )
        return registry


def integrate_thing_probabilities(registry: InstanceRegistry, assignment: Dict[int, int],
                                  frame: SegmentationFrame):
    """Add each assigned detection's confidence-weighted class distribution to its map instance"""
    for local_id, map_id in sorted(assignment.items()):
        det = frame.detection(local_id)
        registry.add_observation(map_id, det.confidence, det.distribution)


def restore_thing_class(registry: InstanceRegistry, instance_id: int) -> Tuple[int, float]:
    """Most probable thing class of a map instance (ties: lowest class ID)"""
    rec = registry.records.get(int(instance_id))
    if rec is None:
        raise RegistryError(f"instance {instance_id} has no registered observations")
    if rec.denominator <= 0 or not rec.numerator:
        raise RegistryError(f"instance {instance_id} has zero accumulated confidence")
    probabilities = rec.distribution()
    best = max(sorted(probabilities), key=lambda c: (probabilities[c], -c))
    return best, probabilities[best]
