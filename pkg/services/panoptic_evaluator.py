"""
Vertex-level panoptic evaluation
Transfers predicted mesh labels onto ground-truth surface points and scores
them with panoptic quality (PQ = SQ x RQ) and per-class semantic IoU.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from services.volumetric_map import LabelSchema
from utils.errors import InputError

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5
VOID_CLASS = 0


@dataclass
class LabeledPointSet:
    points: np.ndarray                      # Nx3
    labels: np.ndarray                      # N panoptic label codes
    class_ids: np.ndarray                   # N class IDs, 0 = void
    colors: Optional[np.ndarray] = None     # Nx3 uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if not (len(self.points) == len(self.labels) == len(self.class_ids)):
            raise InputError("point, label and class arrays differ in length")
        if self.colors is not None and len(self.colors) != len(self.points):
            raise InputError("color array length differs from point count")

    def __len__(self) -> int:
        return int(len(self.points))

    def subset(self, mask: np.ndarray) -> "LabeledPointSet":
        return LabeledPointSet(self.points[mask], self.labels[mask], self.class_ids[mask],
                               None if self.colors is None else self.colors[mask])


@dataclass
class EvaluationConfig:
    association_radius: Optional[float] = None   # None: 2 x voxel size
    min_vertices: int = 100
    coverage_only: bool = False

    def __post_init__(self):
        if self.association_radius is not None and self.association_radius <= 0:
            raise InputError("association_radius must be positive")
        if self.min_vertices < 0:
            raise InputError("min_vertices must be non-negative")

    def radius(self, voxel_size: float) -> float:
        return self.association_radius if self.association_radius is not None else 2.0 * voxel_size


@dataclass
class VertexAssociation:
    """Predicted labels transferred to each ground-truth point"""
    labels: np.ndarray
    class_ids: np.ndarray
    covered: np.ndarray

    @property
    def coverage(self) -> float:
        return float(self.covered.mean()) if len(self.covered) else 0.0


@dataclass
class PanopticQualityResult:
    per_class: pd.DataFrame
    aggregates: Dict[str, Dict] = field(default_factory=dict)

    def class_row(self, class_id: int) -> pd.Series:
        return self.per_class.set_index("class_id").loc[class_id]


@dataclass
class SemanticIouResult:
    per_class: pd.DataFrame
    mean_iou: Optional[float]


def associate_vertices(pred, gt: LabeledPointSet, radius: float) -> VertexAssociation:
    """Nearest predicted vertex within radius for every GT point, Unknown otherwise"""
    if radius <= 0:
        raise InputError("association radius must be positive")
    n = len(gt)
    labels = np.zeros(n, dtype=np.int64)
    class_ids = np.zeros(n, dtype=np.int64)
    covered = np.zeros(n, dtype=bool)
    if len(pred.vertices) == 0 or n == 0:
        return VertexAssociation(labels, class_ids, covered)
    tree = cKDTree(pred.vertices)
    distances, index = tree.query(gt.points, k=1, distance_upper_bound=np.nextafter(radius, np.inf))
    covered = np.isfinite(distances)
    labels[covered] = pred.labels[index[covered]]
    class_ids[covered] = pred.class_ids[index[covered]]
    return VertexAssociation(labels, class_ids, covered)


def _segments(labels: np.ndarray, class_ids: np.ndarray) -> Dict[Tuple[int, int], np.ndarray]:
    """(class, code) -> point indices; stuff forms one segment per class"""
    if len(labels) == 0:
        return {}
    keys = np.stack([class_ids, labels], axis=1)
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(unique) + 1))
    return {(int(c), int(z)): order[bounds[i]:bounds[i + 1]] for i, (c, z) in enumerate(unique)}


def _safe_ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def panoptic_quality(pred_labels: np.ndarray, pred_class_ids: np.ndarray,
                     gt_labels: np.ndarray, gt_class_ids: np.ndarray,
                     schema: LabelSchema, min_vertices: int = 100) -> PanopticQualityResult:
    """Per-class PQ/SQ/RQ with IoU > 0.5 matching and things/stuff/all aggregates.

    GT points of class 0 are void: the part of a prediction lying on void is
    left out of its union, and an unmatched prediction mostly on void is not
    a false positive. Predicted thing segments smaller than min_vertices are
    dropped before matching.
    """
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    pred_class_ids = np.asarray(pred_class_ids, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_class_ids = np.asarray(gt_class_ids, dtype=np.int64)
    if not (len(pred_labels) == len(pred_class_ids) == len(gt_labels) == len(gt_class_ids)):
        raise InputError("prediction and ground truth cover different point sets")

    void = gt_class_ids == VOID_CLASS
    gt_segments = {k: v for k, v in _segments(gt_labels, gt_class_ids).items() if k[0] != VOID_CLASS}
    pred_segments = {}
    for (class_id, code), members in _segments(pred_labels, pred_class_ids).items():
        if class_id == VOID_CLASS or code == 0:
            continue
        if schema.is_thing(class_id) and len(members) < min_vertices:
            continue
        pred_segments[(class_id, code)] = members

    gt_owner = np.full(len(gt_labels), -1, dtype=np.int64)
    gt_keys = sorted(gt_segments)
    for i, key in enumerate(gt_keys):
        gt_owner[gt_segments[key]] = i

    classes = schema.class_ids
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    iou_sum = {c: 0.0 for c in classes}
    gt_matched = set()

    for pred_key in sorted(pred_segments):
        class_id = pred_key[0]
        members = pred_segments[pred_key]
        void_overlap = int(np.count_nonzero(void[members]))
        owners, overlaps = np.unique(gt_owner[members], return_counts=True)
        matched = False
        for owner, overlap in zip(owners, overlaps):
            if owner < 0:
                continue
            gt_key = gt_keys[owner]
            if gt_key[0] != class_id:
                continue
            union = len(gt_segments[gt_key]) + len(members) - overlap - void_overlap
            iou = overlap / union
            if iou > MATCH_IOU:
                tp[class_id] += 1
                iou_sum[class_id] += iou
                gt_matched.add(gt_key)
                matched = True
                break
        if not matched and class_id in fp and void_overlap / len(members) <= 0.5:
            fp[class_id] += 1

    for gt_key in gt_keys:
        if gt_key not in gt_matched and gt_key[0] in fn:
            fn[gt_key[0]] += 1

    gt_present = {key[0] for key in gt_keys}
    rows = []
    for c in classes:
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        sq = _safe_ratio(iou_sum[c], tp[c])
        rq = _safe_ratio(tp[c], tp[c] + 0.5 * fp[c] + 0.5 * fn[c])
        rows.append({
            "class_id": c,
            "name": schema.class_name(c),
            "kind": "thing" if schema.is_thing(c) else "stuff",
            "pq": sq * rq,
            "sq": sq,
            "rq": rq,
            "tp": tp[c],
            "fp": fp[c],
            "fn": fn[c],
            "in_gt": c in gt_present,
        })
    per_class = pd.DataFrame(rows, columns=["class_id", "name", "kind", "pq", "sq", "rq",
                                            "tp", "fp", "fn", "in_gt"])

    aggregates = {}
    scored = per_class[per_class["in_gt"]] if len(per_class) else per_class
    for name, kinds in (("all", ("thing", "stuff")), ("things", ("thing",)), ("stuff", ("stuff",))):
        subset = scored[scored["kind"].isin(kinds)] if len(scored) else scored
        if len(subset) == 0:
            aggregates[name] = {"pq": None, "sq": None, "rq": None, "n": 0}
        else:
            aggregates[name] = {
                "pq": float(subset["pq"].mean()),
                "sq": float(subset["sq"].mean()),
                "rq": float(subset["rq"].mean()),
                "n": int(len(subset)),
            }
    return PanopticQualityResult(per_class, aggregates)


def semantic_iou(pred_class_ids: np.ndarray, gt_class_ids: np.ndarray,
                 schema: LabelSchema) -> SemanticIouResult:
    """Per-class IoU over non-void GT points; mean over classes present in GT"""
    pred_class_ids = np.asarray(pred_class_ids, dtype=np.int64)
    gt_class_ids = np.asarray(gt_class_ids, dtype=np.int64)
    if len(pred_class_ids) != len(gt_class_ids):
        raise InputError("prediction and ground truth cover different point sets")
    valid = gt_class_ids != VOID_CLASS
    pred, gt = pred_class_ids[valid], gt_class_ids[valid]

    rows = []
    for c in schema.class_ids:
        in_pred, in_gt = pred == c, gt == c
        union = int(np.count_nonzero(in_pred | in_gt))
        if union == 0:
            continue
        rows.append({
            "class_id": c,
            "name": schema.class_name(c),
            "iou": np.count_nonzero(in_pred & in_gt) / union,
            "in_gt": bool(np.any(in_gt)),
        })
    per_class = pd.DataFrame(rows, columns=["class_id", "name", "iou", "in_gt"])
    present = per_class[per_class["in_gt"]] if len(per_class) else per_class
    mean = float(present["iou"].mean()) if len(present) else None
    return SemanticIouResult(per_class, mean)


def evaluate_mesh(mesh, gt: LabeledPointSet, schema: LabelSchema, cfg: EvaluationConfig,
                  voxel_size: float) -> Dict:
    """Associate, score and assemble the machine-readable metrics report"""
    radius = cfg.radius(voxel_size)
    association = associate_vertices(mesh, gt, radius)
    keep = association.covered if cfg.coverage_only else np.ones(len(gt), dtype=bool)
    pq = panoptic_quality(association.labels[keep], association.class_ids[keep],
                          gt.labels[keep], gt.class_ids[keep], schema, cfg.min_vertices)
    miou = semantic_iou(association.class_ids[keep], gt.class_ids[keep], schema)
    logger.info(f"Evaluated {int(keep.sum())}/{len(gt)} GT points "
                f"(coverage {association.coverage:.3f}): PQ={pq.aggregates['all']['pq']}, "
                f"mIoU={miou.mean_iou}")
    return build_report(pq, miou, association.coverage, radius, cfg)


def _rounded(value):
    return None if value is None else round(float(value), 6)


def build_report(pq: PanopticQualityResult, miou: SemanticIouResult, coverage: float,
                 radius: float, cfg: EvaluationConfig) -> Dict:
    return {
        "protocol": {
            "association_radius": _rounded(radius),
            "min_vertices": cfg.min_vertices,
            "coverage_only": cfg.coverage_only,
            "coverage": _rounded(coverage),
        },
        "panoptic": {
            name: {k: (_rounded(v) if k != "n" else v) for k, v in agg.items()}
            for name, agg in pq.aggregates.items()
        },
        "panoptic_per_class": {
            str(int(row.class_id)): {
                "name": row.name, "kind": row.kind,
                "pq": _rounded(row.pq), "sq": _rounded(row.sq), "rq": _rounded(row.rq),
                "tp": int(row.tp), "fp": int(row.fp), "fn": int(row.fn),
            }
            for row in pq.per_class.itertuples()
        },
        "semantic": {
            "mean_iou": _rounded(miou.mean_iou),
            "per_class": {str(int(row.class_id)): _rounded(row.iou)
                          for row in miou.per_class.itertuples()},
        },
    }


def format_text_report(report: Dict) -> str:
    """Plain-text metrics tables"""
    lines = ["Panoptic quality"]
    summary = pd.DataFrame.from_dict(report["panoptic"], orient="index")
    lines.append(summary.to_string())
    per_class = pd.DataFrame.from_dict(report["panoptic_per_class"], orient="index")
    if len(per_class):
        lines += ["", "Per class", per_class.to_string()]
    lines += ["", f"Semantic mIoU: {report['semantic']['mean_iou']}"]
    iou = pd.Series(report["semantic"]["per_class"], name="iou")
    if len(iou):
        lines.append(iou.to_string())
    protocol = report["protocol"]
    lines += ["", f"Coverage: {protocol['coverage']} (radius {protocol['association_radius']} m)"]
    return "\n".join(lines) + "\n"
