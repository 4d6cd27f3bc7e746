"""
Synthetic labeled world
Analytic scenes of planes, boxes and spheres rendered into posed RGB-D frames
with panoptic ground truth and a configurable segmentation noise model.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from services.dataset_store import load_json, save_json, write_dataset_header, write_frame
from services.panoptic_evaluator import LabeledPointSet
from services.panoptic_frontend import Detection, PanopticImage, SegmentationFrame
from services.ply_store import save_point_set
from services.volumetric_map import LabelSchema
from utils.errors import FrameError, InputError
from utils.geometry import CameraFrame, intrinsics_matrix, look_at, pixel_rays, validate_pose

logger = logging.getLogger(__name__)

EXTENT_TOLERANCE = 1e-6
DEFAULT_CAMERA = {"width": 160, "height": 120, "fx": 140.0, "fy": 140.0, "cx": 79.5, "cy": 59.5}
FLIP_MODES = ("pixel", "surface")


class Primitive:
    """Labeled analytic surface"""

    def __init__(self, class_id: int, instance_id: int, color: Sequence[int]):
        self.class_id = int(class_id)
        self.instance_id = int(instance_id)
        self.color = np.clip(np.asarray(color, dtype=np.float64), 0, 255).astype(np.uint8)

    @property
    def label_code(self) -> int:
        return self.instance_id if self.instance_id > 0 else -self.class_id

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per direction, inf when missed"""
        raise NotImplementedError

    def area(self) -> float:
        raise NotImplementedError

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def corners(self) -> np.ndarray:
        raise NotImplementedError


class Rectangle(Primitive):
    """origin + a*u + b*v for a, b in [0, 1]"""

    def __init__(self, origin, u, v, class_id, color, instance_id=0):
        super().__init__(class_id, instance_id, color)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.u = np.asarray(u, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        self.normal = np.cross(self.u, self.v)
        if np.linalg.norm(self.normal) == 0:
            raise InputError("rectangle edges must not be parallel")

    def intersect(self, origin, directions):
        denom = directions @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - origin) @ self.normal) / denom
        hit = np.isfinite(t) & (t > 0)
        points = origin + np.where(hit, t, 0.0)[..., None] * directions
        rel = points - self.origin
        a = (rel @ self.u) / (self.u @ self.u)
        b = (rel @ self.v) / (self.v @ self.v)
        hit &= (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        return np.where(hit, t, np.inf)

    def area(self):
        return float(np.linalg.norm(self.normal))

    def sample(self, count, rng):
        ab = rng.random((count, 2))
        return self.origin + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def corners(self):
        return np.array([self.origin, self.origin + self.u, self.origin + self.v,
                         self.origin + self.u + self.v])


class Box(Primitive):
    """Oriented box rotated by yaw about the world z axis"""

    def __init__(self, center, half_size, class_id, instance_id, color, yaw=0.0):
        super().__init__(class_id, instance_id, color)
        self.center = np.asarray(center, dtype=np.float64)
        self.half_size = np.asarray(half_size, dtype=np.float64)
        if np.any(self.half_size <= 0):
            raise InputError("box half sizes must be positive")
        c, s = np.cos(yaw), np.sin(yaw)
        self.rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def intersect(self, origin, directions):
        local_origin = (origin - self.center) @ self.rotation
        local_dirs = directions @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half_size - local_origin) / local_dirs
            t2 = (self.half_size - local_origin) / local_dirs
        t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (t_near <= t_far) & (t_far > 0)
        t = np.where(t_near > 0, t_near, t_far)
        return np.where(hit, t, np.inf)

    def _faces(self) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        faces = []
        h = self.half_size
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            for sign in (-1.0, 1.0):
                corner = -h.copy()
                corner[axis] = sign * h[axis]
                u = np.zeros(3)
                u[a] = 2 * h[a]
                v = np.zeros(3)
                v[b] = 2 * h[b]
                faces.append((corner, u, v))
        return faces

    def area(self):
        x, y, z = 2 * self.half_size
        return float(2 * (x * y + y * z + x * z))

    def sample(self, count, rng):
        faces = self._faces()
        areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
        which = rng.choice(len(faces), size=count, p=areas / areas.sum())
        ab = rng.random((count, 2))
        local = np.empty((count, 3))
        for i, (corner, u, v) in enumerate(faces):
            sel = which == i
            local[sel] = corner + ab[sel, :1] * u + ab[sel, 1:] * v
        return local @ self.rotation.T + self.center

    def corners(self):
        signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
        return (signs * self.half_size) @ self.rotation.T + self.center


class Sphere(Primitive):

    def __init__(self, center, radius, class_id, instance_id, color):
        super().__init__(class_id, instance_id, color)
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        if self.radius <= 0:
            raise InputError("sphere radius must be positive")

    def intersect(self, origin, directions):
        rel = origin - self.center
        a = np.sum(directions * directions, axis=-1)
        b = 2.0 * (directions @ rel)
        c = rel @ rel - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - root) / (2 * a)
        t_far = (-b + root) / (2 * a)
        t = np.where(t_near > 0, t_near, t_far)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def area(self):
        return float(4.0 * np.pi * self.radius ** 2)

    def sample(self, count, rng):
        directions = rng.normal(size=(count, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return self.center + self.radius * directions

    def corners(self):
        r = self.radius
        return np.array([self.center - r, self.center + r])


@dataclass
class NoiseModel:
    depth_sigma_a: float = 0.0          # depth sigma(z) = a + b z^2 (m)
    depth_sigma_b: float = 0.0
    label_flip_rate: float = 0.0
    mask_erosion_px: int = 0
    mask_dilation_px: int = 0
    confidence_range: Tuple[float, float] = (0.9, 1.0)
    permute_ids: bool = True
    class_confusion: float = 0.0        # probability mass spread to other thing classes
    flip_mode: str = "pixel"            # "pixel": iid per pixel and frame; "surface": per surface cell
    flip_cell_size: float = 0.05        # surface cell edge (m) for flip_mode "surface"

    def __post_init__(self):
        self.confidence_range = tuple(float(v) for v in self.confidence_range)
        low, high = self.confidence_range
        if not 0.0 <= low <= high <= 1.0:
            raise InputError("confidence_range must satisfy 0 <= low <= high <= 1")
        if not 0.0 <= self.label_flip_rate <= 1.0:
            raise InputError("label_flip_rate must lie in [0, 1]")
        if not 0.0 <= self.class_confusion < 1.0:
            raise InputError("class_confusion must lie in [0, 1)")
        if self.depth_sigma_a < 0 or self.depth_sigma_b < 0:
            raise InputError("depth noise coefficients must be non-negative")
        if self.mask_erosion_px < 0 or self.mask_dilation_px < 0:
            raise InputError("mask erosion/dilation must be non-negative")
        if self.flip_mode not in FLIP_MODES:
            raise InputError(f"flip_mode must be one of {FLIP_MODES}, got '{self.flip_mode}'")
        if self.flip_cell_size <= 0:
            raise InputError("flip_cell_size must be positive")

    @property
    def is_zero(self) -> bool:
        return (self.depth_sigma_a == 0 and self.depth_sigma_b == 0 and self.label_flip_rate == 0
                and self.mask_erosion_px == 0 and self.mask_dilation_px == 0
                and self.class_confusion == 0)


@dataclass
class SceneSpec:
    name: str
    schema: LabelSchema
    extents: np.ndarray                         # 2x3 [min, max]
    primitives: List[Primitive]
    poses: List[np.ndarray]
    intrinsics: np.ndarray
    width: int
    height: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    source: Dict = field(default_factory=dict)

    def validate(self):
        lo, hi = self.extents
        for prim in self.primitives:
            corners = prim.corners()
            if np.any(corners < lo - EXTENT_TOLERANCE) or np.any(corners > hi + EXTENT_TOLERANCE):
                raise InputError(f"primitive of class {prim.class_id} leaves the scene extents")
            if prim.instance_id > 0 and not self.schema.is_thing(prim.class_id):
                raise InputError(f"instance primitive has non-thing class {prim.class_id}")
            if prim.instance_id == 0 and not self.schema.is_stuff(prim.class_id):
                raise InputError(f"surface primitive has non-stuff class {prim.class_id}")
        owners: Dict[int, int] = {}
        for prim in self.primitives:
            if prim.instance_id > 0 and owners.setdefault(prim.instance_id, prim.class_id) != prim.class_id:
                raise InputError(f"instance {prim.instance_id} spans several classes")
        for pose in self.poses:
            validate_pose(pose)

    def instance_ids(self) -> List[int]:
        return sorted({p.instance_id for p in self.primitives if p.instance_id > 0})

    def instance_class(self, instance_id: int) -> int:
        for prim in self.primitives:
            if prim.instance_id == instance_id:
                return prim.class_id
        raise InputError(f"scene has no instance {instance_id}")

    def contains(self, point: np.ndarray) -> bool:
        lo, hi = self.extents
        return bool(np.all(point >= lo - EXTENT_TOLERANCE) and np.all(point <= hi + EXTENT_TOLERANCE))


@dataclass
class RenderedFrame:
    camera: CameraFrame
    segmentation: SegmentationFrame
    ground_truth: PanopticImage
    gt_instance: np.ndarray                     # per-pixel GT instance ID (0 = none)
    local_to_gt: Dict[int, int] = field(default_factory=dict)


# Scene file ------------------------------------------------------------------

def _trajectory(data: Dict) -> List[np.ndarray]:
    kind = data.get("type", "orbit")
    if kind == "orbit":
        center = np.asarray(data.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
        target = np.asarray(data.get("target", center), dtype=np.float64)
        radius = float(data["radius"])
        height = float(data.get("height", 1.5))
        frames = int(data["frames"])
        loops = float(data.get("loops", 1.0))
        phase = float(data.get("phase", 0.0))
        poses = []
        for i in range(frames):
            angle = phase + 2.0 * np.pi * loops * i / max(frames, 1)
            eye = center + np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
            eye[2] = height
            poses.append(look_at(eye, target))
        return poses
    if kind == "keyframes":
        keyframes = data["keyframes"]
        steps = int(data.get("steps_between", 0))
        poses = []
        for k, frame in enumerate(keyframes):
            eye = np.asarray(frame["eye"], dtype=np.float64)
            target = np.asarray(frame["target"], dtype=np.float64)
            poses.append(look_at(eye, target))
            if k + 1 < len(keyframes):
                nxt = keyframes[k + 1]
                for s in range(1, steps + 1):
                    a = s / (steps + 1)
                    poses.append(look_at((1 - a) * eye + a * np.asarray(nxt["eye"]),
                                         (1 - a) * target + a * np.asarray(nxt["target"])))
        return poses
    raise InputError(f"unknown trajectory type {kind!r}")


def scene_from_dict(data: Dict) -> SceneSpec:
    """Build and validate a scene from its JSON form (see docs/FORMATS.md)"""
    try:
        schema = LabelSchema.from_dict(data["classes"])
        primitives: List[Primitive] = []
        for plane in data.get("planes", []):
            primitives.append(Rectangle(plane["origin"], plane["u"], plane["v"], plane["class"],
                                        plane.get("color", [128, 128, 128])))
        for box in data.get("boxes", []):
            primitives.append(Box(box["center"], box["half_size"], box["class"], box["instance"],
                                  box.get("color", [200, 80, 80]), box.get("yaw", 0.0)))
        for sphere in data.get("spheres", []):
            primitives.append(Sphere(sphere["center"], sphere["radius"], sphere["class"],
                                     sphere["instance"], sphere.get("color", [80, 80, 200])))
        camera = dict(DEFAULT_CAMERA)
        camera.update(data.get("camera", {}))
        spec = SceneSpec(
            name=data.get("name", "scene"),
            schema=schema,
            extents=np.asarray(data["extents"], dtype=np.float64).reshape(2, 3),
            primitives=primitives,
            poses=_trajectory(data["trajectory"]),
            intrinsics=intrinsics_matrix(camera["fx"], camera["fy"], camera["cx"], camera["cy"]),
            width=int(camera["width"]),
            height=int(camera["height"]),
            noise=NoiseModel(**data.get("noise", {})),
            seed=int(data.get("seed", 0)),
            source=data,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"invalid scene description: {e}") from e
    spec.validate()
    return spec


def load_scene(path: str) -> SceneSpec:
    return scene_from_dict(load_json(path))


# Rendering -----------------------------------------------------------------------

def _trace(spec: SceneSpec, pose: np.ndarray, intrinsics: np.ndarray,
           width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Depth (ray parameter with unit camera z) and hit primitive index (-1 = none)"""
    rays = pixel_rays(intrinsics, width, height) @ pose[:3, :3].T
    origin = pose[:3, 3]
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        t = prim.intersect(origin, rays)
        closer = t < depth
        depth[closer] = t[closer]
        owner[closer] = i
    depth[~np.isfinite(depth)] = 0.0
    return depth, owner


def _frame_local_ids(visible: List[int], noise: NoiseModel, rng: np.random.Generator) -> Dict[int, int]:
    if noise.permute_ids:
        local = rng.permutation(len(visible)) + 1
        return {gt: int(z) for gt, z in zip(visible, local)}
    return {gt: gt for gt in visible}


def _class_distribution(true_class: int, schema: LabelSchema, confusion: float) -> Dict[int, float]:
    others = [c for c in schema.thing_ids if c != true_class]
    if not others or confusion == 0:
        return {true_class: 1.0}
    share = confusion / len(others)
    distribution = {c: share for c in others}
    distribution[true_class] = 1.0 - confusion
    return distribution


def render_frame(spec: SceneSpec, pose: np.ndarray, intrinsics: Optional[np.ndarray] = None,
                 resolution: Optional[Tuple[int, int]] = None, frame_index: int = 0) -> RenderedFrame:
    """Render depth, color, ground truth and a noisy segmentation for one pose.

    Noise draws come from default_rng(seed + frame_index), so frames are
    reproducible independently of each other.
    """
    intrinsics = spec.intrinsics if intrinsics is None else np.asarray(intrinsics, dtype=np.float64)
    width, height = resolution if resolution is not None else (spec.width, spec.height)
    validate_pose(pose)
    rng = np.random.default_rng(spec.seed + frame_index)

    if spec.contains(pose[:3, 3]):
        depth, owner = _trace(spec, pose, intrinsics, width, height)
    else:
        logger.warning(f"Camera at {pose[:3, 3]} is outside the scene extents; frame has no depth")
        depth, owner = np.zeros((height, width)), np.full((height, width), -1, dtype=np.int64)

    hit = owner >= 0
    class_of = np.array([p.class_id for p in spec.primitives] + [0], dtype=np.int64)
    instance_of = np.array([p.instance_id for p in spec.primitives] + [0], dtype=np.int64)
    color_of = np.array([p.color for p in spec.primitives] + [[0, 0, 0]], dtype=np.uint8)
    gt_class = class_of[owner]
    gt_instance = instance_of[owner]
    color = color_of[owner]
    gt_codes = np.where(gt_instance > 0, gt_instance, -gt_class)
    gt_codes[~hit] = 0

    noise = spec.noise
    noisy_depth = depth.copy()
    if noise.depth_sigma_a > 0 or noise.depth_sigma_b > 0:
        sigma = noise.depth_sigma_a + noise.depth_sigma_b * np.square(depth)
        noisy_depth[hit] = np.maximum(depth[hit] + rng.normal(size=int(hit.sum())) * sigma[hit], 0.0)

    visible = [int(z) for z in np.unique(gt_instance[gt_instance > 0])]
    local_ids = _frame_local_ids(visible, noise, rng)
    class_map = gt_class.copy()
    instance_map = np.zeros_like(gt_instance)
    for gt_id in visible:
        mask = gt_instance == gt_id
        if noise.mask_erosion_px:
            mask = ndimage.binary_erosion(mask, iterations=noise.mask_erosion_px)
        if noise.mask_dilation_px:
            mask = ndimage.binary_dilation(mask, iterations=noise.mask_dilation_px)
            mask &= instance_map == 0
        instance_map[mask] = local_ids[gt_id]
        class_map[mask] = spec.instance_class(gt_id)

    if noise.label_flip_rate > 0 and noise.flip_mode == "surface":
        rays = pixel_rays(intrinsics, width, height) @ pose[:3, :3].T
        points = pose[:3, 3] + depth[..., None] * rays
        class_map, instance_map = _flip_surface_cells(class_map, instance_map, points,
                                                      spec.schema.stuff_ids, noise, spec.seed)
    elif noise.label_flip_rate > 0:
        class_map, instance_map = _flip_labels(class_map, instance_map, noise.label_flip_rate, rng)

    present = set(int(z) for z in np.unique(instance_map[instance_map > 0]))
    detections = []
    local_to_gt = {}
    for gt_id in visible:
        z = local_ids[gt_id]
        if z not in present:
            continue
        low, high = noise.confidence_range
        true_class = spec.instance_class(gt_id)
        detections.append(Detection(z, float(rng.uniform(low, high)) if high > low else low,
                                    _class_distribution(true_class, spec.schema, noise.class_confusion)))
        local_to_gt[z] = gt_id
    detections.sort(key=lambda d: d.instance_id)

    camera = CameraFrame(intrinsics.copy(), np.asarray(pose, dtype=np.float64).copy(), noisy_depth, color)
    return RenderedFrame(camera, SegmentationFrame(class_map, instance_map, detections),
                         PanopticImage(gt_codes), gt_instance, local_to_gt)


def _flip_labels(class_map: np.ndarray, instance_map: np.ndarray, rate: float,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Replace a fraction of labeled pixels by another label visible in the same frame"""
    classes = class_map.reshape(-1).copy()
    instances = instance_map.reshape(-1).copy()
    labeled = np.flatnonzero(classes > 0)
    if len(labeled) == 0:
        return class_map, instance_map
    pairs, inverse = np.unique(np.stack([classes[labeled], instances[labeled]], axis=1),
                               axis=0, return_inverse=True)
    if len(pairs) < 2:
        return class_map, instance_map
    chosen = rng.random(len(labeled)) < rate
    flip = labeled[chosen]
    own = inverse.reshape(-1)[chosen]
    # draw among the other len(pairs) - 1 labels
    pick = rng.integers(0, len(pairs) - 1, size=len(flip))
    pick += pick >= own
    classes[flip] = pairs[pick, 0]
    instances[flip] = pairs[pick, 1]
    return classes.reshape(class_map.shape), instances.reshape(instance_map.shape)


def _cell_hash(cells: np.ndarray, seed: int, stream: int) -> np.ndarray:
    """Deterministic uint64 hash of integer surface cells, independent of the frame"""
    frame = pd.DataFrame({"x": cells[:, 0], "y": cells[:, 1], "z": cells[:, 2]})
    frame["seed"] = int(seed)
    frame["stream"] = int(stream)
    return pd.util.hash_pandas_object(frame, index=False).to_numpy(dtype=np.uint64)


def _flip_surface_cells(class_map: np.ndarray, instance_map: np.ndarray, points: np.ndarray,
                        stuff_ids: List[int], noise: NoiseModel,
                        seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Relabel whole surface cells to another stuff class.

    A cell is picked (and given its replacement class) by a hash of its integer
    coordinates, so every view of the cell carries the same wrong label.
    Colors stay untouched.
    """
    classes = class_map.reshape(-1).copy()
    instances = instance_map.reshape(-1).copy()
    labeled = np.flatnonzero(classes > 0)
    if len(labeled) == 0 or not stuff_ids:
        return class_map, instance_map
    # cells centered on multiples of the cell size, so axis-aligned walls never straddle two
    cells = np.floor(points.reshape(-1, 3)[labeled] / noise.flip_cell_size + 0.5).astype(np.int64)
    draw = (_cell_hash(cells, seed, 0) >> np.uint64(11)).astype(np.float64) / 2.0 ** 53
    pick = _cell_hash(cells, seed, 1)

    stuff = np.asarray(sorted(stuff_ids), dtype=np.int64)
    own = classes[labeled]
    is_stuff = (instances[labeled] == 0) & np.isin(own, stuff)
    # stuff pixels draw among the other stuff classes, instance pixels among all of them
    choices = np.where(is_stuff, len(stuff) - 1, len(stuff))
    chosen = (draw < noise.label_flip_rate) & (choices > 0)
    offset = (pick[chosen] % choices[chosen].astype(np.uint64)).astype(np.int64)
    own_rank = np.searchsorted(stuff, own[chosen])
    offset += is_stuff[chosen] & (offset >= own_rank)
    classes[labeled[chosen]] = stuff[offset]
    instances[labeled[chosen]] = 0
    return classes.reshape(class_map.shape), instances.reshape(instance_map.shape)


def visible_mask(spec: SceneSpec, points: np.ndarray, poses: Sequence[np.ndarray],
                 tolerance: float = 1e-6) -> np.ndarray:
    """True for points inside some pose's image whose line of sight hits nothing first"""
    points = np.asarray(points, dtype=np.float64)
    seen = np.zeros(len(points), dtype=bool)
    for pose in poses:
        if not spec.contains(pose[:3, 3]):
            continue
        candidates = np.flatnonzero(~seen)
        if len(candidates) == 0:
            break
        origin = pose[:3, 3]
        cam = (points[candidates] - origin) @ pose[:3, :3]
        in_front = cam[:, 2] > 0
        pixels = cam @ spec.intrinsics.T
        z = np.where(in_front, pixels[:, 2], 1.0)
        u, v = pixels[:, 0] / z, pixels[:, 1] / z
        inside = in_front & (u >= -0.5) & (u < spec.width - 0.5) & (v >= -0.5) & (v < spec.height - 0.5)
        candidates = candidates[inside]
        directions = points[candidates] - origin
        nearest = np.full(len(candidates), np.inf)
        for prim in spec.primitives:
            nearest = np.minimum(nearest, prim.intersect(origin, directions))
        # the point itself sits at ray parameter 1
        seen[candidates[nearest >= 1.0 - tolerance]] = True
    return seen


def ground_truth_points(spec: SceneSpec, density: float, seed: Optional[int] = None,
                        poses: Optional[Sequence[np.ndarray]] = None) -> LabeledPointSet:
    """Uniform surface samples of every primitive, round(area * density) each.

    With poses, only samples visible from at least one of them are kept.
    """
    if density <= 0:
        raise InputError("density must be positive")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    points, labels, classes, colors = [], [], [], []
    for prim in spec.primitives:
        count = int(round(prim.area() * density))
        if count == 0:
            continue
        points.append(prim.sample(count, rng))
        labels.append(np.full(count, prim.label_code, dtype=np.int64))
        classes.append(np.full(count, prim.class_id, dtype=np.int64))
        colors.append(np.repeat(prim.color[None, :], count, axis=0))
    if not points:
        return LabeledPointSet(np.empty((0, 3)), np.empty(0), np.empty(0), np.empty((0, 3), dtype=np.uint8))
    result = LabeledPointSet(np.concatenate(points), np.concatenate(labels),
                             np.concatenate(classes), np.concatenate(colors))
    if poses is None:
        return result
    keep = visible_mask(spec, result.points, poses)
    logger.debug(f"{int(keep.sum())}/{len(keep)} ground-truth samples are visible")
    return LabeledPointSet(result.points[keep], result.labels[keep], result.class_ids[keep],
                           result.colors[keep])


def write_dataset(spec: SceneSpec, out_dir: str, frames: Optional[int] = None,
                  density: float = 2000.0) -> int:
    """Render the trajectory into the on-disk dataset format; returns frames written"""
    poses = spec.poses[:frames] if frames is not None else spec.poses
    write_dataset_header(out_dir, spec.schema, spec.intrinsics, poses)
    for index, pose in enumerate(poses):
        rendered = render_frame(spec, pose, frame_index=index)
        write_frame(out_dir, index, rendered.camera, rendered.segmentation, rendered.gt_instance)
        logger.debug(f"Rendered frame {index}")
    save_point_set(ground_truth_points(spec, density, poses=poses), os.path.join(out_dir, "gt_points.ply"), spec.schema)
    if spec.source:
        save_json(os.path.join(out_dir, "scene.json"), spec.source)
    logger.info(f"Wrote {len(poses)} frames of scene '{spec.name}' to {out_dir}")
    return len(poses)


class SceneDataset:
    """A scene description replayed straight from the renderer, frame by frame.

    Offers the read side of FrameDataset (schema, frame_count, load_frame,
    ground truth) without writing images to disk.
    """

    def __init__(self, spec: SceneSpec, density: float = 2000.0):
        self.spec = spec
        self.schema = spec.schema
        self.density = density
        self._ground_truth: Optional[LabeledPointSet] = None

    @classmethod
    def from_file(cls, path: str, seed: Optional[int] = None, density: float = 2000.0) -> "SceneDataset":
        data = load_json(path)
        if seed is not None:
            data["seed"] = seed
        return cls(scene_from_dict(data), density)

    @property
    def frame_count(self) -> int:
        return len(self.spec.poses)

    @property
    def has_ground_truth(self) -> bool:
        return True

    def load_frame(self, index: int) -> Tuple[CameraFrame, SegmentationFrame]:
        if not 0 <= index < self.frame_count:
            raise FrameError(index, f"index outside 0..{self.frame_count - 1}")
        rendered = render_frame(self.spec, self.spec.poses[index], frame_index=index)
        return rendered.camera, rendered.segmentation

    def load_ground_truth(self) -> LabeledPointSet:
        if self._ground_truth is None:
            self._ground_truth = ground_truth_points(self.spec, self.density, poses=self.spec.poses)
        return self._ground_truth
