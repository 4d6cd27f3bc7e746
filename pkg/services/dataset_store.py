"""
On-disk frame dataset storage
Layout of a dataset directory:
    labels.json               label schema {"stuff": {...}, "things": {...}}
    intrinsics.txt            fx fy cx cy
    poses.txt                 one camera->world 4x4 per frame, 16 numbers row-major per line
    depth/NNNNNN.png          uint16 millimeters, 0 = invalid
    color/NNNNNN.png          8-bit RGB
    class/NNNNNN.png          uint16 class IDs, 0 = void
    instance/NNNNNN.png       uint16 frame-local instance IDs, 0 = unknown
    detections/NNNNNN.json    [{"id", "confidence", "distribution": {class: prob}}]
    gt_points.ply             optional labeled ground-truth surface samples
    gt_instance/NNNNNN.png    optional ground-truth instance IDs (synthetic scenes)
"""
import json
import logging
import os
import struct
import zlib
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from services.panoptic_evaluator import LabeledPointSet
from services.panoptic_frontend import Detection, SegmentationFrame
from services.ply_store import load_point_set
from services.volumetric_map import LabelSchema
from utils.errors import DatasetError, FrameError, PanopticError
from utils.geometry import CameraFrame, intrinsics_matrix, validate_pose

logger = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0
FRAME_DIRS = ("depth", "color", "class", "instance", "detections")


def frame_name(index: int, suffix: str = ".png") -> str:
    return f"{index:06d}{suffix}"


# JSON / text helpers --------------------------------------------------------

def save_json(path: str, data, sort_keys: bool = True) -> bool:
    """Write JSON with an atomic replace"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=sort_keys)
        f.write("\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return True


def load_json(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_poses(path: str, poses: List[np.ndarray]):
    lines = [" ".join(f"{v:.9f}" for v in np.asarray(p, dtype=np.float64).reshape(-1)) for p in poses]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        values = np.array([float(v) for v in text.split()], dtype=np.float64)
    except ValueError as e:
        raise DatasetError(f"{path}: non-numeric pose entry") from e
    if len(values) % 16:
        raise DatasetError(f"{path}: {len(values)} numbers is not a whole number of 4x4 poses")
    return values.reshape(-1, 4, 4)


def write_intrinsics(path: str, intrinsics: np.ndarray):
    k = np.asarray(intrinsics, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{k[0, 0]:.9f} {k[1, 1]:.9f} {k[0, 2]:.9f} {k[1, 2]:.9f}\n")


def read_intrinsics(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        values = f.read().split()
    if len(values) != 4:
        raise DatasetError(f"{path}: expected 'fx fy cx cy'")
    try:
        return intrinsics_matrix(*(float(v) for v in values))
    except ValueError as e:
        raise DatasetError(f"{path}: non-numeric intrinsics") from e


# Image codec ----------------------------------------------------------------

def write_png16(path: str, image: np.ndarray):
    image = np.asarray(image)
    if image.min(initial=0) < 0 or image.max(initial=0) > np.iinfo(np.uint16).max:
        raise PanopticError(f"{path}: values outside the 16-bit range")
    Image.fromarray(image.astype(np.uint16)).save(path)


def write_rgb(path: str, image: np.ndarray):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def _read_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        img.load()
        return np.array(img)


# Writers --------------------------------------------------------------------

def write_frame(root: str, index: int, cam: CameraFrame, segmentation: SegmentationFrame,
                gt_instance: Optional[np.ndarray] = None):
    """Write one frame's images and detections (poses and intrinsics are dataset-level)"""
    for name in FRAME_DIRS:
        os.makedirs(os.path.join(root, name), exist_ok=True)
    depth_mm = np.rint(cam.depth * DEPTH_SCALE)
    write_png16(os.path.join(root, "depth", frame_name(index)), depth_mm)
    write_rgb(os.path.join(root, "color", frame_name(index)), cam.color)
    write_png16(os.path.join(root, "class", frame_name(index)), segmentation.class_map)
    write_png16(os.path.join(root, "instance", frame_name(index)), segmentation.instance_map)
    save_json(os.path.join(root, "detections", frame_name(index, ".json")),
              [det.to_dict() for det in segmentation.detections])
    if gt_instance is not None:
        os.makedirs(os.path.join(root, "gt_instance"), exist_ok=True)
        write_png16(os.path.join(root, "gt_instance", frame_name(index)), gt_instance)


def write_dataset_header(root: str, schema: LabelSchema, intrinsics: np.ndarray,
                         poses: List[np.ndarray]):
    os.makedirs(root, exist_ok=True)
    save_json(os.path.join(root, "labels.json"), schema.to_dict())
    write_intrinsics(os.path.join(root, "intrinsics.txt"), intrinsics)
    write_poses(os.path.join(root, "poses.txt"), poses)


# Reader ---------------------------------------------------------------------

class FrameDataset:
    """Read access to a dataset directory"""

    def __init__(self, root: str):
        self.root = root
        if not os.path.isdir(root):
            raise DatasetError(f"dataset directory {root} does not exist")
        for required in ("labels.json", "intrinsics.txt", "poses.txt"):
            if not os.path.exists(os.path.join(root, required)):
                raise DatasetError(f"dataset {root} is missing {required}")
        try:
            self.schema = LabelSchema.from_dict(load_json(os.path.join(root, "labels.json")))
        except (json.JSONDecodeError, PanopticError) as e:
            raise DatasetError(f"invalid labels.json: {e}") from e
        self.intrinsics = read_intrinsics(os.path.join(root, "intrinsics.txt"))
        self.poses = read_poses(os.path.join(root, "poses.txt"))
        for i, pose in enumerate(self.poses):
            try:
                validate_pose(pose)
            except PanopticError as e:
                raise DatasetError(f"pose {i} in poses.txt: {e}") from e
        self._check_frame_files()

    def _check_frame_files(self):
        depth_dir = os.path.join(self.root, "depth")
        if not os.path.isdir(depth_dir):
            return
        indices = [int(name[:-4]) for name in os.listdir(depth_dir)
                   if name.endswith(".png") and name[:-4].isdigit()]
        if indices and max(indices) >= len(self.poses):
            raise DatasetError(
                f"depth frame {max(indices)} has no pose ({len(self.poses)} poses in poses.txt)")

    @property
    def frame_count(self) -> int:
        return int(len(self.poses))

    @property
    def has_ground_truth(self) -> bool:
        return os.path.exists(self.ground_truth_path)

    @property
    def ground_truth_path(self) -> str:
        return os.path.join(self.root, "gt_points.ply")

    def _path(self, kind: str, index: int, suffix: str = ".png") -> str:
        return os.path.join(self.root, kind, frame_name(index, suffix))

    def load_frame(self, index: int) -> Tuple[CameraFrame, SegmentationFrame]:
        """Decode and validate frame index.

        Unreadable images and invalid labels raise FrameError (the frame is
        skipped). Images whose shapes disagree with each other raise DatasetError.
        """
        if not 0 <= index < self.frame_count:
            raise FrameError(index, f"index outside 0..{self.frame_count - 1}")
        try:
            depth = _read_image(self._path("depth", index)).astype(np.float64) / DEPTH_SCALE
            color = _read_image(self._path("color", index))
            class_map = _read_image(self._path("class", index)).astype(np.int64)
            instance_map = _read_image(self._path("instance", index)).astype(np.int64)
            detections = [Detection.from_dict(d) for d in load_json(self._path("detections", index, ".json"))]
        except (OSError, SyntaxError, ValueError, KeyError, TypeError, struct.error, zlib.error) as e:
            raise FrameError(index, f"could not decode: {e}", e) from e

        if color.ndim != 3 or color.shape[2] < 3:
            raise FrameError(index, "color image is not RGB")
        # pose and image geometry problems abort the replay; label content skips the frame
        if color.shape[:2] != depth.shape or class_map.shape != depth.shape or instance_map.shape != depth.shape:
            raise DatasetError(
                f"frame {index}: color {color.shape[:2]}, class {class_map.shape} and instance "
                f"{instance_map.shape} images must match depth {depth.shape}")
        cam = CameraFrame(self.intrinsics.copy(), self.poses[index].copy(), depth,
                          color[..., :3].astype(np.uint8))
        try:
            cam.validate()
        except PanopticError as e:
            raise DatasetError(f"frame {index}: {e}") from e
        segmentation = SegmentationFrame(class_map, instance_map, detections)
        try:
            segmentation.validate(self.schema)
        except PanopticError as e:
            raise FrameError(index, str(e), e) from e
        return cam, segmentation

    def load_ground_truth_instances(self, index: int) -> Optional[np.ndarray]:
        path = self._path("gt_instance", index)
        if not os.path.exists(path):
            return None
        return _read_image(path).astype(np.int64)

    def load_ground_truth(self) -> LabeledPointSet:
        return load_point_set(self.ground_truth_path)
