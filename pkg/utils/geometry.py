"""
Camera geometry helpers
Pinhole intrinsics, rigid poses and depth back-projection (OpenCV camera axes:
x right, y down, z forward)
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from utils.errors import InputError

RIGID_TOLERANCE = 1e-6


@dataclass
class CameraFrame:
    """One posed RGB-D observation"""
    intrinsics: np.ndarray   # 3x3 K
    pose: np.ndarray         # 4x4 camera -> world
    depth: np.ndarray        # HxW meters, 0 = invalid
    color: np.ndarray        # HxWx3 uint8

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def validate(self):
        """Raise InputError on a non-rigid pose or bad depth"""
        validate_pose(self.pose)
        if self.intrinsics.shape != (3, 3):
            raise InputError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if self.depth.ndim != 2:
            raise InputError("depth must be a 2D image")
        if self.color.shape[:2] != self.depth.shape:
            raise InputError(
                f"color {self.color.shape[:2]} does not match depth {self.depth.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InputError("depth must be finite and non-negative")


def intrinsics_matrix(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    """Build a pinhole K matrix"""
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], dtype=np.float64)


def validate_pose(pose: np.ndarray):
    """Check that pose is a rigid 4x4 transform with a proper rotation"""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        raise InputError("pose must be a finite 4x4 matrix")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=RIGID_TOLERANCE):
        raise InputError("pose bottom row must be [0, 0, 0, 1]")
    rotation = pose[:3, :3]
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=RIGID_TOLERANCE):
        raise InputError("pose rotation is not orthonormal")
    if np.linalg.det(rotation) <= 0:
        raise InputError("pose rotation has negative determinant")


def pixel_rays(intrinsics: np.ndarray, width: int, height: int) -> np.ndarray:
    """Camera-frame ray directions K^-1 [u, v, 1] for every pixel center, shape HxWx3"""
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    pixels = np.stack([us, vs, np.ones_like(us)], axis=-1)
    return pixels @ np.linalg.inv(intrinsics).T


def backproject(depth: np.ndarray, intrinsics: np.ndarray,
                pose: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World points T K^-1 D(u) [u, 1] for all pixels plus the valid-depth mask"""
    height, width = depth.shape
    rays = pixel_rays(intrinsics, width, height)
    points_cam = rays * depth[..., None]
    points_world = points_cam @ pose[:3, :3].T + pose[:3, 3]
    return points_world, depth > 0


def look_at(eye: Sequence[float], target: Sequence[float],
            up: Optional[Sequence[float]] = None) -> np.ndarray:
    """Camera -> world pose for a camera at eye looking at target"""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up if up is not None else (0.0, 0.0, 1.0), dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise InputError("look_at eye and target coincide")
    forward /= norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along up
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose
