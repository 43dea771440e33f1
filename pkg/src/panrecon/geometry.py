"""Pinhole camera model and rigid transforms.

Camera frame follows the usual RGB-D convention: x right, y down, z forward.
Poses are world-from-camera.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("last row of a rigid transform must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at `eye` looking at `target`, with image-up roughly along `up`."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("view direction is parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def project(point_camera, intr: Intrinsics) -> tuple[float, float] | None:
    """Project a camera-frame point to continuous pixel coordinates.

    Returns None when the pixel falls outside the image. Raises
    BehindCameraError for points with z <= 0.
    """
    x, y, z = (float(c) for c in point_camera)
    if z <= 0:
        raise BehindCameraError(f"point has non-positive depth z={z}")
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        return None
    return (u, v)


def unproject(u: float, v: float, depth: float, intr: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    return np.array([(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth])


def transform(pose: Pose, point) -> np.ndarray:
    return pose.rotation @ np.asarray(point, dtype=np.float64) + pose.translation


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply `pose` to an (N, 3) array of points."""
    return points @ pose.rotation.T + pose.translation


@lru_cache(maxsize=8)
def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z for every pixel center, shape (H, W, 3).

    Cached per intrinsics; the returned array is read-only.
    """
    vs, us = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = (us - intr.cx) / intr.fx
    rays[..., 1] = (vs - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    rays.flags.writeable = False
    return rays


def backproject_depth(depth: np.ndarray, intr: Intrinsics, mask: np.ndarray | None = None) -> np.ndarray:
    """Camera-frame points for pixels selected by `mask` (row-major order), shape (N, 3)."""
    rays = pixel_rays(intr)
    if mask is None:
        mask = depth > 0
    return rays[mask] * depth[mask][:, None]
