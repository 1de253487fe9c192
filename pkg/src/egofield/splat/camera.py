from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera coords.

    Camera axes: x right, y down, z forward. Pixel centres sit on integer
    coordinates, column first: pixel (row r, col c) is the point (c, r).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def ray_directions(self) -> np.ndarray:
        """World-space unit ray directions, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d = d @ self.rotation  # camera -> world (R^T d per row)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def as_array(self) -> np.ndarray:
        """Flat f64 encoding: fx fy cx cy w h R(9) t(3)."""
        return np.concatenate(
            [[self.fx, self.fy, self.cx, self.cy, self.width, self.height], self.rotation.ravel(), self.translation]
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Camera":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(
            float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]),
            int(arr[4]), int(arr[5]), arr[6:15].reshape(3, 3), arr[15:18],
        )


def look_at(eye, target, width: int, height: int, fov_deg: float, up=(0.0, -1.0, 0.0)) -> Camera:
    """Camera at ``eye`` looking at ``target``; ``up`` is the world direction shown upward."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(
        fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height, rotation=rot, translation=-rot @ eye,
    )
