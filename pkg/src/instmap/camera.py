"""Pinhole camera model, poses, RGB-D frames and their on-disk formats."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

DEPTH_SCALE = 1000.0  # millimeters per meter in 16-bit depth PNGs


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        vals = Path(path).read_text().split()
        if len(vals) != 6:
            raise ValueError(f"{path}: expected 'fx fy cx cy width height', got {len(vals)} values")
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        return cls(fx, fy, cx, cy, int(float(vals[4])), int(float(vals[5])))

    def save(self, path) -> None:
        Path(path).write_text(
            f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at `eye` looking at `target` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation

    @classmethod
    def load(cls, path) -> "Pose":
        m = np.loadtxt(path, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"{path}: expected a 4x4 matrix, got shape {m.shape}")
        return cls.from_matrix(m)

    def save(self, path) -> None:
        np.savetxt(path, self.matrix, fmt="%.17g")


@dataclass
class Frame:
    index: int
    depth: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"frame index must be nonnegative, got {self.index}")
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape:
            raise ValueError(
                f"frame {self.index}: depth shape {self.depth.shape} does not match "
                f"intrinsics {self.intrinsics.shape}"
            )
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError(f"frame {self.index}: depth must be finite and nonnegative")


def project_point(p, k: CameraIntrinsics):
    """Project a camera-frame point; returns (u, v) or None when out of view.

    Pixel centers sit at integer coordinates, so (u, v) is in view when it
    rounds to a valid pixel.
    """
    x, y, z = (float(c) for c in p)
    if z <= 0:
        return None
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    if not (-0.5 <= u < k.width - 0.5 and -0.5 <= v < k.height - 0.5):
        return None
    return (u, v)


def project_points(pts: np.ndarray, k: CameraIntrinsics):
    """Vectorized projection to integer pixels.

    Returns (rows, cols, valid) where invalid entries have z <= 0 or fall
    outside the image.
    """
    z = pts[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    u = np.floor(k.fx * pts[:, 0] / zs + k.cx + 0.5)
    v = np.floor(k.fy * pts[:, 1] / zs + k.cy + 0.5)
    valid &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    cols = np.where(valid, u, 0).astype(np.int64)
    rows = np.where(valid, v, 0).astype(np.int64)
    return rows, cols, valid


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape (H, W, 3)."""
    v, u = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def backproject(depth: np.ndarray, k: CameraIntrinsics, mask: Optional[np.ndarray] = None):
    """Camera-frame points of valid (and masked) depth pixels, shape (N, 3)."""
    sel = depth > 0
    if mask is not None:
        sel &= mask
    rows, cols = np.nonzero(sel)
    z = depth[rows, cols]
    x = (cols - k.cx) / k.fx * z
    y = (rows - k.cy) / k.fy * z
    return np.stack([x, y, z], axis=1)


def read_depth_png(path) -> np.ndarray:
    """16-bit millimeter PNG to float meters."""
    img = np.asarray(Image.open(path))
    if img.dtype != np.uint16:
        img = img.astype(np.uint16)
    return img.astype(np.float64) / DEPTH_SCALE


def write_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)
