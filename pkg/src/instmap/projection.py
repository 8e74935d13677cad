"""Instance voxel grids against camera frames: integration and 2D masks."""

from __future__ import annotations

import numpy as np

from .camera import Frame, backproject, project_points
from .voxels import InstanceVoxelGrid, contains, point_keys


def _check_mask(frame: Frame, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != frame.depth.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth {frame.depth.shape}")
    return mask


def surface_keys(frame: Frame, mask=None, voxel_length: float = 0.015) -> np.ndarray:
    """Voxel keys hit by the back-projected depth of (masked) pixels, one per pixel."""
    pts = frame.pose.to_world(backproject(frame.depth, frame.intrinsics, mask))
    return point_keys(pts, voxel_length)


def integrate_instance(grid: InstanceVoxelGrid, frame: Frame, mask) -> InstanceVoxelGrid:
    """Raycast the masked depth into `grid` (in place).

    Every voxel containing an observed surface point of a masked pixel gains
    weight 1 for this frame, however many pixels land in it.
    """
    mask = _check_mask(frame, mask)
    keys = np.unique(surface_keys(frame, mask, grid.voxel_length))
    grid.add(keys)
    return grid


def project_instance_mask(grid: InstanceVoxelGrid, frame: Frame) -> np.ndarray:
    """Pixels hit by at least one occupied voxel center in front of the camera."""
    k = frame.intrinsics
    out = np.zeros(k.shape, dtype=bool)
    if len(grid) == 0:
        return out
    pc = frame.pose.to_camera(grid.centers())
    rows, cols, ok = project_points(pc, k)
    out[rows[ok], cols[ok]] = True
    return out


def query_instance_mask(grid: InstanceVoxelGrid, frame: Frame, keys=None) -> np.ndarray:
    """Pixels whose observed surface point falls inside an occupied voxel.

    This is the depth-image-to-voxel query: it is dense at any voxel size
    and occlusion-aware, unlike center projection. `keys` may carry the
    precomputed per-pixel surface keys of the frame (from `frame_surface_keys`).
    """
    if keys is None:
        keys = frame_surface_keys(frame, grid.voxel_length)
    out = np.zeros(frame.depth.shape, dtype=bool)
    if len(grid) == 0:
        return out
    valid = keys >= 0
    hit = np.zeros(keys.shape, dtype=bool)
    hit[valid] = contains(grid.keys, keys[valid])
    out[:] = hit
    return out


def frame_surface_keys(frame: Frame, voxel_length: float) -> np.ndarray:
    """(H, W) array of surface voxel keys; -1 where depth is invalid."""
    out = np.full(frame.depth.shape, -1, dtype=np.int64)
    valid = frame.depth > 0
    out[valid] = surface_keys(frame, None, voxel_length)
    return out
