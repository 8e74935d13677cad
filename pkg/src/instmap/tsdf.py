"""Global truncated signed distance volume on a sparse voxel store."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .camera import Frame, pixel_rays
from .pointcloud import PointCloud
from .voxels import SparseVoxelMap, pack, unpack, voxel_centers

_NEIGHBORS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64
)


class GlobalTsdf:
    """Sparse TSDF with per-voxel running-average sdf and weight.

    Only voxels whose projective distance to an observed surface lies within
    the truncation band are ever stored or touched.
    """

    def __init__(self, voxel_length: float, truncation: Optional[float] = None):
        if voxel_length <= 0:
            raise ValueError("voxel_length must be positive")
        self.voxel_length = float(voxel_length)
        self.truncation = 4.0 * self.voxel_length if truncation is None else float(truncation)
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        self.store = SparseVoxelMap({"sdf": 0.0, "weight": 0.0})

    def __len__(self) -> int:
        return len(self.store)

    @property
    def sdf(self) -> np.ndarray:
        return self.store.channel("sdf")

    @property
    def weight(self) -> np.ndarray:
        return self.store.channel("weight")

    @property
    def keys(self) -> np.ndarray:
        return self.store.keys

    def values(self, keys: np.ndarray):
        """(sdf, weight) for `keys`; absent voxels report (nan, 0)."""
        slots = self.store.lookup(np.asarray(keys, dtype=np.int64))
        ok = slots >= 0
        sdf = np.full(slots.shape, np.nan)
        w = np.zeros(slots.shape)
        sdf[ok] = self.sdf[slots[ok]]
        w[ok] = self.weight[slots[ok]]
        return sdf, w

    def copy(self) -> "GlobalTsdf":
        other = GlobalTsdf(self.voxel_length, self.truncation)
        other.store = self.store.copy()
        return other


def _band_voxels(frame: Frame, voxel_length: float, truncation: float) -> np.ndarray:
    """Keys of voxels sampled along valid depth rays within the truncation band."""
    k = frame.intrinsics
    valid = frame.depth > 0
    if not np.any(valid):
        return np.empty(0, dtype=np.int64)
    rays = pixel_rays(k)[valid]  # (N, 3), unit z
    d = frame.depth[valid]
    step_z = voxel_length / np.linalg.norm(rays, axis=1)
    n = int(math.ceil(truncation / voxel_length))
    steps = np.arange(-n, n + 1, dtype=np.float64)
    z = d[:, None] + steps[None, :] * step_z[:, None]
    # sample in voxel units directly in the world frame
    dirs = rays @ (frame.pose.rotation.T / voxel_length)
    origin = frame.pose.translation / voxel_length
    pts = origin + dirs[:, None, :] * z[..., None]
    return np.unique(pack(np.floor(pts[z > 0]).astype(np.int64)))


def sample_depth(depth: np.ndarray, k, pts_cam: np.ndarray, max_spread: float):
    """Bilinearly interpolated depth at the projections of `pts_cam`.

    Returns (depth, valid). A sample is valid only if all four surrounding
    pixels hold depth and their spread is at most `max_spread`, which keeps
    interpolation from bridging occlusion boundaries.
    """
    z = pts_cam[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = k.fx * pts_cam[:, 0] / zs + k.cx
    v = k.fy * pts_cam[:, 1] / zs + k.cy
    ok &= (u >= 0) & (u <= k.width - 1) & (v >= 0) & (v <= k.height - 1)
    u = np.where(ok, u, 0.0)
    v = np.where(ok, v, 0.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), k.width - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), k.height - 2)
    fu = u - u0
    fv = v - v0
    d00 = depth[v0, u0]
    d01 = depth[v0, u0 + 1]
    d10 = depth[v0 + 1, u0]
    d11 = depth[v0 + 1, u0 + 1]
    lo = np.minimum(np.minimum(d00, d01), np.minimum(d10, d11))
    hi = np.maximum(np.maximum(d00, d01), np.maximum(d10, d11))
    ok &= (lo > 0) & (hi - lo <= max_spread)
    d = (1 - fv) * ((1 - fu) * d00 + fu * d01) + fv * ((1 - fu) * d10 + fu * d11)
    return d, ok


def integrate_global(tsdf: GlobalTsdf, frame: Frame) -> GlobalTsdf:
    """Fuse one depth frame into `tsdf` in place (and return it).

    Each candidate voxel center is projected into the depth image; its
    projective signed distance d(u, v) - z is averaged in with weight 1 when
    it lies within [-truncation, truncation].
    """
    k = frame.intrinsics
    if frame.depth.shape != k.shape:
        raise ValueError(f"depth shape {frame.depth.shape} does not match intrinsics {k.shape}")
    vl, tr = tsdf.voxel_length, tsdf.truncation
    cand = _band_voxels(frame, vl, tr)
    if cand.size == 0:
        return tsdf
    pc = frame.pose.to_camera(voxel_centers(unpack(cand), vl))
    d, ok = sample_depth(frame.depth, k, pc, tr)
    sdf_obs = d - pc[:, 2]
    ok &= np.abs(sdf_obs) <= tr
    if not np.any(ok):
        return tsdf
    slots = tsdf.store.upsert(cand[ok])
    sdf = tsdf.store.channel("sdf")
    w = tsdf.store.channel("weight")
    w_old = w[slots]
    sdf[slots] = (sdf[slots] * w_old + sdf_obs[ok]) / (w_old + 1.0)
    w[slots] = w_old + 1.0
    return tsdf


def zero_crossing_keys(tsdf: GlobalTsdf, max_jump: Optional[float] = None) -> np.ndarray:
    """Sorted keys of observed voxels whose sdf changes sign against a 6-neighbor.

    `max_jump` rejects neighbor pairs whose sdf difference exceeds it; such
    pairs straddle an occlusion boundary rather than a surface.
    """
    keys = tsdf.keys
    sdf = tsdf.sdf
    w = tsdf.weight
    observed = w > 0
    keys, sdf = keys[observed], sdf[observed]
    if keys.size == 0:
        return np.empty(0, dtype=np.int64)
    coords = unpack(keys)
    crossing = np.zeros(keys.size, dtype=bool)
    for off in _NEIGHBORS:
        nsdf, nw = tsdf.values(pack(coords + off))
        hit = (nw > 0) & ((sdf >= 0) != (nsdf >= 0))
        if max_jump is not None:
            hit &= np.abs(sdf - np.nan_to_num(nsdf)) <= max_jump
        crossing |= hit
    return np.sort(keys[crossing])


def extract_points(tsdf: GlobalTsdf, max_jump: Optional[float] = None) -> PointCloud:
    """One point per zero-crossing voxel, at the voxel center."""
    keys = zero_crossing_keys(tsdf, max_jump)
    return PointCloud(voxel_centers(unpack(keys), tsdf.voxel_length))
