"""Sparse voxel storage keyed by packed integer coordinates.

Voxel (i, j, k) covers [i, i+1) x [j, j+1) x [k, k+1) in units of the voxel
length, in the world frame. Coordinates are packed into one int64 so that
sets of voxels are plain sorted integer arrays and set algebra is numpy.
"""

from __future__ import annotations

import math

import numpy as np

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def pack(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if np.any(c < 0) or np.any(c > _MASK):
        raise ValueError("voxel coordinate out of packable range")
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    out = np.empty((k.size, 3), dtype=np.int64)
    out[:, 0] = (k >> (2 * _BITS)) & _MASK
    out[:, 1] = (k >> _BITS) & _MASK
    out[:, 2] = k & _MASK
    return out - _OFFSET


def voxel_coords(points: np.ndarray, voxel_length: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_length).astype(np.int64)


def voxel_centers(coords: np.ndarray, voxel_length: float) -> np.ndarray:
    return (np.asarray(coords, dtype=np.float64) + 0.5) * voxel_length


def point_keys(points: np.ndarray, voxel_length: float) -> np.ndarray:
    return pack(voxel_coords(points, voxel_length))


def sorted_lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Positions of `query` in `sorted_keys`, -1 where absent."""
    if sorted_keys.size == 0:
        return np.full(np.shape(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    found = sorted_keys[pos_c] == query
    return np.where(found, pos_c, -1)


def contains(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    return sorted_lookup(sorted_keys, query) >= 0


class SparseVoxelMap:
    """Hash-map-like store of per-voxel float channels.

    Values live in append-only slot arrays; a sorted key index maps keys to
    slots. Inserting n new keys costs one O(N) merge of the index.
    """

    def __init__(self, channels: dict[str, float]):
        self._defaults = dict(channels)
        self._size = 0
        self._slot_keys = np.empty(0, dtype=np.int64)
        self._data = {name: np.empty(0, dtype=np.float64) for name in channels}
        self._sorted_keys = np.empty(0, dtype=np.int64)
        self._sorted_slots = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._size

    def _grow(self, need: int) -> None:
        cap = self._slot_keys.size
        if need <= cap:
            return
        new_cap = max(need, 2 * cap, 1024)
        self._slot_keys = np.resize(self._slot_keys, new_cap)
        for name in self._data:
            self._data[name] = np.resize(self._data[name], new_cap)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Slot indices for `keys`, -1 where absent."""
        pos = sorted_lookup(self._sorted_keys, keys)
        if self._sorted_slots.size == 0:
            return pos
        return np.where(pos >= 0, self._sorted_slots[np.maximum(pos, 0)], -1)

    def upsert(self, keys: np.ndarray) -> np.ndarray:
        """Slot indices for unique `keys`, creating default-valued slots as needed."""
        keys = np.asarray(keys, dtype=np.int64)
        slots = self.lookup(keys)
        missing = slots < 0
        if np.any(missing):
            new_keys = keys[missing]
            n_new = new_keys.size
            start = self._size
            self._grow(start + n_new)
            new_slots = np.arange(start, start + n_new, dtype=np.int64)
            self._slot_keys[start : start + n_new] = new_keys
            for name, default in self._defaults.items():
                self._data[name][start : start + n_new] = default
            self._size += n_new
            order = np.argsort(new_keys, kind="stable")
            ins = np.searchsorted(self._sorted_keys, new_keys[order])
            self._sorted_keys = np.insert(self._sorted_keys, ins, new_keys[order])
            self._sorted_slots = np.insert(self._sorted_slots, ins, new_slots[order])
            slots[missing] = new_slots
        return slots

    def channel(self, name: str) -> np.ndarray:
        """Live view of one channel over all slots."""
        return self._data[name][: self._size]

    @property
    def keys(self) -> np.ndarray:
        """Slot-ordered keys (aligned with `channel`)."""
        return self._slot_keys[: self._size]

    @property
    def sorted_keys(self) -> np.ndarray:
        return self._sorted_keys

    def copy(self) -> "SparseVoxelMap":
        other = SparseVoxelMap(self._defaults)
        other._size = self._size
        other._slot_keys = self._slot_keys.copy()
        other._data = {k: v.copy() for k, v in self._data.items()}
        other._sorted_keys = self._sorted_keys.copy()
        other._sorted_slots = self._sorted_slots.copy()
        return other


class InstanceVoxelGrid:
    """Occupied voxels of one instance with per-voxel observation weights.

    Keys are kept sorted and unique.
    """

    def __init__(self, voxel_length: float, keys=None, weights=None):
        if voxel_length <= 0:
            raise ValueError("voxel_length must be positive")
        self.voxel_length = float(voxel_length)
        if keys is None:
            self.keys = np.empty(0, dtype=np.int64)
            self.weights = np.empty(0, dtype=np.float64)
        else:
            keys = np.asarray(keys, dtype=np.int64)
            w = np.ones(keys.size) if weights is None else np.asarray(weights, dtype=np.float64)
            uk, inv = np.unique(keys, return_inverse=True)
            self.keys = uk
            self.weights = np.bincount(inv, weights=w, minlength=uk.size)

    def __len__(self) -> int:
        return int(self.keys.size)

    def copy(self) -> "InstanceVoxelGrid":
        g = InstanceVoxelGrid(self.voxel_length)
        g.keys = self.keys.copy()
        g.weights = self.weights.copy()
        return g

    @property
    def coords(self) -> np.ndarray:
        return unpack(self.keys)

    def centers(self) -> np.ndarray:
        return voxel_centers(self.coords, self.voxel_length)

    def add(self, keys: np.ndarray, weights=None) -> None:
        """Accumulate weight on `keys` (duplicates summed)."""
        keys = np.asarray(keys, dtype=np.int64)
        if keys.size == 0:
            return
        w = np.ones(keys.size) if weights is None else np.asarray(weights, dtype=np.float64)
        all_keys = np.concatenate([self.keys, keys])
        all_w = np.concatenate([self.weights, w])
        uk, inv = np.unique(all_keys, return_inverse=True)
        self.keys = uk
        self.weights = np.bincount(inv, weights=all_w, minlength=uk.size)

    def merge(self, other: "InstanceVoxelGrid") -> None:
        if other.voxel_length != self.voxel_length:
            raise ValueError("cannot merge grids with different voxel lengths")
        self.add(other.keys, other.weights)

    def keep(self, mask: np.ndarray) -> None:
        self.keys = self.keys[mask]
        self.weights = self.weights[mask]


def inflation_radius(scale: float) -> int:
    """Half-width in voxels of the block covered by a cube of side scale*voxel.

    A neighbor voxel counts as covered when its center lies inside the scaled
    cube, so scale in (1, 3) gives radius 0 or 1 and scale 3 gives 1.
    """
    if not scale > 1:
        raise ValueError(f"inflation scale must be > 1, got {scale}")
    return int(math.floor(scale / 2 + 1e-9))


def inflate_keys(keys: np.ndarray, scale: float) -> np.ndarray:
    r = inflation_radius(scale)
    keys = np.unique(np.asarray(keys, dtype=np.int64))
    if r == 0 or keys.size == 0:
        return keys
    rng = np.arange(-r, r + 1)
    offsets = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    coords = unpack(keys)
    grown = (coords[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    return np.unique(pack(grown))


def inflate(grid: InstanceVoxelGrid, scale: float) -> np.ndarray:
    """Sorted keys of the inflated occupancy set."""
    return inflate_keys(grid.keys, scale)
