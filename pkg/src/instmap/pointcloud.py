"""Point clouds and binary little-endian PLY export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

NO_INSTANCE = 0
NO_CLASS = 0xFFFF

PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("instance_id", "<u4"),
        ("class_id", "<u2"),
    ]
)

_PLY_TYPES = {"f4": "float", "u1": "uchar", "u4": "uint", "u2": "ushort"}


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None
    class_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        n = len(self.points)
        for name in ("colors", "instance_ids", "class_ids"):
            val = getattr(self, name)
            if val is not None and len(val) != n:
                raise ValueError(f"{name} has {len(val)} entries for {n} points")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def write_ply(path, cloud: PointCloud) -> None:
    n = len(cloud)
    rec = np.zeros(n, dtype=PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    if cloud.colors is not None:
        c = np.asarray(cloud.colors, dtype=np.uint8)
        rec["red"], rec["green"], rec["blue"] = c[:, 0], c[:, 1], c[:, 2]
    rec["instance_id"] = NO_INSTANCE if cloud.instance_ids is None else cloud.instance_ids
    rec["class_id"] = NO_CLASS if cloud.class_ids is None else cloud.class_ids
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name in PLY_DTYPE.names:
        header.append(f"property {_PLY_TYPES[PLY_DTYPE[name].str[1:]]} {name}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    """Read a PLY written by `write_ply`."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "binary_little_endian" not in header[1]:
        raise ValueError(f"{path}: not a binary little-endian PLY")
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    props = [line.split()[2] for line in header if line.startswith("property")]
    if tuple(props) != PLY_DTYPE.names:
        raise ValueError(f"{path}: unexpected vertex properties {props}")
    rec = np.frombuffer(data, dtype=PLY_DTYPE, count=n, offset=end)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return PointCloud(pts, colors, rec["instance_id"].copy(), rec["class_id"].copy())
