"""Instance map maintenance: data association, instance creation, merging of
over-segmented instances and instance-geometry fusion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import Frame
from .detections import DetectionRecord
from .fusion import SUM, LikelihoodMatrix, NoEvidenceError, SemanticBelief, bayes_update, merge_beliefs
from .pointcloud import PointCloud
from .projection import (
    frame_surface_keys,
    integrate_instance,
    project_instance_mask,
    query_instance_mask,
)
from .voxels import InstanceVoxelGrid, contains, inflate_keys, point_keys

logger = logging.getLogger(__name__)

INTERSECTION = "intersection"
UNION = "union"


@dataclass
class Instance:
    id: int
    belief: SemanticBelief
    grid: InstanceVoxelGrid
    created_at: int = 0
    last_seen: int = 0

    @property
    def volume(self) -> int:
        return len(self.grid)


@dataclass
class InstanceMap:
    voxel_length: float
    n_classes: int
    instances: dict[int, Instance] = field(default_factory=dict)
    next_id: int = 1
    log: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return (self.instances[i] for i in sorted(self.instances))

    def __getitem__(self, id_: int) -> Instance:
        return self.instances[id_]

    def new_instance(self, t: int) -> Instance:
        inst = Instance(
            self.next_id, SemanticBelief.uniform(self.n_classes), InstanceVoxelGrid(self.voxel_length), t, t
        )
        self.instances[inst.id] = inst
        self.next_id += 1
        return inst

    def remove(self, id_: int) -> Instance:
        return self.instances.pop(id_)

    def write_log(self, path) -> None:
        with open(path, "a", encoding="utf-8") as f:
            for rec in self.log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class AssociationResult:
    matches: list[tuple[int, int, float]]  # (detection index, instance id, iou)
    unmatched_detections: list[int]
    unmatched_instances: list[int]


def visible_instances(
    imap: InstanceMap, frame: Frame, v_min: int = 50, mode: str = "query"
) -> list[tuple[int, np.ndarray]]:
    """Instances with at least `v_min` projected pixels, with their masks.

    `mode="query"` looks each valid depth pixel up in the instance grids;
    `mode="center"` rasterizes voxel centers.
    """
    out = []
    if not imap.instances:
        return out
    keys = frame_surface_keys(frame, imap.voxel_length) if mode == "query" else None
    for inst in imap:
        if mode == "query":
            mask = query_instance_mask(inst.grid, frame, keys)
        elif mode == "center":
            mask = project_instance_mask(inst.grid, frame)
        else:
            raise ValueError(f"unknown projection mode '{mode}'")
        if int(mask.sum()) >= v_min:
            out.append((inst.id, mask))
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def associate(
    detections: Sequence[DetectionRecord], visible: Sequence[tuple[int, np.ndarray]], tau: float
) -> AssociationResult:
    """Greedy one-to-one matching by descending mask IoU above `tau`."""
    pairs = []
    for k, det in enumerate(detections):
        for id_, r in visible:
            iou = mask_iou(det.mask, r)
            if iou > tau:
                pairs.append((-iou, k, id_))
    pairs.sort()
    used_d, used_i = set(), set()
    matches = []
    for neg_iou, k, id_ in pairs:
        if k in used_d or id_ in used_i:
            continue
        used_d.add(k)
        used_i.add(id_)
        matches.append((k, id_, -neg_iou))
    return AssociationResult(
        matches,
        [k for k in range(len(detections)) if k not in used_d],
        [id_ for id_, _ in visible if id_ not in used_i],
    )


def apply_frame(
    imap: InstanceMap,
    frame: Frame,
    detections: Sequence[DetectionRecord],
    result: AssociationResult,
    m: LikelihoodMatrix,
    mode: str = SUM,
) -> list[int]:
    """Integrate matched detections and spawn instances for unmatched ones.

    Returns the ids of created instances.
    """
    t = frame.index
    for k, id_, _ in result.matches:
        inst = imap[id_]
        integrate_instance(inst.grid, frame, detections[k].mask)
        inst.belief = bayes_update(inst.belief, detections[k], m, mode)
        inst.last_seen = t
    created = []
    for k in result.unmatched_detections:
        det = detections[k]
        if not det.mask.any():
            continue
        grid = integrate_instance(InstanceVoxelGrid(imap.voxel_length), frame, det.mask)
        if len(grid) == 0:
            continue
        inst = imap.new_instance(t)
        inst.grid = grid
        inst.belief = bayes_update(inst.belief, det, m, mode)
        created.append(inst.id)
    return created


def semantic_similarity(a: SemanticBelief, b: SemanticBelief) -> float:
    if a.frame_count < 1 or b.frame_count < 1:
        raise NoEvidenceError("semantic similarity needs fused beliefs on both sides")
    return float(np.dot(a.probs, b.probs))


def _overlap(inflated_a: np.ndarray, keys_b: np.ndarray, reading: str) -> float:
    hit = int(np.count_nonzero(contains(inflated_a, keys_b)))
    if reading == INTERSECTION:
        return hit / keys_b.size
    if reading == UNION:
        return (inflated_a.size + keys_b.size - hit) / keys_b.size
    raise ValueError(f"unknown overlap reading '{reading}'")


def volumetric_overlap(a: Instance, b: Instance, scale: float, reading: str = INTERSECTION) -> float:
    """Share of b's voxels covered by a's inflated grid (a must be the larger)."""
    if len(b.grid) == 0:
        raise ValueError("volumetric overlap against an empty instance")
    if len(a.grid) < len(b.grid):
        raise ValueError("the first instance must be the volumetrically larger one")
    return _overlap(inflate_keys(a.grid.keys, scale), b.grid.keys, reading)


def merge_into(imap: InstanceMap, a: Instance, b: Instance) -> None:
    a.grid.merge(b.grid)
    a.belief = merge_beliefs(a.belief, b.belief)
    a.created_at = min(a.created_at, b.created_at)
    a.last_seen = max(a.last_seen, b.last_seen)
    imap.remove(b.id)


def merge_pass(
    imap: InstanceMap,
    tau_sem: float = 0.2,
    tau_3d: float = 0.3,
    scale: float = 2.0,
    reading: str = INTERSECTION,
    frame: Optional[int] = None,
) -> list[dict]:
    """Merge over-segmented instances until no pair passes both gates.

    Candidates are visited larger-first (ties by id); whenever a smaller
    instance b passes similarity > tau_sem and overlap > tau_3d against a
    larger a, b is folded into a and the scan restarts.
    """
    events = []
    inflated: dict[int, np.ndarray] = {}
    bounds: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    while True:
        order = sorted(imap.instances.values(), key=lambda i: (-i.volume, i.id))
        for inst in order:
            if inst.id not in bounds and inst.volume:
                c = inst.grid.coords
                bounds[inst.id] = (c.min(axis=0), c.max(axis=0))
        pad = max(1, int(np.ceil(scale)))
        merged = None
        for ia, a in enumerate(order):
            if a.volume == 0 or a.belief.frame_count == 0:
                continue
            lo_a, hi_a = bounds[a.id]
            for b in order[ia + 1 :]:
                if b.volume == 0 or b.belief.frame_count == 0:
                    continue
                lo_b, hi_b = bounds[b.id]
                if np.any(lo_b > hi_a + pad) or np.any(hi_b < lo_a - pad):
                    continue
                sigma = semantic_similarity(a.belief, b.belief)
                if sigma <= tau_sem:
                    continue
                if a.id not in inflated:
                    inflated[a.id] = inflate_keys(a.grid.keys, scale)
                omega = _overlap(inflated[a.id], b.grid.keys, reading)
                if omega > tau_3d:
                    merged = (a, b, sigma, omega)
                    break
            if merged:
                break
        if merged is None:
            return events
        a, b, sigma, omega = merged
        merge_into(imap, a, b)
        for cache in (inflated, bounds):
            cache.pop(a.id, None)
            cache.pop(b.id, None)
        rec = {"event": "merge", "ids": [a.id, b.id], "sigma": sigma, "omega": omega, "frame": frame}
        events.append(rec)
        imap.log.append(rec)


def instance_geometry_fusion(imap: InstanceMap, cloud: PointCloud, frame: Optional[int] = None) -> list[int]:
    """Drop instance voxels that hold no surface point; delete emptied instances.

    Returns the ids of deleted instances.
    """
    surface = np.unique(point_keys(cloud.points, imap.voxel_length)) if len(cloud) else np.empty(0, np.int64)
    deleted = []
    for inst in list(imap):
        keep = contains(surface, inst.grid.keys)
        removed = int(keep.size - np.count_nonzero(keep))
        inst.grid.keep(keep)
        if removed:
            imap.log.append(
                {"event": "filter", "ids": [inst.id], "removed": removed, "frame": frame}
            )
        if len(inst.grid) == 0:
            imap.remove(inst.id)
            deleted.append(inst.id)
            logger.warning("instance %d has no voxel on the global surface; deleted", inst.id)
            imap.log.append({"event": "delete", "ids": [inst.id], "frame": frame})
    return deleted
