"""Semantic-instance average precision on 3D point sets and the Cluster-All baseline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from .voxels import point_keys


@dataclass
class InstancePrediction:
    points: np.ndarray
    cls: int
    confidence: float = 1.0
    id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("an instance prediction needs at least one point")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass
class GroundTruthInstance:
    points: np.ndarray
    cls: int
    id: int


def instance_iou_3d(pred_points, gt_points, cell: float) -> float:
    """IoU of the voxel sets occupied by two point sets at resolution `cell`."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    a = np.unique(point_keys(np.asarray(pred_points).reshape(-1, 3), cell))
    b = np.unique(point_keys(np.asarray(gt_points).reshape(-1, 3), cell))
    union = np.union1d(a, b).size
    if union == 0:
        return 0.0
    return np.intersect1d(a, b, assume_unique=True).size / union


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / n_gt
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class APResult:
    per_class: dict[int, float]  # class index -> AP in percent
    mean: float  # mAP in percent over classes with ground truth
    iou_threshold: float


def evaluate_ap(
    preds: Sequence[InstancePrediction],
    gt: Sequence[GroundTruthInstance],
    iou_threshold: float = 0.5,
    cell: float = 0.015,
) -> APResult:
    """Per-class AP with greedy confidence-ordered matching.

    Predictions are ranked by confidence, ties by id. Each is matched to the
    unmatched same-class ground-truth instance of highest IoU if that IoU
    reaches the threshold; otherwise it is a false positive.
    """
    classes = sorted({g.cls for g in gt})
    per_class = {}
    for c in classes:
        gts = [g for g in gt if g.cls == c]
        ps = sorted((p for p in preds if p.cls == c), key=lambda p: (-p.confidence, p.id))
        taken = np.zeros(len(gts), dtype=bool)
        tp = []
        for p in ps:
            ious = np.array([instance_iou_3d(p.points, g.points, cell) for g in gts])
            ious[taken] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= iou_threshold:
                taken[j] = True
                tp.append(True)
            else:
                tp.append(False)
        per_class[c] = 100.0 * average_precision(tp, len(gts))
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, mean, iou_threshold)


def evaluate_multi(preds, gt, thresholds=(0.5,), cell: float = 0.015) -> dict[float, APResult]:
    return {thr: evaluate_ap(preds, gt, thr, cell) for thr in thresholds}


def cluster_all(points, classes, radius: float) -> list[InstancePrediction]:
    """Connected components of same-class points closer than `radius`."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    classes = np.asarray(classes)
    out = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        tree = cKDTree(points[idx])
        pairs = tree.query_pairs(radius, output_type="ndarray")
        n = idx.size
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        for lab in range(labels.max() + 1):
            members = idx[labels == lab]
            out.append(InstancePrediction(points[members], int(c), 1.0, id=len(out)))
    return out


def load_gt_points(path) -> list[GroundTruthInstance]:
    """Read `x y z class_id instance_id` rows into per-instance point sets."""
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return []
    if data.shape[1] != 5:
        raise ValueError(f"{path}: expected 5 columns, got {data.shape[1]}")
    out = []
    inst_ids = data[:, 4].astype(np.int64)
    for iid in np.unique(inst_ids):
        rows = data[inst_ids == iid]
        cls = np.unique(rows[:, 3].astype(np.int64))
        if cls.size != 1:
            raise ValueError(f"{path}: instance {iid} carries several classes")
        out.append(GroundTruthInstance(rows[:, :3], int(cls[0]), int(iid)))
    return out


def save_gt_points(path, instances: Sequence[GroundTruthInstance]) -> None:
    rows = [
        np.column_stack([g.points, np.full(len(g.points), g.cls), np.full(len(g.points), g.id)])
        for g in instances
    ]
    data = np.vstack(rows) if rows else np.zeros((0, 5))
    with open(Path(path), "w") as f:
        for x, y, z, c, i in data:
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {int(c)} {int(i)}\n")


def format_ap_table(results: dict[float, APResult], class_names: Sequence[str]) -> str:
    thresholds = sorted(results)
    head = f"{'class':<18}" + "".join(f"{'AP' + format(int(round(t * 100))):>8}" for t in thresholds)
    lines = [head]
    classes = sorted(results[thresholds[0]].per_class)
    for c in classes:
        name = class_names[c] if c < len(class_names) else str(c)
        lines.append(f"{name:<18}" + "".join(f"{results[t].per_class[c]:8.1f}" for t in thresholds))
    lines.append(f"{'mean':<18}" + "".join(f"{results[t].mean:8.1f}" for t in thresholds))
    return "\n".join(lines)
