"""Synthetic box scenes, analytic RGB-D rendering and a simulated open-set detector.

The simulated detector follows the tag-then-detect structure of a
tagging model feeding an open-vocabulary detector: each visible object draws
an open-set label from a planted label model; the frame's raw tags are the
drawn labels (minus tags the tagger misses); the detector can only emit
labels present in the (possibly augmented) prompt.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, Frame, Pose, backproject, pixel_rays, write_depth_png
from .detections import (
    DetectionFrame,
    DetectionRecord,
    LabelMeasurement,
    LabelSpace,
    PromptState,
    detection_path,
    mask_bbox,
    record_frame_labels,
    serialize_detection_frame,
)
from .evaluation import GroundTruthInstance, save_gt_points
from .fusion import AnnotatedFrame, AnnotatedInstance, default_hard_association
from .voxels import point_keys

logger = logging.getLogger(__name__)


class InfeasibleSceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    cls: int
    id: int

    def intersects(self, other: "Box", gap: float = 0.0) -> bool:
        return all(
            self.lo[i] - gap < other.hi[i] and other.lo[i] - gap < self.hi[i] for i in range(3)
        )

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2


@dataclass
class GroundTruthScene:
    objects: list[Box]
    shell_lo: tuple[float, float, float] = (-3.5, -3.5, 0.0)
    shell_hi: tuple[float, float, float] = (3.5, 3.5, 3.0)


def generate_scene(
    count: int,
    classes: Sequence[int],
    seed: int = 0,
    area_radius: float = 1.4,
    size_range: tuple[float, float] = (0.45, 0.9),
    height_range: tuple[float, float] = (0.4, 1.1),
    min_gap: float = 0.25,
    max_tries: int = 2000,
) -> GroundTruthScene:
    """Place `count` floor-standing boxes without overlap around the origin.

    `classes` gives the class of every object when it has `count` entries,
    otherwise classes are drawn from it.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.default_rng(seed)
    if len(classes) == count:
        cls_list = [int(c) for c in classes]
    else:
        cls_list = [int(c) for c in rng.choice(np.asarray(classes), size=count)]
    objects: list[Box] = []
    tries = 0
    while len(objects) < count:
        tries += 1
        if tries > max_tries:
            raise InfeasibleSceneError(f"could not place {count} boxes after {max_tries} tries")
        sx, sy = rng.uniform(*size_range, size=2)
        sz = rng.uniform(*height_range)
        r = area_radius * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(a), r * np.sin(a)
        if np.hypot(abs(cx) + sx / 2, abs(cy) + sy / 2) > area_radius + 0.5:
            continue
        box = Box(
            (cx - sx / 2, cy - sy / 2, 0.0),
            (cx + sx / 2, cy + sy / 2, sz),
            cls_list[len(objects)],
            len(objects) + 1,
        )
        if any(box.intersects(o, min_gap) for o in objects):
            continue
        objects.append(box)
    return GroundTruthScene(objects)


def orbit_trajectory(
    n_frames: int,
    radius: float = 2.7,
    height: float = 1.7,
    target=(0.0, 0.0, 0.35),
    turns: float = 1.0,
    phase: float = 0.0,
) -> list[Pose]:
    angles = phase + np.linspace(0, 2 * np.pi * turns, n_frames, endpoint=False)
    return [
        Pose.look_at((radius * np.cos(a), radius * np.sin(a), height), target) for a in angles
    ]


def render(scene: GroundTruthScene, pose: Pose, k: CameraIntrinsics):
    """Analytic depth and object-id images for one camera pose.

    Returns (depth, ids) where ids holds Box.id of the visible object, 0 on
    the room shell.
    """
    d = pixel_rays(k).reshape(-1, 3) @ pose.rotation.T
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    inv = 1.0 / d
    o = pose.translation

    t1 = (np.asarray(scene.shell_lo) - o) * inv
    t2 = (np.asarray(scene.shell_hi) - o) * inv
    depth = np.maximum(t1, t2).min(axis=1)
    ids = np.zeros(depth.shape, dtype=np.int32)
    for box in scene.objects:
        t1 = (np.asarray(box.lo) - o) * inv
        t2 = (np.asarray(box.hi) - o) * inv
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tnear <= tfar) & (tnear > 0) & (tnear < depth)
        depth[hit] = tnear[hit]
        ids[hit] = box.id
    # camera-frame z equals the ray parameter because rays have unit z
    return depth.reshape(k.shape), ids.reshape(k.shape)


# --------------------------------------------------------------------------
# planted label model and detector simulation


@dataclass
class LabelModel:
    """probs[c, o]: chance that an object of class c is measured as label o."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        sums = self.probs.sum(axis=1)
        if np.any(self.probs < 0) or np.any((sums > 0) & (np.abs(sums - 1) > 1e-9)):
            raise ValueError("label model rows must be distributions")

    def sample(self, cls: int, rng: np.random.Generator, u: Optional[float] = None) -> int:
        cdf = np.cumsum(self.probs[cls])
        if cdf[-1] <= 0:
            raise ValueError(f"class {cls} has no label distribution")
        u = rng.uniform() if u is None else u
        return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), cdf.size - 1))


def canonical_labels(space: LabelSpace) -> dict[int, int]:
    """Class -> the open label a clean detector would report for it."""
    assoc = default_hard_association(space) if _has_default_labels(space) else {}
    out = {}
    for c, name in enumerate(space.closed_set):
        o = space.open_index(name)
        if o is None:
            o = next((o for o, cc in sorted(assoc.items()) if cc == c), None)
        if o is not None:
            out[c] = o
    return out


def _has_default_labels(space: LabelSpace) -> bool:
    try:
        default_hard_association(space)
    except ValueError:
        return False
    return True


def label_model(space: LabelSpace, confusion: dict[int, dict[int, float]]) -> LabelModel:
    """Build a label model from {class: {open label: probability}} rows."""
    probs = np.zeros((space.n_closed, space.n_open))
    for c, row in confusion.items():
        for o, p in row.items():
            probs[c, o] = p
    return LabelModel(probs)


def noisy_label_model(
    space: LabelSpace, noise: float, confusers: dict[int, Sequence[int]], classes: Iterable[int] = None
) -> LabelModel:
    """Canonical label with 1 - noise, the rest spread evenly over confusers."""
    canon = canonical_labels(space)
    rows = {}
    for c in classes if classes is not None else canon:
        conf = list(confusers.get(c, ()))
        row = {canon[c]: 1.0 - noise if conf else 1.0}
        for o in conf:
            row[o] = row.get(o, 0.0) + noise / len(conf)
        rows[c] = row
    return label_model(space, rows)


_CONFUSERS = {
    "cabinet": ("door", "shelf"),
    "chair": ("sofa", "stool"),
    "table": ("desk", "counter"),
    "sofa": ("chair", "bed"),
    "bed": ("sofa",),
    "door": ("cabinet",),
    "bookshelf": ("cabinet",),
    "desk": ("table",),
    "counter": ("table", "cabinet"),
    "refrigerator": ("cabinet",),
    "sink": ("toilet",),
    "toilet": ("sink",),
    "picture": ("window",),
    "window": ("picture",),
    "curtain": ("window",),
    "otherfurniture": ("table", "cabinet"),
}


def default_confusers(space: LabelSpace) -> dict[int, list[int]]:
    """Plausible look-alike labels per class, restricted to the label space."""
    out = {}
    for name, labels in _CONFUSERS.items():
        c = space.closed_index(name)
        if c is None:
            continue
        out[c] = [o for o in (space.open_index(lb) for lb in labels) if o is not None]
    return out


@dataclass
class Corruption:
    """Detector imperfections applied by the simulator."""

    score_range: tuple[float, float] = (0.4, 0.9)
    second_label_prob: float = 0.0
    mask_erode: int = 0
    mask_dilate: int = 0
    split_prob: float = 0.0
    missed_tag_prob: float = 0.0
    missed_classes: frozenset = frozenset()
    dropout_prob: float = 0.0
    min_mask_pixels: int = 150


@dataclass
class _ObjectDraw:
    label: int
    u_miss: float
    u_drop: float
    score: float
    u_split: float
    split_angle: float
    u_second: float
    u_second_label: float
    second_score_factor: float


def _draw(model: LabelModel, cls: int, corr: Corruption, rng: np.random.Generator) -> _ObjectDraw:
    # a fixed number of draws per object keeps runs comparable across prompt settings
    u = rng.uniform(size=9)
    lo, hi = corr.score_range
    return _ObjectDraw(
        label=model.sample(cls, rng, u[0]),
        u_miss=u[1],
        u_drop=u[2],
        score=lo + (hi - lo) * u[3],
        u_split=u[4],
        split_angle=np.pi * u[5],
        u_second=u[6],
        u_second_label=u[7],
        second_score_factor=0.3 + 0.6 * u[8],
    )


def simulate_labels(
    objects: Sequence[tuple[int, int]],
    model: LabelModel,
    corr: Corruption,
    rng: np.random.Generator,
    extra_labels: Iterable[int] = (),
):
    """Tagging and labeling for visible (object id, class) pairs.

    Returns (raw_tags, prompt, per-object measurement lists, draws). An
    object whose drawn label is missing from the prompt falls back to the
    most likely of its model labels that is in the prompt, or is missed.
    """
    draws = [_draw(model, c, corr, rng) for _, c in objects]
    raw_tags: set[int] = set()
    for (_, c), dr in zip(objects, draws):
        missed = c in corr.missed_classes and dr.u_miss < corr.missed_tag_prob
        if not missed:
            raw_tags.add(dr.label)
    prompt = raw_tags | set(extra_labels)
    measurements = []
    for (_, c), dr in zip(objects, draws):
        if dr.u_drop < corr.dropout_prob:
            measurements.append(None)
            continue
        label = dr.label
        if label not in prompt:
            support = [o for o in sorted(prompt) if model.probs[c, o] > 0]
            if not support:
                measurements.append(None)
                continue
            label = max(support, key=lambda o: (model.probs[c, o], -o))
        meas = [LabelMeasurement(label, float(dr.score))]
        if dr.u_second < corr.second_label_prob:
            others = [o for o in sorted(prompt) if o != label]
            if others:
                o2 = others[int(dr.u_second_label * len(others)) % len(others)]
                meas.append(LabelMeasurement(o2, float(dr.score * dr.second_score_factor)))
        measurements.append(meas)
    return raw_tags, prompt, measurements, draws


def _split_mask(mask: np.ndarray, angle: float):
    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean(), cols.mean()
    side = (cols - cx) * np.cos(angle) + (rows - cy) * np.sin(angle) > 0
    a = np.zeros_like(mask)
    b = np.zeros_like(mask)
    a[rows[side], cols[side]] = True
    b[rows[~side], cols[~side]] = True
    return a, b


def _corrupt_mask(mask: np.ndarray, corr: Corruption) -> np.ndarray:
    if corr.mask_erode:
        mask = ndimage.binary_erosion(mask, iterations=corr.mask_erode)
    if corr.mask_dilate:
        mask = ndimage.binary_dilation(mask, iterations=corr.mask_dilate)
    return mask


@dataclass
class SimulatedDetections:
    frame: DetectionFrame
    raw_tags: set[int]
    object_ids: list[int]  # source object of each detection


class SyntheticDetector:
    """Simulated tag-then-detect model over rendered object-id images."""

    def __init__(self, scene: GroundTruthScene, model: LabelModel, corr: Corruption, seed: int = 0):
        self.scene = scene
        self.model = model
        self.corr = corr
        self.seed = seed
        self._cls = {b.id: b.cls for b in scene.objects}

    def detect(self, t: int, ids: np.ndarray, extra_labels: Iterable[int] = ()) -> SimulatedDetections:
        rng = np.random.default_rng([self.seed, t])
        corr = self.corr
        visible = []
        for oid in sorted(self._cls):
            gt = ids == oid
            if np.count_nonzero(gt) >= corr.min_mask_pixels:
                visible.append((oid, gt))
        raw, prompt, meas, draws = simulate_labels(
            [(oid, self._cls[oid]) for oid, _ in visible], self.model, corr, rng, extra_labels
        )
        dets, owners = [], []
        for (oid, gt), m, dr in zip(visible, meas, draws):
            if m is None:
                continue
            mask = _corrupt_mask(gt, corr)
            parts = [mask]
            if dr.u_split < corr.split_prob:
                a, b = _split_mask(mask, dr.split_angle)
                if min(a.sum(), b.sum()) >= corr.min_mask_pixels // 2:
                    parts = [a, b]
            for part in parts:
                if not part.any():
                    continue
                dets.append(DetectionRecord(list(m), part, mask_bbox(part), frozenset(prompt)))
                owners.append(oid)
        return SimulatedDetections(DetectionFrame(t, frozenset(prompt), dets), raw, owners)


# --------------------------------------------------------------------------
# sequences


@dataclass
class SyntheticSequence:
    scene: GroundTruthScene
    intrinsics: CameraIntrinsics
    frames: list[Frame]
    ids: list[np.ndarray]
    detections: dict[int, SimulatedDetections] = field(default_factory=dict)
    stride: int = 10

    def ground_truth(self, cell: float) -> list[GroundTruthInstance]:
        return ground_truth_points(self, cell)


def render_sequence(
    scene: GroundTruthScene,
    trajectory: Sequence[Pose],
    k: CameraIntrinsics,
    model: Optional[LabelModel] = None,
    corr: Optional[Corruption] = None,
    stride: int = 10,
    seed: int = 0,
    prompt_window: int = 0,
) -> SyntheticSequence:
    """Render every pose and simulate detections on every `stride`-th frame.

    With `prompt_window` > 0 the simulated detector receives prompts
    augmented with labels measured in the previous detection frames.
    """
    frames, ids = [], []
    for t, pose in enumerate(trajectory):
        depth, id_img = render(scene, pose, k)
        frames.append(Frame(t, depth, pose, k))
        ids.append(id_img)
    seq = SyntheticSequence(scene, k, frames, ids, stride=stride)
    if model is None:
        return seq
    corr = corr or Corruption()
    det = SyntheticDetector(scene, model, corr, seed)
    state = PromptState(prompt_window)
    for t in range(0, len(frames), stride):
        extra = state.recent_labels() if prompt_window > 0 else set()
        sim = det.detect(t, ids[t], extra)
        record_frame_labels(state, sim.frame.detections)
        seq.detections[t] = sim
    return seq


def ground_truth_points(seq: SyntheticSequence, cell: float) -> list[GroundTruthInstance]:
    """Observed surface points of every object, one per `cell` voxel."""
    pts = {b.id: [] for b in seq.scene.objects}
    for fr, id_img in zip(seq.frames, seq.ids):
        for oid in np.unique(id_img):
            if oid == 0:
                continue
            p = fr.pose.to_world(backproject(fr.depth, fr.intrinsics, id_img == oid))
            pts[int(oid)].append(p)
    out = []
    for b in seq.scene.objects:
        if not pts[b.id]:
            continue
        p = np.vstack(pts[b.id])
        _, first = np.unique(point_keys(p, cell), return_index=True)
        out.append(GroundTruthInstance(p[np.sort(first)], b.cls, b.id))
    return out


def write_sequence(seq: SyntheticSequence, root, space: LabelSpace, cell: float) -> Path:
    """Lay a synthetic sequence out in the on-disk input format."""
    root = Path(root)
    for sub in ("depth", "pose", "prediction"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    seq.intrinsics.save(root / "intrinsic.txt")
    for fr in seq.frames:
        write_depth_png(root / "depth" / f"frame-{fr.index:06d}.png", fr.depth)
        fr.pose.save(root / "pose" / f"frame-{fr.index:06d}.txt")
    for t, sim in sorted(seq.detections.items()):
        payload = serialize_detection_frame(t, sim.frame.prompt, sim.frame.detections, space)
        detection_path(root, t).write_text(json.dumps(payload), encoding="utf-8")
    save_gt_points(root / "gt.txt", ground_truth_points(seq, cell))
    return root


# --------------------------------------------------------------------------
# annotated logs for likelihood summarization


def simulate_rate_log(
    n_frames: int,
    classes: Sequence[int],
    tag_rate: np.ndarray,
    det_rate: np.ndarray,
    rng: np.random.Generator,
) -> list[AnnotatedFrame]:
    """Frames each observing one instance of a class drawn from `classes`.

    Label o enters the prompt with tag_rate[o, c]; given that, the instance is
    detected as o with det_rate[o, c].
    """
    n_open = tag_rate.shape[0]
    log = []
    for _ in range(n_frames):
        c = int(rng.choice(np.asarray(classes)))
        tagged = rng.uniform(size=n_open) < tag_rate[:, c]
        detected = tagged & (rng.uniform(size=n_open) < det_rate[:, c])
        log.append(
            AnnotatedFrame(
                frozenset(np.flatnonzero(tagged).tolist()),
                [AnnotatedInstance(c, frozenset(np.flatnonzero(detected).tolist()))],
            )
        )
    return log


def simulate_detector_log(
    n_frames: int,
    classes: Sequence[int],
    model: LabelModel,
    corr: Corruption,
    rng: np.random.Generator,
    max_objects: int = 3,
) -> list[AnnotatedFrame]:
    """Calibration log from the simulated detector on random object subsets."""
    classes = list(classes)
    log = []
    for _ in range(n_frames):
        n = int(rng.integers(1, min(max_objects, len(classes)) + 1))
        chosen = sorted(rng.choice(len(classes), size=n, replace=False).tolist())
        objs = [(i, classes[i]) for i in chosen]
        _, prompt, meas, _ = simulate_labels(objs, model, corr, rng)
        insts = [
            AnnotatedInstance(c, frozenset(mm.label for mm in m) if m else frozenset())
            for (_, c), m in zip(objs, meas)
        ]
        log.append(AnnotatedFrame(frozenset(prompt), insts))
    return log
