"""Per-frame orchestration: global TSDF every frame, detection fusion at a stride,
map refinement, and export."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol, Union

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .association import (
    INTERSECTION,
    UNION,
    InstanceMap,
    apply_frame,
    associate,
    instance_geometry_fusion,
    merge_pass,
    visible_instances,
)
from .camera import CameraIntrinsics, Frame, Pose, read_depth_png
from .detections import (
    DetectionFrame,
    LabelSpace,
    PayloadError,
    PromptState,
    detection_path,
    load_detection_frame,
    parse_detection_frame,
    record_frame_labels,
)
from .evaluation import InstancePrediction
from .fusion import (
    PRODUCT_FLOOR,
    SUM,
    LikelihoodMatrix,
    NoEvidenceError,
    build_manual_matrix,
    default_hard_association,
    load_hard_association,
    predict_class,
    warn_empty_columns,
)
from .pointcloud import NO_CLASS, NO_INSTANCE, PointCloud, read_ply, write_ply
from .tsdf import GlobalTsdf, extract_points, integrate_global
from .voxels import sorted_lookup, point_keys

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    voxel_length: float = 0.015
    truncation_multiple: float = 4.0
    stride: int = 10
    prompt_window: int = 5
    tau_2d: float = 0.3
    tau_sem: float = 0.2
    tau_3d: float = 0.3
    inflation_scale: float = 2.0
    v_min: int = 50
    merge_period: int = 1  # in detection frames; 0 disables merging
    geometry_fusion: bool = True
    projection: str = "query"
    likelihood_matrix: Optional[str] = None  # CSV; a manual matrix is built when unset
    hard_association: Optional[str] = None
    manual_p0: float = 0.9
    open_set: Optional[str] = None
    closed_set: Optional[str] = None
    combination: str = SUM
    overlap_reading: str = INTERSECTION
    detector_url: Optional[str] = None
    detector_timeout: float = 10.0

    def __post_init__(self):
        if not self.voxel_length > 0:
            raise ConfigError("voxel_length must be positive")
        if not self.truncation_multiple > 0:
            raise ConfigError("truncation_multiple must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        if self.prompt_window < 0 or self.merge_period < 0 or self.v_min < 0:
            raise ConfigError("prompt_window, merge_period and v_min must be nonnegative")
        for name in ("tau_2d", "tau_sem", "tau_3d"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.inflation_scale <= 1:
            raise ConfigError("inflation_scale must exceed 1")
        if self.combination not in (SUM, PRODUCT_FLOOR):
            raise ConfigError(f"combination must be '{SUM}' or '{PRODUCT_FLOOR}'")
        if self.overlap_reading not in (INTERSECTION, UNION):
            raise ConfigError(f"overlap_reading must be '{INTERSECTION}' or '{UNION}'")
        if self.projection not in ("query", "center"):
            raise ConfigError("projection must be 'query' or 'center'")
        if (self.open_set is None) != (self.closed_set is None):
            raise ConfigError("open_set and closed_set must be given together")

    @property
    def truncation(self) -> float:
        return self.truncation_multiple * self.voxel_length

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in data.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise ConfigError(f"unknown config key '{key}'")
            kwargs[name] = _coerce(name, fields[name].type, val)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: malformed config: {exc}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config is flat; unexpected table '{nested[0]}'")
        base = path.parent
        for key in ("likelihood_matrix", "hard_association", "open_set", "closed_set"):
            if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
        return cls.from_mapping(data)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def label_space(self) -> LabelSpace:
        if self.open_set is None:
            return LabelSpace.default()
        return LabelSpace.load(self.open_set, self.closed_set)

    def likelihood(self, space: LabelSpace) -> LikelihoodMatrix:
        if self.likelihood_matrix is not None:
            m = LikelihoodMatrix.load_csv(self.likelihood_matrix, space)
        else:
            assoc = (
                load_hard_association(self.hard_association, space)
                if self.hard_association
                else default_hard_association(space)
            )
            m = build_manual_matrix(assoc, self.manual_p0, space.n_open, space.n_closed)
        warn_empty_columns(m, space)
        return m


_TYPES = {"float": float, "int": int, "str": str, "bool": bool}


def _coerce(name: str, annotation: str, val):
    optional = annotation.startswith("Optional[")
    base = annotation[len("Optional[") : -1] if optional else annotation
    if val is None and optional:
        return None
    typ = _TYPES.get(base, str)
    if typ is bool:
        if isinstance(val, bool):
            return val
        if isinstance(val, str) and val.lower() in ("true", "false", "1", "0", "yes", "no"):
            return val.lower() in ("true", "1", "yes")
        raise ConfigError(f"'{name}' expects a boolean, got {val!r}")
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    if isinstance(val, typ) and not isinstance(val, bool):
        return val
    if isinstance(val, str):
        try:
            return typ(val)
        except ValueError:
            pass
    raise ConfigError(f"'{name}' expects {typ.__name__}, got {val!r}")


# --------------------------------------------------------------------------
# detector sources


class DetectorSource(Protocol):
    def get(self, frame: Frame, extra_labels: set[int]) -> Optional[DetectionFrame]:
        """Detections for `frame`, or None when no payload is available."""


class DirectorySource:
    """Reads precomputed payloads from `<root>/prediction/frame-XXXXXX.json`."""

    def __init__(self, root, space: LabelSpace):
        self.root = Path(root)
        self.space = space

    def get(self, frame: Frame, extra_labels: set[int]) -> Optional[DetectionFrame]:
        path = detection_path(self.root, frame.index)
        if not path.exists():
            return None
        return load_detection_frame(path, self.space, frame.depth.shape)


class HttpSource:
    """Posts {"frame", "extra_labels"} to a detection service and parses the reply."""

    def __init__(self, url: str, space: LabelSpace, timeout: float = 10.0):
        self.url = url
        self.space = space
        self.timeout = timeout

    def get(self, frame: Frame, extra_labels: set[int]) -> Optional[DetectionFrame]:
        body = json.dumps(
            {"frame": frame.index, "extra_labels": [self.space.open_set[o] for o in sorted(extra_labels)]}
        ).encode()
        req = urllib.request.Request(self.url, body, {"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            logger.warning("frame %d: detector service failed: %s", frame.index, exc)
            return None
        return parse_detection_frame(payload, self.space, frame.depth.shape)


class SyntheticSource:
    """Runs the simulated detector on demand, honoring prompt augmentation."""

    def __init__(self, detector, ids: list[np.ndarray]):
        self.detector = detector
        self.ids = ids
        self.frames: dict[int, DetectionFrame] = {}

    def get(self, frame: Frame, extra_labels: set[int]) -> Optional[DetectionFrame]:
        sim = self.detector.detect(frame.index, self.ids[frame.index], extra_labels)
        self.frames[frame.index] = sim.frame
        return sim.frame


class MemorySource:
    """Serves prebuilt detection frames keyed by frame index."""

    def __init__(self, frames: dict[int, DetectionFrame]):
        self.frames = frames

    def get(self, frame: Frame, extra_labels: set[int]) -> Optional[DetectionFrame]:
        return self.frames.get(frame.index)


# --------------------------------------------------------------------------
# input sequences


@dataclass(frozen=True)
class SkippedFrame:
    index: int
    reason: str


def iter_directory_frames(root) -> Iterator[Union[Frame, SkippedFrame]]:
    """Frames of an on-disk sequence in index order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory not found: {root}")
    k_path = root / "intrinsic.txt"
    if not k_path.exists():
        raise FileNotFoundError(f"missing camera intrinsics: {k_path}")
    k = CameraIntrinsics.load(k_path)
    indices = set()
    for sub in ("depth", "pose"):
        for p in (root / sub).glob("frame-*.*"):
            try:
                indices.add(int(p.stem.split("-")[1]))
            except (IndexError, ValueError):
                continue
    for t in sorted(indices):
        depth_p = root / "depth" / f"frame-{t:06d}.png"
        pose_p = root / "pose" / f"frame-{t:06d}.txt"
        if not depth_p.exists():
            yield SkippedFrame(t, f"missing depth {depth_p}")
            continue
        if not pose_p.exists():
            yield SkippedFrame(t, f"missing pose {pose_p}")
            continue
        try:
            yield Frame(t, read_depth_png(depth_p), Pose.load(pose_p), k)
        except (OSError, ValueError) as exc:
            yield SkippedFrame(t, str(exc))


# --------------------------------------------------------------------------
# run loop


STAGES = ("projection", "association", "integration")


@dataclass
class RunReport:
    frames: int = 0
    skipped_frames: int = 0
    detection_frames: int = 0
    missing_detections: int = 0
    detections: int = 0
    dropped_detections: int = 0
    matched: int = 0
    created: int = 0
    merges: int = 0
    deleted: int = 0
    prompt_sizes: list[int] = field(default_factory=list)
    stage_ms: dict[str, list[float]] = field(default_factory=lambda: {s: [] for s in STAGES})
    global_ms: list[float] = field(default_factory=list)
    refinement_ms: list[float] = field(default_factory=list)

    def fusion_ms(self) -> np.ndarray:
        """Projection + association + integration time of each detection frame."""
        if not self.stage_ms["projection"]:
            return np.zeros(0)
        return np.sum([self.stage_ms[s] for s in STAGES], axis=0)

    def to_dict(self) -> dict:
        def stats(xs):
            xs = np.asarray(xs, dtype=float)
            if xs.size == 0:
                return {"mean": 0.0, "max": 0.0, "count": 0}
            return {"mean": float(xs.mean()), "max": float(xs.max()), "count": int(xs.size)}

        counters = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if isinstance(getattr(self, f.name), int)
        }
        return {
            "counters": counters,
            "timing_ms": {
                **{s: stats(self.stage_ms[s]) for s in STAGES},
                "fusion_total": stats(self.fusion_ms()),
                "global_integration": stats(self.global_ms),
                "refinement": stats(self.refinement_ms),
            },
        }


@dataclass
class RunResult:
    tsdf: GlobalTsdf
    map: InstanceMap
    report: RunReport
    cloud: PointCloud
    space: LabelSpace


def run_sequence(
    config: PipelineConfig,
    frames: Iterable[Union[Frame, SkippedFrame]],
    source: Optional[DetectorSource],
    space: Optional[LabelSpace] = None,
    likelihood: Optional[LikelihoodMatrix] = None,
) -> RunResult:
    """Fuse a frame sequence into a global TSDF and an instance map.

    Detection frames are those whose index is a multiple of the stride.
    With `source=None` every frame is geometric-only.
    """
    space = space or config.label_space()
    m = likelihood if likelihood is not None else config.likelihood(space)
    if m.shape != (space.n_open, space.n_closed):
        raise ConfigError(f"likelihood matrix shape {m.shape} does not match the label space")
    tsdf = GlobalTsdf(config.voxel_length, config.truncation)
    imap = InstanceMap(config.voxel_length, space.n_closed)
    report = RunReport()
    prompt = PromptState(config.prompt_window)
    last_t = None

    for fr in frames:
        if isinstance(fr, SkippedFrame):
            logger.warning("frame %d skipped: %s", fr.index, fr.reason)
            report.skipped_frames += 1
            continue
        if last_t is not None and fr.index <= last_t:
            raise ValueError(f"frames out of order: {fr.index} after {last_t}")
        last_t = fr.index
        report.frames += 1
        t0 = time.perf_counter()
        integrate_global(tsdf, fr)
        report.global_ms.append(1e3 * (time.perf_counter() - t0))
        if source is None or fr.index % config.stride:
            continue

        extra = prompt.recent_labels() if config.prompt_window > 0 else set()
        try:
            det_frame = source.get(fr, extra)
        except PayloadError as exc:
            logger.warning("frame %d: bad detection payload: %s", fr.index, exc)
            det_frame = None
        if det_frame is None:
            report.missing_detections += 1
            continue
        report.detection_frames += 1
        dets = det_frame.detections
        report.detections += len(dets)
        report.dropped_detections += det_frame.dropped
        report.prompt_sizes.append(len(det_frame.prompt))
        record_frame_labels(prompt, dets)

        t0 = time.perf_counter()
        visible = visible_instances(imap, fr, config.v_min, config.projection)
        t1 = time.perf_counter()
        result = associate(dets, visible, config.tau_2d)
        t2 = time.perf_counter()
        created = apply_frame(imap, fr, dets, result, m, config.combination)
        t3 = time.perf_counter()
        report.stage_ms["projection"].append(1e3 * (t1 - t0))
        report.stage_ms["association"].append(1e3 * (t2 - t1))
        report.stage_ms["integration"].append(1e3 * (t3 - t2))
        report.matched += len(result.matches)
        report.created += len(created)

        if config.merge_period and report.detection_frames % config.merge_period == 0:
            t0 = time.perf_counter()
            events = merge_pass(
                imap, config.tau_sem, config.tau_3d, config.inflation_scale, config.overlap_reading, fr.index
            )
            report.refinement_ms.append(1e3 * (time.perf_counter() - t0))
            report.merges += len(events)

    cloud = extract_points(tsdf)
    if config.geometry_fusion:
        report.deleted += len(instance_geometry_fusion(imap, cloud, last_t))
    return RunResult(tsdf, imap, report, cloud, space)


def make_source(config: PipelineConfig, root, space: LabelSpace) -> DetectorSource:
    if config.detector_url:
        return HttpSource(config.detector_url, space, config.detector_timeout)
    return DirectorySource(root, space)


# --------------------------------------------------------------------------
# export


def _palette(id_: int) -> tuple[int, int, int]:
    rng = np.random.default_rng(id_)
    return tuple(int(v) for v in rng.integers(40, 256, size=3))


def label_points(result: RunResult) -> PointCloud:
    """Tag surface points with the instance owning their voxel.

    A voxel claimed by several instances goes to the one with the highest
    observation weight, ties to the lower id.
    """
    cloud = result.cloud
    n = len(cloud)
    inst_ids = np.full(n, NO_INSTANCE, dtype=np.uint32)
    class_ids = np.full(n, NO_CLASS, dtype=np.uint16)
    colors = np.full((n, 3), 128, dtype=np.uint8)
    best = np.zeros(n)
    keys = point_keys(cloud.points, result.map.voxel_length) if n else np.empty(0, np.int64)
    for inst in result.map:
        idx = sorted_lookup(inst.grid.keys, keys)
        hit = idx >= 0
        w = np.zeros(n)
        w[hit] = inst.grid.weights[idx[hit]]
        take = hit & (w > best)
        best[take] = w[take]
        inst_ids[take] = inst.id
        try:
            class_ids[take] = predict_class(inst.belief)
        except NoEvidenceError:
            class_ids[take] = NO_CLASS
        colors[take] = _palette(inst.id)
    return PointCloud(cloud.points, colors, inst_ids, class_ids)


def instance_records(result: RunResult) -> list[dict]:
    out = []
    names = result.space.closed_set
    for inst in result.map:
        try:
            c = predict_class(inst.belief)
        except NoEvidenceError:
            c = None
        centers = inst.grid.centers()
        out.append(
            {
                "id": inst.id,
                "class": names[c] if c is not None else None,
                "class_index": c,
                "probs": [float(p) for p in inst.belief.probs],
                "confidence": inst.belief.confidence,
                "voxel_count": len(inst.grid),
                "centroid": [float(v) for v in centers.mean(axis=0)] if len(centers) else None,
                "frame_count": inst.belief.frame_count,
                "created_at": inst.created_at,
                "last_seen": inst.last_seen,
            }
        )
    return out


def export_map(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cloud": out / "labeled_cloud.ply",
        "instances": out / "instances.json",
        "report": out / "report.json",
        "events": out / "events.jsonl",
    }
    write_ply(paths["cloud"], label_points(result))
    doc = {"classes": list(result.space.closed_set), "instances": instance_records(result)}
    paths["instances"].write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["report"].write_text(json.dumps(result.report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["events"].write_text("", encoding="utf-8")
    result.map.write_log(paths["events"])
    return paths


def map_predictions(result: RunResult) -> list[InstancePrediction]:
    """Evaluation predictions: labeled surface points per classified instance."""
    return predictions_from_cloud(label_points(result), {i.id: i.belief.confidence for i in result.map})


def predictions_from_cloud(cloud: PointCloud, confidence: dict[int, float]) -> list[InstancePrediction]:
    preds = []
    for iid in np.unique(cloud.instance_ids):
        if iid == NO_INSTANCE:
            continue
        sel = cloud.instance_ids == iid
        cls = int(cloud.class_ids[sel][0])
        if cls == NO_CLASS:
            continue
        preds.append(InstancePrediction(cloud.points[sel], cls, confidence.get(int(iid), 1.0), int(iid)))
    return preds


def load_predictions(out_dir) -> list[InstancePrediction]:
    """Predictions from an exported map directory."""
    out = Path(out_dir)
    cloud = read_ply(out / "labeled_cloud.ply")
    doc = json.loads((out / "instances.json").read_text(encoding="utf-8"))
    conf = {rec["id"]: rec["confidence"] for rec in doc["instances"]}
    return predictions_from_cloud(cloud, conf)
