"""Label spaces, per-frame detection records and text-prompt bookkeeping.

Detection frames arrive as JSON files, one per detection frame:

    {"frame": 10, "prompt": ["bed", "chair"],
     "detections": [{"labels": [{"name": "bed", "score": 0.61}],
                     "bbox": [x0, y0, x1, y1],
                     "mask_png": null,
                     "mask_rle": {"size": [H, W], "counts": "..."}}]}

Exactly one of ``mask_png`` (path relative to the JSON file) or ``mask_rle``
is set per detection.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from . import rle

logger = logging.getLogger(__name__)


def _read_label_file(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


@dataclass(frozen=True)
class LabelSpace:
    open_set: tuple[str, ...]
    closed_set: tuple[str, ...]

    def __post_init__(self):
        for name, labels in (("open_set", self.open_set), ("closed_set", self.closed_set)):
            if not labels:
                raise ValueError(f"{name} must be non-empty")
            lowered = [lb.lower() for lb in labels]
            if len(set(lowered)) != len(lowered):
                raise ValueError(f"{name} contains duplicate labels")
        object.__setattr__(self, "open_set", tuple(self.open_set))
        object.__setattr__(self, "closed_set", tuple(self.closed_set))
        object.__setattr__(self, "_open_index", {lb.lower(): i for i, lb in enumerate(self.open_set)})
        object.__setattr__(
            self, "_closed_index", {lb.lower(): i for i, lb in enumerate(self.closed_set)}
        )

    @property
    def n_open(self) -> int:
        return len(self.open_set)

    @property
    def n_closed(self) -> int:
        return len(self.closed_set)

    def open_index(self, name: str) -> Optional[int]:
        return self._open_index.get(name.strip().lower())

    def closed_index(self, name: str) -> Optional[int]:
        return self._closed_index.get(name.strip().lower())

    @classmethod
    def load(cls, open_path, closed_path) -> "LabelSpace":
        return cls(tuple(_read_label_file(open_path)), tuple(_read_label_file(closed_path)))

    @classmethod
    def default(cls) -> "LabelSpace":
        data = resources.files("instmap") / "data"
        return cls.load(data / "open_set.txt", data / "closed_set.txt")


@dataclass(frozen=True)
class LabelMeasurement:
    label: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class DetectionRecord:
    measurements: list[LabelMeasurement]
    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    prompt: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.prompt = frozenset(self.prompt)
        if not self.measurements:
            raise ValueError("a detection needs at least one label measurement")

    @property
    def labels(self) -> set[int]:
        return {m.label for m in self.measurements}

    def labels_in_prompt(self) -> bool:
        return self.labels <= self.prompt


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return (0, 0, 0, 0)
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def filter_tags(raw_tags: Iterable[str], space: LabelSpace) -> set[int]:
    """Indices of the tags that belong to the open set (lowercase exact match)."""
    out = set()
    for tag in raw_tags:
        idx = space.open_index(tag)
        if idx is not None:
            out.add(idx)
    return out


class PromptState:
    """Open-set labels measured in the last `window` detection frames."""

    def __init__(self, window: int = 5):
        if window < 0:
            raise ValueError("window must be nonnegative")
        self.window = window
        self.buffer: deque[frozenset[int]] = deque(maxlen=window if window > 0 else 0)

    def recent_labels(self) -> set[int]:
        out: set[int] = set()
        for labels in self.buffer:
            out |= labels
        return out

    def reset(self) -> None:
        self.buffer.clear()


def augment_prompt(state: PromptState, tags: Iterable[int]) -> set[int]:
    return set(tags) | state.recent_labels()


def record_frame_labels(state: PromptState, detections: Sequence[DetectionRecord]) -> PromptState:
    labels: set[int] = set()
    for det in detections:
        labels |= det.labels
    if state.window > 0:
        state.buffer.append(frozenset(labels))
    return state


class PayloadError(ValueError):
    """A detection payload does not follow the schema."""


@dataclass
class DetectionFrame:
    frame: int
    prompt: frozenset[int]
    detections: list[DetectionRecord]
    dropped_unknown_label: int = 0
    dropped_not_in_prompt: int = 0
    dropped_empty_mask: int = 0
    unknown_prompt_labels: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_unknown_label + self.dropped_not_in_prompt + self.dropped_empty_mask


def _require(obj, key, typ, where):
    if not isinstance(obj, dict) or key not in obj:
        raise PayloadError(f"missing field '{where}{key}'")
    val = obj[key]
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, typ) or isinstance(val, bool) and typ is not bool:
        raise PayloadError(f"field '{where}{key}' must be {typ.__name__}")
    return val


def _decode_mask(det: dict, where: str, base_dir: Optional[Path], shape) -> np.ndarray:
    png = det.get("mask_png")
    enc = det.get("mask_rle")
    if (png is None) == (enc is None):
        raise PayloadError(f"'{where}' needs exactly one of mask_png / mask_rle")
    if png is not None:
        if not isinstance(png, str):
            raise PayloadError(f"field '{where}mask_png' must be str")
        path = Path(png)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            mask = np.asarray(Image.open(path)) != 0
        except OSError as exc:
            raise PayloadError(f"field '{where}mask_png': cannot read {path}: {exc}") from exc
        if mask.ndim == 3:
            mask = mask.any(axis=2)
    else:
        if not isinstance(enc, dict) or "size" not in enc or "counts" not in enc:
            raise PayloadError(f"field '{where}mask_rle' needs size and counts")
        try:
            mask = rle.decode(enc)
        except (ValueError, TypeError) as exc:
            raise PayloadError(f"field '{where}mask_rle': {exc}") from exc
    if shape is not None and mask.shape != tuple(shape):
        raise PayloadError(f"'{where}' mask shape {mask.shape} does not match frame {tuple(shape)}")
    return mask


def parse_detection_frame(
    payload: dict, space: LabelSpace, shape=None, base_dir: Optional[Path] = None
) -> DetectionFrame:
    t = _require(payload, "frame", int, "")
    raw_prompt = _require(payload, "prompt", list, "")
    dets = _require(payload, "detections", list, "")
    for i, name in enumerate(raw_prompt):
        if not isinstance(name, str):
            raise PayloadError(f"field 'prompt[{i}]' must be str")
    prompt = frozenset(filter_tags(raw_prompt, space))
    out = DetectionFrame(t, prompt, [], unknown_prompt_labels=len(set(raw_prompt)) - len(prompt))

    for k, det in enumerate(dets):
        where = f"detections[{k}]."
        labels = _require(det, "labels", list, where)
        bbox = _require(det, "bbox", list, where)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
            raise PayloadError(f"field '{where}bbox' must be 4 numbers")
        if not labels:
            raise PayloadError(f"field '{where}labels' must be non-empty")
        meas = []
        unknown = False
        for i, lab in enumerate(labels):
            lw = f"{where}labels[{i}]."
            name = _require(lab, "name", str, lw)
            score = _require(lab, "score", float, lw)
            if not 0.0 <= score <= 1.0:
                raise PayloadError(f"field '{lw}score' = {score} outside [0, 1]")
            idx = space.open_index(name)
            if idx is None:
                unknown = True
                continue
            meas.append(LabelMeasurement(idx, score))
        mask = _decode_mask(det, where, base_dir, shape)
        if unknown:
            out.dropped_unknown_label += 1
            continue
        rec = DetectionRecord(meas, mask, tuple(int(round(v)) for v in bbox), prompt)
        if not rec.labels_in_prompt():
            out.dropped_not_in_prompt += 1
            continue
        if not mask.any():
            out.dropped_empty_mask += 1
            continue
        out.detections.append(rec)
    if out.dropped:
        logger.warning(
            "frame %d: dropped %d detections (unknown label %d, not in prompt %d, empty mask %d)",
            t,
            out.dropped,
            out.dropped_unknown_label,
            out.dropped_not_in_prompt,
            out.dropped_empty_mask,
        )
    return out


def load_detection_frame(source, space: LabelSpace, shape=None) -> DetectionFrame:
    """Parse a detection frame from a path or an already-decoded payload dict."""
    if isinstance(source, dict):
        return parse_detection_frame(source, space, shape)
    path = Path(source)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PayloadError(f"{path}: invalid JSON: {exc}") from exc
    return parse_detection_frame(payload, space, shape, base_dir=path.parent)


def serialize_detection_frame(
    frame: int, prompt: Iterable[int], detections: Sequence[DetectionRecord], space: LabelSpace
) -> dict:
    return {
        "frame": int(frame),
        "prompt": [space.open_set[i] for i in sorted(prompt)],
        "detections": [
            {
                "labels": [
                    {"name": space.open_set[m.label], "score": float(m.score)}
                    for m in det.measurements
                ],
                "bbox": [int(v) for v in det.bbox],
                "mask_png": None,
                "mask_rle": rle.encode(det.mask),
            }
            for det in detections
        ],
    }


def detection_path(root, t: int) -> Path:
    return Path(root) / "prediction" / f"frame-{t:06d}.json"
