"""Probabilistic fusion of open-set label measurements into closed-set beliefs.

The label likelihood matrix M[o, c] is the probability of measuring open-set
label o (with o offered in the text prompt) when the true closed-set class
is c. It factors into a tagging rate (o appears in the prompt) times a
detection rate (the detector picks o given it is in the prompt).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from typing import Iterable, Mapping, Optional

import numpy as np

from .detections import DetectionRecord, LabelSpace

logger = logging.getLogger(__name__)

SUM = "sum"
PRODUCT_FLOOR = "product-floor"


class NoEvidenceError(ValueError):
    """A belief with no fused measurements has no class."""


@dataclass
class SemanticBelief:
    probs: np.ndarray
    frame_count: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("belief must be a nonnegative vector summing to 1")
        if self.frame_count < 0:
            raise ValueError("frame_count must be nonnegative")

    @classmethod
    def uniform(cls, n: int) -> "SemanticBelief":
        return cls(np.full(n, 1.0 / n), 0)

    def copy(self) -> "SemanticBelief":
        return SemanticBelief(self.probs.copy(), self.frame_count)

    @property
    def confidence(self) -> float:
        return float(self.probs.max())


@dataclass
class LikelihoodMatrix:
    """M[o, c] over open-set rows and closed-set columns."""

    values: np.ndarray
    provenance: str = "statistical"
    no_evidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.values.setflags(write=False)
        if self.values.ndim != 2:
            raise ValueError("likelihood matrix must be 2-D")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("likelihood entries must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def empty_columns(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(~np.any(self.values > 0, axis=0))]

    def save_csv(self, path, space: LabelSpace) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["open_label", *space.closed_set])
            for o, name in enumerate(space.open_set):
                w.writerow([name, *(repr(float(v)) for v in self.values[o])])

    @classmethod
    def load_csv(cls, path, space: LabelSpace, provenance: str = "statistical"):
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        header = [h.strip() for h in rows[0][1:]]
        cols = []
        for name in header:
            idx = space.closed_index(name)
            if idx is None:
                raise ValueError(f"{path}: unknown closed-set class '{name}'")
            cols.append(idx)
        m = np.zeros((space.n_open, space.n_closed))
        for row in rows[1:]:
            if not row:
                continue
            o = space.open_index(row[0])
            if o is None:
                raise ValueError(f"{path}: unknown open-set label '{row[0]}'")
            m[o, cols] = [float(v) for v in row[1:]]
        return cls(m, provenance)


def warn_empty_columns(m: LikelihoodMatrix, space: Optional[LabelSpace] = None) -> list[int]:
    empty = m.empty_columns()
    for c in empty:
        name = space.closed_set[c] if space is not None else str(c)
        logger.warning("class '%s' has an all-zero likelihood column and cannot be predicted", name)
    return empty


# --------------------------------------------------------------------------
# likelihood summarization from annotated detection logs


@dataclass
class AnnotatedInstance:
    """One visible ground-truth instance and the labels detections gave it."""

    cls: int
    detected_labels: frozenset[int] = frozenset()


@dataclass
class AnnotatedFrame:
    prompt: frozenset[int]
    instances: Optional[list[AnnotatedInstance]]  # None when ground truth is missing


@dataclass
class LikelihoodEvidence:
    tag_frames: np.ndarray  # |I| per (o, c), same for every o
    tagged_frames: np.ndarray  # |I^| per (o, c)
    det_opportunities: np.ndarray  # |O| per (o, c)
    det_hits: np.ndarray  # |O^| per (o, c)
    skipped_frames: int = 0

    def __post_init__(self):
        if np.any(self.tagged_frames > self.tag_frames) or np.any(
            self.det_hits > self.det_opportunities
        ):
            raise ValueError("evidence counts are inconsistent")

    @classmethod
    def zeros(cls, n_open: int, n_closed: int) -> "LikelihoodEvidence":
        z = lambda: np.zeros((n_open, n_closed), dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z())

    def tagging_likelihood(self):
        """(rates, no_evidence) with zero-denominator cells set to 0 and flagged."""
        return _ratio(self.tagged_frames, self.tag_frames)

    def detection_likelihood(self):
        return _ratio(self.det_hits, self.det_opportunities)

    def save_csv(self, path, space: LabelSpace) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(
                ["open_label", "class", "tag_frames", "tagged_frames", "det_opportunities", "det_hits"]
            )
            for o, oname in enumerate(space.open_set):
                for c, cname in enumerate(space.closed_set):
                    w.writerow(
                        [
                            oname,
                            cname,
                            int(self.tag_frames[o, c]),
                            int(self.tagged_frames[o, c]),
                            int(self.det_opportunities[o, c]),
                            int(self.det_hits[o, c]),
                        ]
                    )

    @classmethod
    def load_csv(cls, path, space: LabelSpace) -> "LikelihoodEvidence":
        ev = cls.zeros(space.n_open, space.n_closed)
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                o = space.open_index(row["open_label"])
                c = space.closed_index(row["class"])
                if o is None or c is None:
                    raise ValueError(f"{path}: unknown label pair {row['open_label']!r}, {row['class']!r}")
                ev.tag_frames[o, c] = int(row["tag_frames"])
                ev.tagged_frames[o, c] = int(row["tagged_frames"])
                ev.det_opportunities[o, c] = int(row["det_opportunities"])
                ev.det_hits[o, c] = int(row["det_hits"])
        ev.__post_init__()
        return ev


def _ratio(num: np.ndarray, den: np.ndarray):
    empty = den == 0
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=~empty)
    return out, empty


def summarize_evidence(log: Iterable[AnnotatedFrame], n_open: int, n_closed: int) -> LikelihoodEvidence:
    """Count tagging and detection events per (open label, class) pair.

    For class c: I = frames observing a ground-truth c instance, I^ = those
    whose prompt holds o; O = c instances observed while o is in the prompt,
    O^ = those detected with label o.
    """
    ev = LikelihoodEvidence.zeros(n_open, n_closed)
    for fr in log:
        if fr.instances is None:
            ev.skipped_frames += 1
            continue
        prompt = np.zeros(n_open, dtype=bool)
        prompt[list(fr.prompt)] = True
        seen = sorted({inst.cls for inst in fr.instances})
        for c in seen:
            ev.tag_frames[:, c] += 1
            ev.tagged_frames[prompt, c] += 1
        for inst in fr.instances:
            ev.det_opportunities[prompt, inst.cls] += 1
            for o in inst.detected_labels:
                if prompt[o]:
                    ev.det_hits[o, inst.cls] += 1
    if ev.skipped_frames:
        logger.warning("skipped %d log frames without ground truth", ev.skipped_frames)
    return ev


def build_statistical_matrix(ev: LikelihoodEvidence, space: Optional[LabelSpace] = None) -> LikelihoodMatrix:
    tag, tag_empty = ev.tagging_likelihood()
    det, det_empty = ev.detection_likelihood()
    m = LikelihoodMatrix(det * tag, "statistical", no_evidence=tag_empty | det_empty)
    warn_empty_columns(m, space)
    return m


def exact_statistical_entry(ev: LikelihoodEvidence, o: int, c: int) -> Fraction:
    """Rational value of one matrix cell (0 for empty denominators)."""
    if ev.tag_frames[o, c] == 0 or ev.det_opportunities[o, c] == 0:
        return Fraction(0)
    return Fraction(int(ev.det_hits[o, c]), int(ev.det_opportunities[o, c])) * Fraction(
        int(ev.tagged_frames[o, c]), int(ev.tag_frames[o, c])
    )


# --------------------------------------------------------------------------
# manual matrix from a hard label association


def load_hard_association(path, space: LabelSpace) -> dict[int, int]:
    assoc = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            o = space.open_index(row["open_label"])
            c = space.closed_index(row["closed_class"])
            if o is None or c is None:
                raise ValueError(f"{path}: unknown pair {row['open_label']!r} -> {row['closed_class']!r}")
            assoc[o] = c
    missing = [space.open_set[o] for o in range(space.n_open) if o not in assoc]
    if missing:
        raise ValueError(f"{path}: hard association misses open labels {missing}")
    return assoc


def default_hard_association(space: LabelSpace) -> dict[int, int]:
    return load_hard_association(resources.files("instmap") / "data" / "hard_association.csv", space)


def build_manual_matrix(assoc: Mapping[int, int], p0: float, n_open: int, n_closed: int) -> LikelihoodMatrix:
    if not 0 < p0 <= 1:
        raise ValueError(f"p0 must lie in (0, 1], got {p0}")
    m = np.zeros((n_open, n_closed))
    for o in range(n_open):
        if o not in assoc:
            raise ValueError(f"open label {o} has no associated class")
        m[o, assoc[o]] = p0
    return LikelihoodMatrix(m, "manual")


# --------------------------------------------------------------------------
# Bayes filter with weighted-addition propagation


def measurement_likelihood(
    det: DetectionRecord, m: LikelihoodMatrix, mode: str = SUM, floor: float = 1e-3
) -> np.ndarray:
    """Normalized p(z | class) for one detection.

    `sum` adds score-weighted matrix rows over the measurements;
    `product-floor` multiplies score-weighted rows lifted by `floor`.
    An all-zero result becomes uniform.
    """
    n = m.shape[1]
    rows = np.array([m.values[meas.label] for meas in det.measurements])
    scores = np.array([meas.score for meas in det.measurements])
    if mode == SUM:
        lik = scores @ rows
    elif mode == PRODUCT_FLOOR:
        lik = np.prod(scores[:, None] * rows + floor, axis=0)
        if np.all(scores == 0):
            lik = np.zeros(n)
    else:
        raise ValueError(f"unknown measurement combination mode '{mode}'")
    total = lik.sum()
    if not total > 0:
        return np.full(n, 1.0 / n)
    return lik / total


def fuse_likelihood(belief: SemanticBelief, lik: np.ndarray) -> SemanticBelief:
    """Weighted-addition update: new = (lik + t * old) / (t + 1)."""
    t = belief.frame_count
    probs = (np.asarray(lik, dtype=np.float64) + t * belief.probs) / (t + 1)
    probs /= probs.sum()
    return SemanticBelief(probs, t + 1)


def bayes_update(
    belief: SemanticBelief, det: DetectionRecord, m: LikelihoodMatrix, mode: str = SUM
) -> SemanticBelief:
    # prediction under a static-class, uniform-control motion model is the identity
    return fuse_likelihood(belief, measurement_likelihood(det, m, mode))


def predict_class(belief: SemanticBelief) -> int:
    if belief.frame_count < 1:
        raise NoEvidenceError("belief has not fused any measurement")
    return int(np.argmax(belief.probs))


def merge_beliefs(a: SemanticBelief, b: SemanticBelief) -> SemanticBelief:
    """Frame-count-weighted average of two beliefs; counts add."""
    ta, tb = a.frame_count, b.frame_count
    if ta + tb == 0:
        probs = (a.probs + b.probs) / 2
    else:
        probs = (ta * a.probs + tb * b.probs) / (ta + tb)
    return SemanticBelief(probs / probs.sum(), ta + tb)
