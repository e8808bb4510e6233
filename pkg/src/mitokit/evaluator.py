"""Point-detection matching and precision/recall/F1 reporting.

Detections are matched to MF ground-truth points of the same patch: detections
are visited by descending confidence and each takes the nearest unmatched MF
point within ``radius`` pixels. NMF annotations never match. Counts are pooled
over patches before computing the ratios (micro averaging).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from mitokit.catalog import Annotation, CorpusCatalog, Label, iter_jsonl
from mitokit.errors import ConfigError, DataError

DEFAULT_RADIUS = 30.0
IDENTITY = "identity"


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0 or math.isnan(self.confidence):
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    """Detections on one patch from one (model, view) source.

    ``transform_id`` names the coordinate frame the points are expressed in;
    ``view_id`` names the test-time view that produced them and survives
    back-transformation, so fused sources stay distinguishable.
    """

    patch_id: str
    detections: tuple[Detection, ...] = ()
    model_id: str = "model"
    transform_id: str = IDENTITY
    view_id: str | None = None

    def __post_init__(self):
        if self.view_id is None:
            object.__setattr__(self, "view_id", self.transform_id)
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self):
        return len(self.detections)

    @property
    def source(self) -> tuple[str, str]:
        return self.model_id, self.view_id

    def above(self, threshold: float) -> "DetectionSet":
        return replace(self, detections=tuple(d for d in self.detections if d.confidence >= threshold))


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, str, float], ...] = ()
    """``(detection index, annotation id, distance)`` for each true positive."""


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    threshold_used: float
    radius_used: float
    breakdown: Mapping[str, Mapping[str, Counts]] = field(default_factory=dict)

    @property
    def counts(self) -> Counts:
        return Counts(self.tp, self.fp, self.fn)

    def to_json(self) -> dict:
        return {
            "overall": self.counts.as_dict(),
            "threshold_used": self.threshold_used,
            "radius_used": self.radius_used,
            "breakdown": {
                level: {key: c.as_dict() for key, c in sorted(rows.items())}
                for level, rows in sorted(self.breakdown.items())
            },
        }


def score(
    counts: Counts | Iterable[Counts],
    threshold: float = 0.0,
    radius: float = DEFAULT_RADIUS,
    breakdown: Mapping[str, Mapping[str, Counts]] | None = None,
) -> EvalReport:
    """Pool counts and compute precision, recall and F1."""
    if isinstance(counts, Counts):
        total = counts
    else:
        total = sum(counts, Counts())
    if min(total.tp, total.fp, total.fn) < 0:
        raise DataError(f"negative counts {total}")
    return EvalReport(
        total.tp,
        total.fp,
        total.fn,
        total.precision,
        total.recall,
        total.f1,
        threshold,
        radius,
        dict(breakdown or {}),
    )


def match_detections(
    detections: DetectionSet | Sequence[Detection],
    truth: Sequence[Annotation],
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
) -> MatchResult:
    """Greedy one-to-one matching of detections to MF truth points.

    Detections with confidence below ``threshold`` are ignored. Visiting order
    is confidence descending, then distance to the nearest MF point, then
    position, so the result does not depend on input order. Each detection
    takes the nearest still-unmatched MF point within ``radius`` (inclusive,
    ties by annotation id).
    """
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    if isinstance(detections, DetectionSet):
        patch_ids = {a.patch_id for a in truth}
        if patch_ids - {detections.patch_id}:
            raise DataError(
                f"truth from patches {sorted(patch_ids)} does not belong to detection patch "
                f"{detections.patch_id!r}"
            )
        dets = detections.detections
    else:
        if len({a.patch_id for a in truth}) > 1:
            raise DataError("truth annotations come from more than one patch")
        dets = tuple(detections)

    mf = sorted((a for a in truth if a.label is Label.MF), key=lambda a: a.id)
    kept = [i for i, d in enumerate(dets) if d.confidence >= threshold]
    if not kept or not mf:
        return MatchResult(0, len(kept), len(mf))

    dxy = np.array([(dets[i].x, dets[i].y) for i in kept], dtype=np.float64)
    txy = np.array([a.center_xy for a in mf], dtype=np.float64)
    dist = np.hypot(dxy[:, None, 0] - txy[None, :, 0], dxy[:, None, 1] - txy[None, :, 1])
    nearest = dist.min(axis=1)
    order = sorted(
        range(len(kept)),
        key=lambda j: (-dets[kept[j]].confidence, nearest[j], dets[kept[j]].x, dets[kept[j]].y),
    )
    free = np.ones(len(mf), dtype=bool)
    pairs = []
    for j in order:
        cand = np.flatnonzero(free & (dist[j] <= radius))
        if cand.size == 0:
            continue
        # argmin returns the first minimum; mf is sorted by id so ties go to the lowest id
        t = cand[np.argmin(dist[j, cand])]
        free[t] = False
        pairs.append((kept[j], mf[t].id, float(dist[j, t])))
    tp = len(pairs)
    return MatchResult(tp, len(kept) - tp, len(mf) - tp, tuple(pairs))


def _group_by_patch(detections) -> dict[str, list[DetectionSet]]:
    if isinstance(detections, Mapping):
        items = detections.values()
    else:
        items = detections
    out: dict[str, list[DetectionSet]] = {}
    for item in items:
        sets = [item] if isinstance(item, DetectionSet) else list(item)
        for s in sets:
            out.setdefault(s.patch_id, []).append(s)
    return out


def patch_counts(
    catalog: CorpusCatalog,
    detections,
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
) -> dict[str, Counts]:
    """Per-patch match counts over every patch of ``catalog``.

    ``detections`` is a mapping or iterable of :class:`DetectionSet`; each
    patch must have at most one set, expressed in the identity frame.
    Detections on patches outside the catalog are ignored.
    """
    grouped = _group_by_patch(detections)
    out = {}
    for pid in sorted(catalog.patches):
        sets = grouped.get(pid, [])
        if len(sets) > 1:
            raise DataError(f"patch {pid!r} has {len(sets)} detection sets; fuse them first")
        if sets and sets[0].transform_id != IDENTITY:
            raise DataError(
                f"detections for patch {pid!r} are in frame {sets[0].transform_id!r}; "
                "map them back to the identity frame first"
            )
        dets = sets[0] if sets else DetectionSet(pid)
        r = match_detections(dets, catalog.annotations_by_patch[pid], radius, threshold)
        out[pid] = Counts(r.tp, r.fp, r.fn)
    return out


def evaluate(
    catalog: CorpusCatalog,
    detections,
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
    fold_of_slide: Mapping[str, int] | None = None,
) -> EvalReport:
    """Match and score every patch of ``catalog``.

    The report breaks counts down per slide and per dataset, and per fold when
    ``fold_of_slide`` is given.
    """
    per_patch = patch_counts(catalog, detections, radius, threshold)
    return aggregate(catalog, per_patch, radius, threshold, fold_of_slide)


def aggregate(
    catalog: CorpusCatalog,
    per_patch: Mapping[str, Counts],
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
    fold_of_slide: Mapping[str, int] | None = None,
) -> EvalReport:
    breakdown: dict[str, dict[str, Counts]] = {"slide": {}, "dataset": {}}
    if fold_of_slide is not None:
        breakdown["fold"] = {}
    for pid, c in per_patch.items():
        sid = catalog.patches[pid].slide_id
        did = catalog.slides[sid].dataset_id
        breakdown["slide"][sid] = breakdown["slide"].get(sid, Counts()) + c
        breakdown["dataset"][did] = breakdown["dataset"].get(did, Counts()) + c
        if fold_of_slide is not None:
            key = str(fold_of_slide[sid])
            breakdown["fold"][key] = breakdown["fold"].get(key, Counts()) + c
    return score(list(per_patch.values()), threshold, radius, breakdown)


def sweep_threshold(
    catalog: CorpusCatalog,
    detections,
    radius: float = DEFAULT_RADIUS,
    thresholds: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> list[tuple[float, EvalReport]]:
    """Evaluate at each confidence cutoff (inclusive)."""
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ConfigError("thresholds must be sorted ascending")
    out = []
    for t in thresholds:
        per_patch = patch_counts(catalog, detections, radius, t)
        out.append((t, score(list(per_patch.values()), t, radius)))
    return out


# -- file formats ----------------------------------------------------------


def write_detections(sets: Iterable[DetectionSet], path: str | Path) -> None:
    """One JSON object per detection, in the order given."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            for d in s.detections:
                row = {
                    "patch_id": s.patch_id,
                    "x": d.x,
                    "y": d.y,
                    "confidence": d.confidence,
                    "model_id": s.model_id,
                    "transform_id": s.transform_id,
                }
                if s.view_id != s.transform_id:
                    row["view_id"] = s.view_id
                fh.write(json.dumps(row, sort_keys=True) + "\n")


_REQUIRED = ("patch_id", "x", "y", "confidence", "model_id", "transform_id")


def read_detections(path: str | Path) -> list[DetectionSet]:
    """Group a detection file into sets keyed by (patch, model, frame, view).

    Sets come back sorted by that key; detections keep file order.
    """
    groups: dict[tuple[str, str, str, str], list[Detection]] = {}
    for lineno, obj in iter_jsonl(path):
        if not isinstance(obj, dict):
            raise DataError("detection record must be a JSON object", lineno)
        missing = [k for k in _REQUIRED if k not in obj]
        if missing:
            raise DataError(f"detection record missing fields {missing}", lineno)
        try:
            det = Detection(float(obj["x"]), float(obj["y"]), float(obj["confidence"]))
        except (TypeError, ValueError) as exc:
            raise DataError(str(exc), lineno) from None
        key = (
            str(obj["patch_id"]),
            str(obj["model_id"]),
            str(obj["transform_id"]),
            str(obj.get("view_id", obj["transform_id"])),
        )
        groups.setdefault(key, []).append(det)
    return [
        DetectionSet(pid, tuple(dets), model, frame, view)
        for (pid, model, frame, view), dets in sorted(groups.items())
    ]


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    fields = ["level", "key", "tp", "fp", "fn", "precision", "recall", "f1"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        writer.writerow(["overall", "all", *_row(report.counts)])
        for level in sorted(report.breakdown):
            for key, c in sorted(report.breakdown[level].items()):
                writer.writerow([level, key, *_row(c)])


def _row(c: Counts) -> list:
    return [c.tp, c.fp, c.fn, f"{c.precision:.6f}", f"{c.recall:.6f}", f"{c.f1:.6f}"]
