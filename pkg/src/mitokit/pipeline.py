"""End-to-end evaluation over cross-validation folds and a stage-timing benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mitokit.catalog import CorpusCatalog, PatchRecord
from mitokit.detector import Detector, TimingStats, batch_detect
from mitokit.errors import ConfigError
from mitokit.evaluator import (
    DEFAULT_RADIUS,
    Counts,
    DetectionSet,
    EvalReport,
    aggregate,
    match_detections,
    score,
)
from mitokit.splitter import FoldAssignment, fold_view
from mitokit.tta import FusionConfig, GeomTransform, back_transform, fuse_detections


def detect_and_fuse(
    patch: PatchRecord,
    detectors: Sequence[Detector],
    views: Sequence[str],
    fusion: FusionConfig,
) -> DetectionSet:
    """Run every detector on every view of ``patch`` and fuse in the patch frame."""
    sets = []
    for det in detectors:
        for kind in views:
            view = GeomTransform(kind, patch.size_wh)
            sets.append(back_transform(det.detect(patch, view), view))
    return fuse_detections(sets, fusion, n_sources=len(detectors) * len(views))


@dataclass
class End2EndResult:
    folds: dict[int, EvalReport] = field(default_factory=dict)
    pooled: EvalReport | None = None
    fused: dict[str, DetectionSet] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "folds": {str(f): r.to_json() for f, r in sorted(self.folds.items())},
            "fold_f1": {str(f): r.f1 for f, r in sorted(self.folds.items())},
            "pooled": self.pooled.to_json() if self.pooled else None,
        }


def run_end2end(
    catalog: CorpusCatalog,
    assignment: FoldAssignment,
    detectors: Sequence[Detector],
    views: Sequence[str] = ("identity",),
    fusion: FusionConfig = FusionConfig(),
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
    keep_detections: bool = False,
) -> End2EndResult:
    """Detect, fuse and evaluate each validation fold; pool counts across folds."""
    if not detectors:
        raise ConfigError("at least one detector is required")
    if not views:
        raise ConfigError("at least one view is required")
    out = End2EndResult()
    pooled: list[Counts] = []
    for fold in range(assignment.k):
        _, val = fold_view(catalog, assignment, fold)
        per_patch = {}
        for pid in sorted(val.patches):
            fused = detect_and_fuse(val.patches[pid], detectors, views, fusion)
            r = match_detections(fused, val.annotations_by_patch[pid], radius, threshold)
            per_patch[pid] = Counts(r.tp, r.fp, r.fn)
            if keep_detections:
                out.fused[pid] = fused
        out.folds[fold] = aggregate(val, per_patch, radius, threshold)
        pooled.extend(per_patch.values())
    out.pooled = score(pooled, threshold, radius)
    return out


STAGES = ("detect", "back_transform", "fuse", "match")


@dataclass
class BenchReport:
    n_patches: int
    n_sources: int
    stages: dict[str, TimingStats]
    batch: TimingStats
    report: EvalReport

    @property
    def overhead_ms_per_patch(self) -> float:
        """Mean time per patch spent outside the detector."""
        return sum(self.stages[s].mean_ms for s in STAGES if s != "detect")

    def to_json(self) -> dict:
        return {
            "n_patches": self.n_patches,
            "n_sources": self.n_sources,
            "stages": {s: self.stages[s].as_dict() for s in STAGES},
            "overhead_ms_per_patch": self.overhead_ms_per_patch,
            "batch_detect": self.batch.as_dict(),
            "f1": self.report.f1,
        }


def run_bench(
    catalog: CorpusCatalog,
    detectors: Sequence[Detector],
    views: Sequence[str] = ("identity",),
    fusion: FusionConfig = FusionConfig(),
    radius: float = DEFAULT_RADIUS,
    threshold: float = 0.0,
    parallelism: int = 1,
    limit: int | None = None,
) -> BenchReport:
    """Time each pipeline stage per patch, then time a plain batch detection pass."""
    pids = sorted(catalog.patches)[:limit]
    samples = {s: np.empty(len(pids)) for s in STAGES}
    per_patch = {}
    wall0 = time.perf_counter()
    clock = time.perf_counter
    for i, pid in enumerate(pids):
        patch = catalog.patches[pid]
        t_detect = t_back = 0.0
        sets = []
        for det in detectors:
            for kind in views:
                view = GeomTransform(kind, patch.size_wh)
                t0 = clock()
                raw = det.detect(patch, view)
                t1 = clock()
                sets.append(back_transform(raw, view))
                t2 = clock()
                t_detect += t1 - t0
                t_back += t2 - t1
        t0 = clock()
        fused = fuse_detections(sets, fusion, n_sources=len(detectors) * len(views))
        t1 = clock()
        r = match_detections(fused, catalog.annotations_by_patch[pid], radius, threshold)
        t2 = clock()
        per_patch[pid] = Counts(r.tp, r.fp, r.fn)
        samples["detect"][i] = t_detect
        samples["back_transform"][i] = t_back
        samples["fuse"][i] = t1 - t0
        samples["match"][i] = t2 - t1
    wall = time.perf_counter() - wall0
    stages = {s: TimingStats.from_samples(samples[s], wall) for s in STAGES}

    batch = batch_detect(detectors[0], [catalog.patches[p] for p in pids], parallelism)
    return BenchReport(len(pids), len(detectors) * len(views), stages, batch.timing,
                       score(list(per_patch.values()), threshold, radius))
