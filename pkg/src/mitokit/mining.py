"""Hard-negative mining: detections on regions that cannot hold mitoses become NMF annotations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mitokit.catalog import (
    Annotation,
    AnnotationSource,
    CorpusCatalog,
    DatasetKind,
    Label,
)
from mitokit.detector import Detector
from mitokit.errors import ConfigError

DEDUP_GRID_PX = 4


@dataclass(frozen=True)
class MiningConfig:
    """``region_tags`` additionally targets slides carrying any of these domain tags."""

    confidence_floor: float = 0.25
    target_dataset_kinds: frozenset[DatasetKind] = frozenset({DatasetKind.NEGATIVE_ONLY})
    region_tags: frozenset[str] = frozenset()
    label_assigned: Label = Label.NMF

    def __post_init__(self):
        if not 0.0 < self.confidence_floor < 1.0:
            raise ConfigError(f"confidence_floor must lie in (0, 1), got {self.confidence_floor}")
        if self.label_assigned is not Label.NMF:
            raise ConfigError("mined annotations are always NMF")
        object.__setattr__(self, "target_dataset_kinds", frozenset(DatasetKind(k) for k in self.target_dataset_kinds))
        object.__setattr__(self, "region_tags", frozenset(self.region_tags))


@dataclass
class MiningResult:
    annotations: list[Annotation] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    duplicates_skipped: int = 0


def target_patches(catalog: CorpusCatalog, config: MiningConfig) -> list[str]:
    """Sorted ids of patches eligible for mining."""
    out = []
    for pid in sorted(catalog.patches):
        slide = catalog.slides[catalog.patches[pid].slide_id]
        kind = catalog.datasets[slide.dataset_id].kind
        if kind in config.target_dataset_kinds or config.region_tags.intersection(slide.domain_tags):
            out.append(pid)
    return out


def dedup_key(patch_id: str, x: float, y: float, model_id: str | None) -> tuple:
    return patch_id, int(np.floor(x / DEDUP_GRID_PX + 0.5)), int(np.floor(y / DEDUP_GRID_PX + 0.5)), model_id


def mine_hard_negatives(
    catalog: CorpusCatalog,
    detector: Detector,
    config: MiningConfig = MiningConfig(),
) -> MiningResult:
    """Convert detections at or above the confidence floor on target patches into NMF annotations.

    Candidates that collide (same patch, same 4 px grid cell, same model) with
    each other or with an annotation already in the catalog are skipped, so
    re-mining after a merge adds nothing. Patches whose detection raises are
    reported in ``failures``; the rest are still mined. Output is sorted by
    patch id and then position.
    """
    seen = {
        dedup_key(a.patch_id, *a.center_xy, a.model_id)
        for a in catalog.annotations.values()
        if a.source is AnnotationSource.MINED_HARD_NEGATIVE
    }
    result = MiningResult()
    for pid in target_patches(catalog, config):
        patch = catalog.patches[pid]
        if catalog.mf_points(pid):
            # a whitelisted region tag must not turn real mitoses into negatives
            continue
        try:
            found = detector.detect(patch)
        except Exception as exc:  # noqa: BLE001 - partial-failure contract
            result.failures[pid] = f"{type(exc).__name__}: {exc}"
            continue
        w, h = patch.size_wh
        for d in sorted(found.detections, key=lambda d: (d.x, d.y, -d.confidence)):
            if d.confidence < config.confidence_floor:
                continue
            x = int(min(max(round(d.x), 0), w - 1))
            y = int(min(max(round(d.y), 0), h - 1))
            key = dedup_key(pid, x, y, detector.model_id)
            if key in seen:
                result.duplicates_skipped += 1
                continue
            seen.add(key)
            result.annotations.append(
                Annotation(
                    id=f"mined:{detector.model_id}:{pid}:{x}:{y}",
                    patch_id=pid,
                    center_xy=(x, y),
                    label=Label.NMF,
                    source=AnnotationSource.MINED_HARD_NEGATIVE,
                    confidence=float(d.confidence),
                    model_id=detector.model_id,
                )
            )
    return result


def mining_report(annotations: list[Annotation], catalog: CorpusCatalog, bins: int = 10) -> dict:
    """Per-dataset and per-slide counts and a confidence histogram over ``[0, 1]``."""
    per_dataset: dict[str, int] = {}
    per_slide: dict[str, int] = {}
    confidences = []
    for a in annotations:
        sid = catalog.patches[a.patch_id].slide_id
        did = catalog.slides[sid].dataset_id
        per_dataset[did] = per_dataset.get(did, 0) + 1
        per_slide[sid] = per_slide.get(sid, 0) + 1
        if a.confidence is not None:
            confidences.append(a.confidence)
    counts, edges = np.histogram(confidences, bins=bins, range=(0.0, 1.0))
    return {
        "n_mined": len(annotations),
        "per_dataset": dict(sorted(per_dataset.items())),
        "per_slide": dict(sorted(per_slide.items())),
        "confidence_histogram": {
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
    }
