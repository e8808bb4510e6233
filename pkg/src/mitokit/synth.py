"""Seeded synthetic corpora for tests, demos and benchmarks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mitokit.catalog import (
    DEFAULT_PATCH_SIZE,
    Annotation,
    CorpusCatalog,
    DatasetKind,
    DatasetRecord,
    Label,
    PatchRecord,
    SlideRecord,
)


@dataclass(frozen=True)
class DatasetSpec:
    id: str
    name: str
    kind: DatasetKind = DatasetKind.MF_ANNOTATED
    n_slides: int = 10
    patches_per_slide: tuple[int, int] = (5, 15)
    mf_patch_fraction: float = 0.4
    mf_per_patch: tuple[int, int] = (1, 3)
    nmf_per_patch: tuple[int, int] = (0, 2)
    tumor_types: tuple[str, ...] = ("unspecified",)
    scanners: tuple[str, ...] = ("scanner_a",)
    species: str = "human"


# Source structure of the training corpus: four mitosis-annotated sets and two
# negative-only tissue collections. Sizes are synthetic and deliberately unequal.
SIX_SOURCES = (
    DatasetSpec("midogpp", "MIDOG++", n_slides=40, patches_per_slide=(6, 14),
                tumor_types=("breast_carcinoma", "lung_carcinoma", "lymphoma", "melanoma",
                             "mast_cell_tumor", "soft_tissue_sarcoma", "neuroendocrine"),
                scanners=("hamamatsu_xr", "hamamatsu_s360", "aperio_cs2", "3dhistech")),
    DatasetSpec("ccmct", "CCMCT", n_slides=12, patches_per_slide=(15, 30),
                tumor_types=("mast_cell_tumor",), scanners=("aperio_cs2",), species="canine"),
    DatasetSpec("cmc", "CMC", n_slides=8, patches_per_slide=(15, 30),
                tumor_types=("mammary_carcinoma",), scanners=("aperio_cs2",), species="canine"),
    DatasetSpec("tupac16", "TUPAC16", n_slides=20, patches_per_slide=(3, 8),
                tumor_types=("breast_carcinoma",), scanners=("aperio_cs2", "leica_scn400")),
    DatasetSpec("spider", "SPIDER", kind=DatasetKind.NEGATIVE_ONLY, n_slides=15,
                patches_per_slide=(4, 10), mf_patch_fraction=0.0, nmf_per_patch=(0, 1),
                tumor_types=("necrosis",), scanners=("unknown",)),
    DatasetSpec("nct_crc", "NCT-CRC-HE-100K", kind=DatasetKind.NEGATIVE_ONLY, n_slides=25,
                patches_per_slide=(2, 6), mf_patch_fraction=0.0, nmf_per_patch=(0, 1),
                tumor_types=("debris",), scanners=("aperio_at2",)),
)


def synthetic_catalog(
    seed: int = 0,
    sources=SIX_SOURCES,
    patch_size: tuple[int, int] = DEFAULT_PATCH_SIZE,
    scale: float = 1.0,
) -> CorpusCatalog:
    """Random catalog following ``sources``; ``scale`` multiplies slide counts."""
    rng = np.random.default_rng(seed)
    w, h = patch_size
    datasets, slides, patches, annotations = [], [], [], []
    for spec in sources:
        datasets.append(DatasetRecord(spec.id, spec.name, spec.kind))
        n_slides = max(1, int(round(spec.n_slides * scale)))
        for si in range(n_slides):
            sid = f"{spec.id}/s{si:04d}"
            tags = (
                f"tumor:{spec.tumor_types[si % len(spec.tumor_types)]}",
                f"scanner:{spec.scanners[int(rng.integers(len(spec.scanners)))]}",
                f"species:{spec.species}",
            )
            slides.append(SlideRecord(sid, spec.id, tags))
            lo, hi = spec.patches_per_slide
            for pi in range(int(rng.integers(lo, hi + 1))):
                pid = f"{sid}/p{pi:04d}"
                is_mf = spec.kind is DatasetKind.MF_ANNOTATED and rng.random() < spec.mf_patch_fraction
                n_mf = int(rng.integers(spec.mf_per_patch[0], spec.mf_per_patch[1] + 1)) if is_mf else 0
                n_nmf = int(rng.integers(spec.nmf_per_patch[0], spec.nmf_per_patch[1] + 1))
                origin = (int(rng.integers(0, 100_000)), int(rng.integers(0, 80_000)))
                patches.append(
                    PatchRecord(pid, sid, origin, (w, h), Label.MF if n_mf else Label.NMF)
                )
                for ai, label in enumerate([Label.MF] * n_mf + [Label.NMF] * n_nmf):
                    # keep a margin so jittered detections rarely clip at the border
                    x = int(rng.integers(32, w - 32)) if w > 64 else int(rng.integers(0, w))
                    y = int(rng.integers(32, h - 32)) if h > 64 else int(rng.integers(0, h))
                    annotations.append(Annotation(f"{pid}/a{ai:02d}", pid, (x, y), label))
    return CorpusCatalog.from_records(datasets, slides, patches, annotations)


def dense_catalog(n_patches: int, seed: int = 0, slides: int = 200, mf_fraction: float = 0.5,
                  patch_size: tuple[int, int] = DEFAULT_PATCH_SIZE) -> CorpusCatalog:
    """Single-dataset catalog with exactly ``n_patches`` patches spread over ``slides`` slides.

    MF patches hold one to three MF points; used for calibration and benchmarks.
    """
    rng = np.random.default_rng(seed)
    w, h = patch_size
    ds = DatasetRecord("synthetic", "synthetic")
    sl = [SlideRecord(f"s{i:05d}", ds.id, (f"tumor:t{i % 7}",)) for i in range(slides)]
    patches, annotations = [], []
    for i in range(n_patches):
        pid = f"p{i:06d}"
        sid = sl[i % slides].id
        n_mf = int(rng.integers(1, 4)) if rng.random() < mf_fraction else 0
        patches.append(PatchRecord(pid, sid, (0, 0), (w, h), Label.MF if n_mf else Label.NMF))
        for k in range(n_mf):
            x, y = int(rng.integers(32, w - 32)), int(rng.integers(32, h - 32))
            annotations.append(Annotation(f"{pid}/a{k}", pid, (x, y), Label.MF))
    return CorpusCatalog.from_records([ds], sl, patches, annotations)
