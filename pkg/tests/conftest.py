import sys

import numpy as np
import pytest

from mitokit.catalog import (
    Annotation,
    CorpusCatalog,
    DatasetKind,
    DatasetRecord,
    Label,
    PatchRecord,
    SlideRecord,
)


def build_catalog(layout, size=(1920, 1280), negative=()):
    """Catalog from ``{dataset: {slide: [patch_spec, ...]}}``.

    A patch spec is ``(n_mf, n_nmf)``; annotation points are placed on a
    deterministic grid inside the patch.
    """
    datasets, slides, patches, annotations = [], [], [], []
    for d, slide_map in layout.items():
        kind = DatasetKind.NEGATIVE_ONLY if d in negative else DatasetKind.MF_ANNOTATED
        datasets.append(DatasetRecord(d, d.upper(), kind))
        for s, specs in slide_map.items():
            slides.append(SlideRecord(s, d, (f"tumor:{d}",)))
            for i, (n_mf, n_nmf) in enumerate(specs):
                pid = f"{s}-p{i}"
                patches.append(PatchRecord(pid, s, (0, 0), size, Label.MF if n_mf else Label.NMF))
                for j, label in enumerate([Label.MF] * n_mf + [Label.NMF] * n_nmf):
                    xy = (100 + 150 * j, 100 + 50 * j)
                    annotations.append(Annotation(f"{pid}-a{j}", pid, xy, label))
    return CorpusCatalog.from_records(datasets, slides, patches, annotations)


def random_catalog(rng: np.random.Generator, n_datasets=None, max_slides=8, max_patches=6):
    layout = {}
    n_datasets = n_datasets or int(rng.integers(1, 5))
    negative = set()
    for d in range(n_datasets):
        did = f"d{d}"
        neg = rng.random() < 0.25
        if neg:
            negative.add(did)
        layout[did] = {
            f"{did}s{s}": [
                (0 if neg else int(rng.integers(0, 3)), int(rng.integers(0, 3)))
                for _ in range(int(rng.integers(1, max_patches + 1)))
            ]
            for s in range(int(rng.integers(1, max_slides + 1)))
        }
    return build_catalog(layout, negative=negative)


@pytest.fixture
def small_catalog():
    return build_catalog(
        {
            "a": {"a1": [(1, 0), (0, 1)], "a2": [(2, 1)]},
            "b": {"b1": [(0, 0), (0, 2)]},
        }
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
