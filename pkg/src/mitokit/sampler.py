"""Hierarchical balanced sampling over a corpus catalog.

Each patch gets a weight that is the product of three factors:

* dataset factor ``(1/|d|) / sum_j (1/|d_j|)`` where ``|d|`` is the number of
  patches in the patch's dataset,
* image factor ``(1/|m|) / sum_k (1/|m_k|)`` where ``|m|`` is the number of
  annotations on the patch's slide (floored at 1) and the sum runs over every
  slide of the catalog,
* class factor ``1 / N_c`` where ``N_c`` is the number of patches sharing the
  patch's class.

Batches are drawn i.i.d. proportional to the combined weight through a Vose
alias table, so balance holds in expectation rather than per batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from mitokit.catalog import CorpusCatalog, Label
from mitokit.errors import ConfigError, DataError

FACTORS = ("dataset", "image", "class")
IMAGE_NORMS = ("global", "per_dataset")


class AliasTable:
    """Vose alias table for O(1) weighted draws over ``len(weights)`` items.

    Weights need not be normalized; only their ratios matter.
    """

    def __init__(self, weights: Sequence[float]):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("at least one weight must be positive")
        n = w.size
        scaled = w * (n / total)
        prob = np.ones(n, dtype=np.float64)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        # leftovers are 1 up to rounding
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return self.prob.size

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` indices with replacement."""
        column = rng.integers(0, self.prob.size, size=size)
        coin = rng.random(size)
        return np.where(coin < self.prob[column], column, self.alias[column])


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 24
    with_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True, eq=False)
class SamplingPlan:
    """Factor tables and per-patch combined weights.

    ``patch_ids`` is sorted; ``weights[i]`` is the combined weight of
    ``patch_ids[i]``. ``groups`` keeps each patch's (dataset, slide, class)
    so marginals can be computed without the catalog.
    """

    dataset_weights: Mapping[str, float]
    image_weights: Mapping[str, float]
    class_weights: Mapping[str, float]
    patch_ids: tuple[str, ...]
    weights: np.ndarray
    patch_dataset: tuple[str, ...]
    patch_class: tuple[str, ...]
    factors: tuple[str, ...] = FACTORS
    image_norm: str = "global"
    _alias: AliasTable | None = field(default=None, repr=False)

    @property
    def combined(self) -> dict[str, float]:
        return dict(zip(self.patch_ids, self.weights.tolist()))

    @property
    def alias_table(self) -> AliasTable:
        if self._alias is None:
            object.__setattr__(self, "_alias", AliasTable(self.weights))
        return self._alias

    def to_json(self) -> dict:
        return {
            "factors": list(self.factors),
            "image_norm": self.image_norm,
            "dataset_weights": dict(sorted(self.dataset_weights.items())),
            "image_weights": dict(sorted(self.image_weights.items())),
            "class_weights": dict(sorted(self.class_weights.items())),
            "combined": self.combined,
        }


def dataset_weights(catalog: CorpusCatalog) -> dict[str, float]:
    """Inverse-size dataset weights normalized to sum to one."""
    sizes = catalog.counts.dataset_sizes
    if not sizes:
        raise DataError("catalog has no datasets")
    for d, n in sorted(sizes.items()):
        if n == 0:
            raise DataError(f"dataset {d!r} has no patches; its inverse-size weight is undefined")
    inv = {d: 1.0 / n for d, n in sizes.items()}
    total = sum(inv[d] for d in sorted(inv))
    return {d: inv[d] / total for d in sorted(inv)}


def image_weights(catalog: CorpusCatalog, norm: str = "global") -> dict[str, float]:
    """Inverse-annotation-count slide weights.

    Slides without annotations count as having one. With ``norm="global"``
    the weights sum to one over all slides; ``"per_dataset"`` normalizes
    within each dataset instead (each dataset's slides sum to one).
    """
    if norm not in IMAGE_NORMS:
        raise ConfigError(f"image_norm must be one of {IMAGE_NORMS}, got {norm!r}")
    counts = catalog.counts.slide_annotations
    if not counts:
        raise DataError("catalog has no slides")
    inv = {s: 1.0 / max(n, 1) for s, n in counts.items()}
    if norm == "global":
        total = sum(inv[s] for s in sorted(inv))
        return {s: inv[s] / total for s in sorted(inv)}
    totals: dict[str, float] = {}
    for s in sorted(inv):
        d = catalog.slides[s].dataset_id
        totals[d] = totals.get(d, 0.0) + inv[s]
    return {s: inv[s] / totals[catalog.slides[s].dataset_id] for s in sorted(inv)}


def class_weights(catalog: CorpusCatalog) -> dict[str, float]:
    """``1 / N_c`` for each patch class. Both classes must be present."""
    sizes = catalog.counts.class_sizes
    for c in (Label.MF, Label.NMF):
        if sizes.get(c, 0) == 0:
            raise DataError(f"class {c.value} has no patches; its weight is undefined")
    return {c.value: 1.0 / sizes[c] for c in (Label.MF, Label.NMF)}


def build_plan(
    catalog: CorpusCatalog,
    factors: Iterable[str] = FACTORS,
    image_norm: str = "global",
) -> SamplingPlan:
    """Combine the three factor tables into per-patch weights.

    ``factors`` selects which factors enter the product; a disabled factor
    contributes 1. Factor tables are always reported in full when they can be
    computed. The product is evaluated as ``w_dataset * w_image * w_class``
    in that order.
    """
    factors = tuple(factors)
    unknown = set(factors) - set(FACTORS)
    if unknown:
        raise ConfigError(f"unknown sampling factors {sorted(unknown)}")
    if not catalog.patches:
        raise DataError("catalog has no patches to sample")

    wd = dataset_weights(catalog) if "dataset" in factors else {}
    wi = image_weights(catalog, image_norm) if "image" in factors else {}
    if "class" in factors:
        wc = class_weights(catalog)
    else:
        wc = {}

    ids = tuple(sorted(catalog.patches))
    weights = np.empty(len(ids), dtype=np.float64)
    p_dataset, p_class = [], []
    for i, pid in enumerate(ids):
        patch = catalog.patches[pid]
        slide = catalog.slides[patch.slide_id]
        a = wd[slide.dataset_id] if wd else 1.0
        b = wi[slide.id] if wi else 1.0
        c = wc[patch.class_label.value] if wc else 1.0
        weights[i] = a * b * c
        p_dataset.append(slide.dataset_id)
        p_class.append(patch.class_label.value)
    weights.setflags(write=False)
    return SamplingPlan(wd, wi, wc, ids, weights, tuple(p_dataset), tuple(p_class), factors, image_norm)


def weighted_draw(
    ids: Sequence[str],
    weights: Sequence[float] | np.ndarray,
    spec: BatchSpec,
    table: AliasTable | None = None,
) -> list[str]:
    """Draw ``spec.batch_size`` ids proportional to ``weights``.

    Deterministic in ``(ids, weights, spec)``; weights are normalized
    internally so any positive rescaling gives the same draw.
    """
    rng = np.random.default_rng(spec.seed)
    w = np.asarray(weights, dtype=np.float64)
    if spec.with_replacement:
        table = table or AliasTable(w)
        idx = table.sample(rng, spec.batch_size)
    else:
        positive = int(np.count_nonzero(w > 0))
        if spec.batch_size > positive:
            raise ConfigError(
                f"cannot draw {spec.batch_size} patches without replacement from "
                f"{positive} with positive weight"
            )
        # Efraimidis-Spirakis: the k largest u**(1/w) keys form a weighted sample without replacement
        u = rng.random(w.size)
        with np.errstate(divide="ignore"):
            keys = np.where(w > 0, np.log(u) / np.where(w > 0, w / w.max(), 1.0), -np.inf)
        idx = np.argsort(-keys, kind="stable")[: spec.batch_size]
    return [ids[i] for i in idx]


def draw_batch(plan: SamplingPlan, spec: BatchSpec) -> list[str]:
    """Draw one batch of patch ids from ``plan``."""
    table = plan.alias_table if spec.with_replacement else None
    return weighted_draw(plan.patch_ids, plan.weights, spec, table)


def expected_marginals(plan: SamplingPlan) -> dict[str, dict[str, float]]:
    """Expected draw probability per dataset and per class."""
    p = plan.weights / plan.weights.sum()
    by_dataset: dict[str, float] = {}
    by_class: dict[str, float] = {}
    for prob, d, c in zip(p.tolist(), plan.patch_dataset, plan.patch_class):
        by_dataset[d] = by_dataset.get(d, 0.0) + prob
        by_class[c] = by_class.get(c, 0.0) + prob
    return {"dataset": dict(sorted(by_dataset.items())), "class": dict(sorted(by_class.items()))}


def empirical_marginals(plan: SamplingPlan, drawn: Iterable[str]) -> dict[str, dict[str, float]]:
    """Observed per-dataset and per-class frequencies of ``drawn`` patch ids."""
    index = {pid: i for i, pid in enumerate(plan.patch_ids)}
    idx = np.fromiter((index[p] for p in drawn), dtype=np.int64)
    return _marginals_from_indices(plan, idx)


def _marginals_from_indices(plan: SamplingPlan, idx: np.ndarray) -> dict[str, dict[str, float]]:
    n = idx.size
    hits = np.bincount(idx, minlength=len(plan.patch_ids)).astype(np.float64) / max(n, 1)
    by_dataset: dict[str, float] = {}
    by_class: dict[str, float] = {}
    for f, d, c in zip(hits.tolist(), plan.patch_dataset, plan.patch_class):
        by_dataset[d] = by_dataset.get(d, 0.0) + f
        by_class[c] = by_class.get(c, 0.0) + f
    return {"dataset": dict(sorted(by_dataset.items())), "class": dict(sorted(by_class.items()))}


def monte_carlo_marginals(plan: SamplingPlan, n_draws: int, seed: int) -> dict[str, dict[str, float]]:
    """Empirical marginals over ``n_draws`` alias-table draws."""
    rng = np.random.default_rng(seed)
    return _marginals_from_indices(plan, plan.alias_table.sample(rng, n_draws))


def dump_plan(plan: SamplingPlan, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_json(), fh, indent=1, sort_keys=True)
