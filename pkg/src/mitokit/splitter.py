"""Grouped, stratified k-fold assignment at slide granularity."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from mitokit.catalog import CorpusCatalog, SlideRecord
from mitokit.errors import ConfigError, DataError


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    strata_key: str | None
    fold_of_slide: Mapping[str, int]

    def slides_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_of_slide.items() if f == fold)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "strata_key": self.strata_key,
            "fold_of_slide": dict(sorted(self.fold_of_slide.items())),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldAssignment":
        try:
            k = int(obj["k"])
            folds = {str(s): int(f) for s, f in obj["fold_of_slide"].items()}
            out = cls(k, int(obj["seed"]), obj.get("strata_key"), folds)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fold file: {exc}") from None
        bad = [s for s, f in folds.items() if not 0 <= f < k]
        if bad:
            raise DataError(f"fold index out of range for slides {bad[:5]}")
        return out


def stratum_of(slide: SlideRecord, strata_key: str | None) -> tuple[str, str]:
    """``(dataset_id, tag)`` where tag is the first domain tag starting with ``strata_key``.

    With ``strata_key=None`` or no matching tag the tag part is ``""``.
    """
    if strata_key is not None:
        for tag in slide.domain_tags:
            if tag.startswith(strata_key):
                return slide.dataset_id, tag
    return slide.dataset_id, ""


def grouped_stratified_split(
    catalog: CorpusCatalog,
    k: int = 5,
    strata_key: str | None = None,
    seed: int = 0,
) -> FoldAssignment:
    """Assign every slide to one of ``k`` folds.

    Strata are visited largest first (ties by key) and their slides, shuffled
    with ``seed``, are dealt round-robin. The dealing position carries over
    between strata, so both per-stratum and total fold sizes differ by at
    most one.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    n = len(catalog.slides)
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of slides ({n})")

    strata: dict[tuple[str, str], list[str]] = {}
    for sid in sorted(catalog.slides):
        strata.setdefault(stratum_of(catalog.slides[sid], strata_key), []).append(sid)

    rng = np.random.default_rng(seed)
    order = sorted(strata, key=lambda key: (-len(strata[key]), key))
    fold_order = rng.permutation(k)
    cursor = 0
    fold_of_slide = {}
    for key in order:
        members = strata[key]
        for i in rng.permutation(len(members)):
            fold_of_slide[members[i]] = int(fold_order[cursor % k])
            cursor += 1
    return FoldAssignment(k, seed, strata_key, fold_of_slide)


def fold_view(
    catalog: CorpusCatalog, assignment: FoldAssignment, fold: int
) -> tuple[CorpusCatalog, CorpusCatalog]:
    """``(train, validation)`` catalogs for ``fold``; validation holds that fold's slides."""
    if not 0 <= fold < assignment.k:
        raise ConfigError(f"fold must be in [0, {assignment.k}), got {fold}")
    missing = sorted(set(catalog.slides) - set(assignment.fold_of_slide))
    if missing:
        raise DataError(f"fold assignment does not cover slides {missing[:5]}")
    val = [s for s in catalog.slides if assignment.fold_of_slide[s] == fold]
    train = [s for s in catalog.slides if assignment.fold_of_slide[s] != fold]
    return catalog.subset(train), catalog.subset(val)


def stratum_fold_counts(
    catalog: CorpusCatalog, assignment: FoldAssignment
) -> dict[tuple[str, str], list[int]]:
    """Number of slides of each stratum in each fold."""
    out: dict[tuple[str, str], list[int]] = {}
    for sid, f in assignment.fold_of_slide.items():
        key = stratum_of(catalog.slides[sid], assignment.strata_key)
        out.setdefault(key, [0] * assignment.k)[f] += 1
    return out


def save_folds(assignment: FoldAssignment, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(assignment.to_json(), fh, indent=1, sort_keys=True)


def load_folds(path: str | Path) -> FoldAssignment:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"fold file is not valid JSON: {exc.msg}", exc.lineno) from None
    return FoldAssignment.from_json(obj)
