"""Corpus data model: datasets, slides, patches and point annotations.

A :class:`CorpusCatalog` is an immutable value. Operations that change it
(:func:`merge_annotations`) return a new catalog and leave the input as is.
Catalogs are read from and written to JSON-lines manifests validated against
``schemas/manifest.schema.json``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import jsonschema

from mitokit.errors import DataError, IntegrityError

DEFAULT_PATCH_SIZE = (1920, 1280)


class Label(str, enum.Enum):
    MF = "MF"
    NMF = "NMF"


class DatasetKind(str, enum.Enum):
    MF_ANNOTATED = "mf_annotated"
    NEGATIVE_ONLY = "negative_only"


class AnnotationSource(str, enum.Enum):
    ORIGINAL = "original"
    MINED_HARD_NEGATIVE = "mined_hard_negative"


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    name: str
    kind: DatasetKind = DatasetKind.MF_ANNOTATED


@dataclass(frozen=True)
class SlideRecord:
    id: str
    dataset_id: str
    domain_tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class PatchRecord:
    id: str
    slide_id: str
    origin_xy: tuple[int, int] = (0, 0)
    size_wh: tuple[int, int] = DEFAULT_PATCH_SIZE
    class_label: Label = Label.NMF
    pixel_source: str | None = None

    def __post_init__(self):
        if self.size_wh[0] <= 0 or self.size_wh[1] <= 0:
            raise IntegrityError(f"patch {self.id!r} has non-positive size {self.size_wh}", self.id)

    def contains(self, x: float, y: float) -> bool:
        """True if ``(x, y)`` lies inside the pixel grid of this patch."""
        w, h = self.size_wh
        return 0 <= x <= w - 1 and 0 <= y <= h - 1


@dataclass(frozen=True)
class Annotation:
    """A point annotation inside one patch.

    ``confidence`` and ``model_id`` are only set for mined hard negatives and
    record the detection that produced them.
    """

    id: str
    patch_id: str
    center_xy: tuple[int, int]
    label: Label
    source: AnnotationSource = AnnotationSource.ORIGINAL
    confidence: float | None = None
    model_id: str | None = None


@dataclass(frozen=True)
class CatalogCounts:
    """Cached tallies used by the sampling weights.

    ``dataset_sizes`` counts patches per dataset, ``slide_annotations`` counts
    annotations (any label) per slide and ``class_sizes`` counts patches per
    patch-level class.
    """

    dataset_sizes: Mapping[str, int]
    slide_annotations: Mapping[str, int]
    class_sizes: Mapping[Label, int]


def _tally(datasets, slides, patches, annotations) -> CatalogCounts:
    dataset_sizes = {d: 0 for d in datasets}
    slide_annotations = {s: 0 for s in slides}
    class_sizes = {Label.MF: 0, Label.NMF: 0}
    for p in patches.values():
        dataset_sizes[slides[p.slide_id].dataset_id] += 1
        class_sizes[p.class_label] += 1
    for a in annotations.values():
        slide_annotations[patches[a.patch_id].slide_id] += 1
    return CatalogCounts(dataset_sizes, slide_annotations, class_sizes)


@dataclass(frozen=True, eq=False)
class CorpusCatalog:
    """Indexed, referentially consistent collection of corpus records.

    Build instances with :meth:`from_records`, which validates every
    invariant. Direct construction skips validation and is reserved for
    internal use.
    """

    datasets: Mapping[str, DatasetRecord]
    slides: Mapping[str, SlideRecord]
    patches: Mapping[str, PatchRecord]
    annotations: Mapping[str, Annotation]
    counts: CatalogCounts = field(repr=False, default=None)

    @classmethod
    def from_records(
        cls,
        datasets: Iterable[DatasetRecord] = (),
        slides: Iterable[SlideRecord] = (),
        patches: Iterable[PatchRecord] = (),
        annotations: Iterable[Annotation] = (),
        derive_labels: bool = False,
    ) -> "CorpusCatalog":
        """Validate records and build a catalog.

        With ``derive_labels=True`` patch class labels are recomputed from
        their annotations instead of being checked against them.
        """
        ds = _index(datasets, "dataset")
        sl = _index(slides, "slide")
        pa = _index(patches, "patch")
        an = _index(annotations, "annotation")

        for s in sl.values():
            if s.dataset_id not in ds:
                raise IntegrityError(
                    f"slide {s.id!r} references unknown dataset {s.dataset_id!r}", s.dataset_id
                )
        for p in pa.values():
            if p.slide_id not in sl:
                raise IntegrityError(
                    f"patch {p.id!r} references unknown slide {p.slide_id!r}", p.slide_id
                )
        has_mf = set()
        for a in an.values():
            _check_annotation(a, ds, sl, pa)
            if a.label is Label.MF:
                has_mf.add(a.patch_id)

        for pid, p in pa.items():
            expected = Label.MF if pid in has_mf else Label.NMF
            if p.class_label is not expected:
                if not derive_labels:
                    raise IntegrityError(
                        f"patch {pid!r} is labelled {p.class_label.value} but its annotations imply "
                        f"{expected.value}",
                        pid,
                    )
                pa[pid] = replace(p, class_label=expected)

        return cls(ds, sl, pa, an, _tally(ds, sl, pa, an))

    def __eq__(self, other):
        if not isinstance(other, CorpusCatalog):
            return NotImplemented
        return (
            dict(self.datasets) == dict(other.datasets)
            and dict(self.slides) == dict(other.slides)
            and dict(self.patches) == dict(other.patches)
            and dict(self.annotations) == dict(other.annotations)
        )

    def __len__(self):
        return len(self.patches)

    @cached_property
    def annotations_by_patch(self) -> dict[str, list[Annotation]]:
        out: dict[str, list[Annotation]] = {pid: [] for pid in self.patches}
        for a in sorted(self.annotations.values(), key=lambda a: a.id):
            out[a.patch_id].append(a)
        return out

    @cached_property
    def patches_by_slide(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {sid: [] for sid in self.slides}
        for pid in sorted(self.patches):
            out[self.patches[pid].slide_id].append(pid)
        return out

    def dataset_of_patch(self, patch_id: str) -> DatasetRecord:
        return self.datasets[self.slides[self.patches[patch_id].slide_id].dataset_id]

    def mf_points(self, patch_id: str) -> list[Annotation]:
        return [a for a in self.annotations_by_patch[patch_id] if a.label is Label.MF]

    def subset(self, slide_ids: Iterable[str]) -> "CorpusCatalog":
        """Catalog restricted to the given slides and everything under them.

        Datasets are kept only if at least one of their slides is kept.
        """
        keep = set(slide_ids)
        sl = {s: r for s, r in self.slides.items() if s in keep}
        ds = {d: r for d, r in self.datasets.items() if any(s.dataset_id == d for s in sl.values())}
        pa = {p: r for p, r in self.patches.items() if r.slide_id in keep}
        an = {a: r for a, r in self.annotations.items() if r.patch_id in pa}
        return CorpusCatalog(ds, sl, pa, an, _tally(ds, sl, pa, an))


def _index(records, what: str) -> dict:
    out = {}
    for r in records:
        if r.id in out:
            raise IntegrityError(f"duplicate {what} id {r.id!r}", r.id)
        out[r.id] = r
    return out


def _check_annotation(a: Annotation, ds, sl, pa) -> None:
    if a.patch_id not in pa:
        raise IntegrityError(f"annotation {a.id!r} references unknown patch {a.patch_id!r}", a.patch_id)
    patch = pa[a.patch_id]
    if not patch.contains(*a.center_xy):
        raise IntegrityError(
            f"annotation {a.id!r} center {a.center_xy} lies outside patch {patch.id!r} "
            f"of size {patch.size_wh}",
            a.id,
        )
    if a.label is Label.MF and ds[sl[patch.slide_id].dataset_id].kind is DatasetKind.NEGATIVE_ONLY:
        raise IntegrityError(
            f"annotation {a.id!r} labels an MF inside negative-only dataset "
            f"{sl[patch.slide_id].dataset_id!r}",
            a.id,
        )


def recount(catalog: CorpusCatalog) -> CatalogCounts:
    """Recompute all tallies from the record collections."""
    return _tally(catalog.datasets, catalog.slides, catalog.patches, catalog.annotations)


def merge_annotations(catalog: CorpusCatalog, new: Iterable[Annotation]) -> CorpusCatalog:
    """Return a new catalog with ``new`` annotations added.

    All-or-nothing: any invalid annotation raises and nothing is merged.
    Patches that gain an MF annotation become class MF. Counts are updated
    incrementally.
    """
    new = list(new)
    seen = set()
    for a in new:
        if a.id in catalog.annotations or a.id in seen:
            raise IntegrityError(f"duplicate annotation id {a.id!r}", a.id)
        seen.add(a.id)
        _check_annotation(a, catalog.datasets, catalog.slides, catalog.patches)

    annotations = dict(catalog.annotations)
    patches = dict(catalog.patches)
    slide_annotations = dict(catalog.counts.slide_annotations)
    class_sizes = dict(catalog.counts.class_sizes)
    for a in new:
        annotations[a.id] = a
        patch = patches[a.patch_id]
        slide_annotations[patch.slide_id] += 1
        if a.label is Label.MF and patch.class_label is Label.NMF:
            patches[a.patch_id] = replace(patch, class_label=Label.MF)
            class_sizes[Label.NMF] -= 1
            class_sizes[Label.MF] += 1
    counts = CatalogCounts(dict(catalog.counts.dataset_sizes), slide_annotations, class_sizes)
    return CorpusCatalog(dict(catalog.datasets), dict(catalog.slides), patches, annotations, counts)


# -- manifest I/O ----------------------------------------------------------


def _load_schema() -> dict:
    text = resources.files("mitokit").joinpath("schemas/manifest.schema.json").read_text("utf-8")
    return json.loads(text)


_VALIDATOR = None


def _validator():
    global _VALIDATOR
    if _VALIDATOR is None:
        schema = _load_schema()
        cls = jsonschema.validators.validator_for(schema)
        _VALIDATOR = cls(schema)
    return _VALIDATOR


def record_from_json(obj: dict, line: int | None = None):
    """Convert one validated manifest object into its record type."""
    errors = sorted(_validator().iter_errors(obj), key=lambda e: e.path)
    if errors:
        kind = obj.get("kind") if isinstance(obj, dict) else None
        if kind not in ("dataset", "slide", "patch", "annotation"):
            raise DataError(f"unknown record kind {kind!r}", line)
        # oneOf reports a generic error; re-validate against the matching branch for a useful message
        branch = next(
            b for b in _load_schema()["oneOf"] if b["properties"]["kind"]["const"] == kind
        )
        branch = {**branch, "$defs": _load_schema()["$defs"]}
        detail = next(iter(jsonschema.validators.validator_for(branch)(branch).iter_errors(obj)), None)
        raise DataError(f"invalid {kind} record: {detail.message if detail else errors[0].message}", line)

    kind = obj["kind"]
    if kind == "dataset":
        return DatasetRecord(obj["id"], obj["name"], DatasetKind(obj["dataset_kind"]))
    if kind == "slide":
        return SlideRecord(obj["id"], obj["dataset_id"], tuple(obj.get("domain_tags", ())))
    if kind == "patch":
        return PatchRecord(
            obj["id"],
            obj["slide_id"],
            tuple(obj["origin"]),
            tuple(obj.get("size", DEFAULT_PATCH_SIZE)),
            Label(obj.get("class_label", "NMF")),
            obj.get("pixel_source"),
        )
    return Annotation(
        obj["id"],
        obj["patch_id"],
        tuple(obj["center"]),
        Label(obj["label"]),
        AnnotationSource(obj.get("source", "original")),
        obj.get("confidence"),
        obj.get("model_id"),
    )


def record_to_json(record) -> dict:
    if isinstance(record, DatasetRecord):
        return {"kind": "dataset", "id": record.id, "name": record.name, "dataset_kind": record.kind.value}
    if isinstance(record, SlideRecord):
        return {
            "kind": "slide",
            "id": record.id,
            "dataset_id": record.dataset_id,
            "domain_tags": list(record.domain_tags),
        }
    if isinstance(record, PatchRecord):
        out = {
            "kind": "patch",
            "id": record.id,
            "slide_id": record.slide_id,
            "origin": list(record.origin_xy),
            "size": list(record.size_wh),
            "class_label": record.class_label.value,
        }
        if record.pixel_source is not None:
            out["pixel_source"] = record.pixel_source
        return out
    if isinstance(record, Annotation):
        out = {
            "kind": "annotation",
            "id": record.id,
            "patch_id": record.patch_id,
            "center": list(record.center_xy),
            "label": record.label.value,
            "source": record.source.value,
        }
        if record.confidence is not None:
            out["confidence"] = record.confidence
        if record.model_id is not None:
            out["model_id"] = record.model_id
        return out
    raise TypeError(f"not a catalog record: {record!r}")


def iter_jsonl(path: str | Path):
    """Yield ``(line_number, object)`` for every non-blank line of a JSON-lines file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON: {exc.msg}", lineno) from None


def ingest_manifest(path: str | Path, format: str = "jsonl", derive_labels: bool = False) -> CorpusCatalog:
    """Read a JSON-lines manifest into a validated catalog.

    Patch ``class_label`` may be omitted; it is then derived from the patch's
    annotations. Declared labels that contradict the annotations raise
    :class:`IntegrityError` unless ``derive_labels`` is set.
    """
    if format != "jsonl":
        raise DataError(f"unsupported manifest format {format!r}")
    if not Path(path).is_file():
        raise DataError(f"manifest {str(path)!r} does not exist")
    buckets: dict[type, list] = {DatasetRecord: [], SlideRecord: [], PatchRecord: [], Annotation: []}
    undeclared = set()
    for lineno, obj in iter_jsonl(path):
        record = record_from_json(obj, lineno)
        buckets[type(record)].append(record)
        if isinstance(record, PatchRecord) and "class_label" not in obj:
            undeclared.add(record.id)
    if undeclared:
        mf = {a.patch_id for a in buckets[Annotation] if a.label is Label.MF}
        buckets[PatchRecord] = [
            replace(p, class_label=Label.MF if p.id in mf else Label.NMF) if p.id in undeclared else p
            for p in buckets[PatchRecord]
        ]
    return CorpusCatalog.from_records(
        buckets[DatasetRecord],
        buckets[SlideRecord],
        buckets[PatchRecord],
        buckets[Annotation],
        derive_labels=derive_labels,
    )


def iter_records(catalog: CorpusCatalog):
    """All records in canonical order: datasets, slides, patches, annotations, each by id."""
    for coll in (catalog.datasets, catalog.slides, catalog.patches, catalog.annotations):
        for key in sorted(coll):
            yield coll[key]


def write_manifest(catalog: CorpusCatalog, path: str | Path) -> None:
    """Write ``catalog`` as a canonical JSON-lines manifest."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in iter_records(catalog):
            fh.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")


def write_annotations(annotations: Iterable[Annotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(json.dumps(record_to_json(a), sort_keys=True) + "\n")


def read_annotations(path: str | Path) -> list[Annotation]:
    out = []
    for lineno, obj in iter_jsonl(path):
        record = record_from_json(obj, lineno)
        if not isinstance(record, Annotation):
            raise DataError(f"expected an annotation record, got {obj.get('kind')!r}", lineno)
        out.append(record)
    return out


def counts_summary(counts: CatalogCounts) -> dict:
    """JSON-ready view of a :class:`CatalogCounts`."""
    return {
        "dataset_sizes": dict(sorted(counts.dataset_sizes.items())),
        "slide_annotations": dict(sorted(counts.slide_annotations.items())),
        "class_sizes": {k.value: v for k, v in sorted(counts.class_sizes.items())},
        "n_patches": sum(counts.dataset_sizes.values()),
        "n_annotations": sum(counts.slide_annotations.values()),
    }
