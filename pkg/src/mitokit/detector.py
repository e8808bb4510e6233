"""Detector contract, a seeded mock detector and an adapter for external detections.

Any object with a ``model_id`` attribute and a
``detect(patch, view=None, pixels=None) -> DetectionSet`` method is a
detector. ``view`` is the geometric transform applied to the patch before
inference; returned points are in that view's frame and tagged with its id.
"""
from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import stats

from mitokit.catalog import CorpusCatalog, Label, PatchRecord
from mitokit.errors import ConfigError, DataError
from mitokit.evaluator import Detection, DetectionSet, read_detections
from mitokit.tta import GeomTransform, transform_point

TRUE_BETA = (8.0, 2.0)
FALSE_BETA = (2.0, 5.0)


@runtime_checkable
class Detector(Protocol):
    model_id: str

    def detect(
        self,
        patch: PatchRecord,
        view: GeomTransform | None = None,
        pixels: np.ndarray | None = None,
    ) -> DetectionSet: ...


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded from a stable hash of ``keys`` (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(repr(keys).encode("utf-8"), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass(frozen=True)
class MockParams:
    """Behaviour of :class:`MockOracleDetector`.

    Each MF truth point is emitted with probability ``recall_sim`` at its
    location plus isotropic Gaussian noise of ``jitter_px`` sigma, with
    confidence ~ Beta(*true_beta); ``true_beta=None`` gives confidence 1.
    ``Poisson(fp_rate)`` false detections per patch are placed uniformly with
    confidence ~ Beta(*false_beta).
    """

    recall_sim: float = 0.84
    fp_rate: float = 0.25
    jitter_px: float = 3.0
    true_beta: tuple[float, float] | None = TRUE_BETA
    false_beta: tuple[float, float] = FALSE_BETA

    def __post_init__(self):
        if not 0.0 <= self.recall_sim <= 1.0:
            raise ConfigError(f"recall_sim must lie in [0, 1], got {self.recall_sim}")
        if self.fp_rate < 0 or self.jitter_px < 0:
            raise ConfigError("fp_rate and jitter_px must be non-negative")

    @classmethod
    def perfect(cls) -> "MockParams":
        """Reproduces the MF ground truth exactly, all at confidence 1."""
        return cls(recall_sim=1.0, fp_rate=0.0, jitter_px=0.0, true_beta=None)


class MockOracleDetector:
    """Detector that perturbs the catalog's ground truth.

    Output depends only on ``(seed, model_id, patch id, view id)``, so calls
    are reproducible and safe to run concurrently.
    """

    def __init__(self, catalog: CorpusCatalog, params: MockParams = MockParams(), seed: int = 0,
                 model_id: str = "mock"):
        self.catalog = catalog
        self.params = params
        self.seed = seed
        self.model_id = model_id

    def detect(self, patch: PatchRecord, view: GeomTransform | None = None, pixels=None) -> DetectionSet:
        if patch.id not in self.catalog.patches:
            raise DataError(f"unknown patch {patch.id!r}")
        view = view or GeomTransform("identity", patch.size_wh)
        if tuple(view.patch_size) != tuple(patch.size_wh):
            raise ConfigError(f"view {view.id} is for a {view.patch_size} patch, not {patch.size_wh}")
        p = self.params
        rng = derive_rng(self.seed, self.model_id, patch.id, view.id)
        ow, oh = view.output_size
        out = []
        for a in self.catalog.mf_points(patch.id):
            # draw every variate so each truth consumes a fixed amount of randomness
            hit = rng.random() < p.recall_sim
            noise = rng.normal(0.0, 1.0, size=2) * p.jitter_px
            conf = 1.0 if p.true_beta is None else float(rng.beta(*p.true_beta))
            if not hit:
                continue
            x, y = transform_point(view, a.center_xy)
            x = min(max(x + noise[0], 0.0), ow - 1.0)
            y = min(max(y + noise[1], 0.0), oh - 1.0)
            out.append(Detection(float(x), float(y), conf))
        n_fp = int(rng.poisson(p.fp_rate)) if p.fp_rate > 0 else 0
        if n_fp:
            xs = rng.uniform(0.0, ow - 1.0, n_fp)
            ys = rng.uniform(0.0, oh - 1.0, n_fp)
            cs = rng.beta(*p.false_beta, n_fp)
            out.extend(Detection(float(x), float(y), float(c)) for x, y, c in zip(xs, ys, cs))
        return DetectionSet(patch.id, tuple(out), self.model_id, view.id)


def calibrate_mock(
    catalog: CorpusCatalog,
    recall: float,
    precision: float,
    threshold: float = 0.0,
    jitter_px: float = 3.0,
    true_beta: tuple[float, float] = TRUE_BETA,
    false_beta: tuple[float, float] = FALSE_BETA,
) -> MockParams:
    """Mock parameters expected to hit ``recall`` and ``precision`` at ``threshold``.

    With ``mu`` MF points per patch, a true detection survives the cutoff with
    probability ``s_t`` and a false one with ``s_f``. Expected recall is
    ``recall_sim * s_t`` and expected precision is
    ``recall * mu / (recall * mu + fp_rate * s_f)``, so
    ``fp_rate = recall * mu * (1 - precision) / (precision * s_f)``.
    """
    if not 0 < recall <= 1 or not 0 < precision <= 1:
        raise ConfigError("recall and precision must lie in (0, 1]")
    n_patches = len(catalog.patches)
    n_truth = sum(1 for a in catalog.annotations.values() if a.label is Label.MF)
    if n_patches == 0 or n_truth == 0:
        raise DataError("calibration needs patches with MF annotations")
    mu = n_truth / n_patches
    s_t = float(stats.beta.sf(threshold, *true_beta)) if threshold > 0 else 1.0
    s_f = float(stats.beta.sf(threshold, *false_beta)) if threshold > 0 else 1.0
    recall_sim = recall / s_t
    if recall_sim > 1:
        raise ConfigError(f"recall {recall} is unreachable at threshold {threshold}")
    if precision < 1 and s_f == 0:
        raise ConfigError(f"no false detection survives threshold {threshold}")
    fp_rate = recall * mu * (1.0 - precision) / (precision * s_f) if precision < 1 else 0.0
    return MockParams(recall_sim, fp_rate, jitter_px, true_beta, false_beta)


class ExternalDetections:
    """Serves detections produced elsewhere (a detection JSON-lines file) as a detector.

    ``detect`` returns the stored set for the patch and view, or an empty set.
    """

    def __init__(self, sets: Sequence[DetectionSet], model_id: str):
        self.model_id = model_id
        self._sets: dict[tuple[str, str], DetectionSet] = {}
        for s in sets:
            if s.model_id != model_id:
                continue
            key = (s.patch_id, s.transform_id)
            if key in self._sets:
                raise DataError(f"duplicate detections for patch {s.patch_id!r} in frame {s.transform_id!r}")
            self._sets[key] = s

    @classmethod
    def from_file(cls, path: str | Path) -> list["ExternalDetections"]:
        """One adapter per model id found in the file, sorted by model id."""
        sets = read_detections(path)
        return [cls(sets, m) for m in sorted({s.model_id for s in sets})]

    def detect(self, patch: PatchRecord, view: GeomTransform | None = None, pixels=None) -> DetectionSet:
        tid = view.id if view is not None else "identity"
        found = self._sets.get((patch.id, tid))
        if found is not None:
            return found
        return DetectionSet(patch.id, (), self.model_id, tid)


@dataclass(frozen=True)
class TimingStats:
    n: int = 0
    wall_s: float = 0.0
    mean_ms: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0
    max_ms: float = 0.0

    @classmethod
    def from_samples(cls, per_item_s: Sequence[float], wall_s: float) -> "TimingStats":
        if len(per_item_s) == 0:
            return cls(0, wall_s)
        ms = np.asarray(per_item_s) * 1e3
        return cls(
            len(ms),
            wall_s,
            float(ms.mean()),
            float(np.percentile(ms, 50)),
            float(np.percentile(ms, 95)),
            float(ms.max()),
        )

    @property
    def throughput(self) -> float:
        """Items per second of wall-clock time."""
        return self.n / self.wall_s if self.wall_s > 0 else 0.0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "wall_s": self.wall_s,
            "mean_ms": self.mean_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "max_ms": self.max_ms,
            "per_second": self.throughput,
        }


@dataclass
class BatchResult:
    sets: list[DetectionSet] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    timing: TimingStats = field(default_factory=TimingStats)


def batch_detect(
    detector: Detector,
    patches: Sequence[PatchRecord],
    parallelism: int = 1,
    view_kind: str = "identity",
) -> BatchResult:
    """Run ``detector`` over ``patches`` on up to ``parallelism`` threads.

    Results are ordered by patch id whatever the parallelism. A patch whose
    detection raises is recorded in ``failures`` and skipped.
    """
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    ordered = sorted(patches, key=lambda p: p.id)

    def run(patch):
        t0 = time.perf_counter()
        try:
            view = GeomTransform(view_kind, patch.size_wh)
            return patch.id, detector.detect(patch, view), None, time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001 - partial-failure contract
            return patch.id, None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0

    t0 = time.perf_counter()
    if parallelism == 1:
        results = [run(p) for p in ordered]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, ordered))
    wall = time.perf_counter() - t0

    out = BatchResult()
    for pid, sets, err, _ in results:
        if err is not None:
            out.failures[pid] = err
        else:
            out.sets.append(sets)
    out.timing = TimingStats.from_samples([r[3] for r in results], wall if results else 0.0)
    return out
