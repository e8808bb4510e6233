"""Geometric transforms, HSV jitter and test-time-augmentation fusion.

Points are ``(x, y)`` pixel coordinates with ``y`` pointing down. The exact
transforms act on a ``W x H`` patch as follows::

    identity    (x, y) -> (x, y)
    hflip       (x, y) -> (W-1-x, y)
    vflip       (x, y) -> (x, H-1-y)
    rot90       (x, y) -> (y, W-1-x)        counterclockwise, output is H x W
    rot180      (x, y) -> (W-1-x, H-1-y)
    rot270      (x, y) -> (H-1-y, x)        output is H x W
    transpose   (x, y) -> (y, x)            output is H x W
    transverse  (x, y) -> (H-1-y, W-1-x)    output is H x W

``rot90`` matches ``np.rot90`` on an ``(H, W)`` array. Together these eight
form the symmetry group of the rectangle grid; the six flip/rotation
transforms alone are not closed (``hflip`` then ``rot90`` is ``transpose``).

``rot_deg`` rotates by a real angle about the patch center, counterclockwise
for positive angles, keeps the patch size, and is meant for training
augmentation only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from mitokit.errors import ConfigError, DataError
from mitokit.evaluator import IDENTITY, Detection, DetectionSet

# 2x2 integer matrices acting on centered coordinates (dx, dy)
_MATRICES = {
    "identity": ((1, 0), (0, 1)),
    "hflip": ((-1, 0), (0, 1)),
    "vflip": ((1, 0), (0, -1)),
    "rot90": ((0, 1), (-1, 0)),
    "rot180": ((-1, 0), (0, -1)),
    "rot270": ((0, -1), (1, 0)),
    "transpose": ((0, 1), (1, 0)),
    "transverse": ((0, -1), (-1, 0)),
}
_BY_MATRIX = {m: k for k, m in _MATRICES.items()}

FLIP_ROTATION_SET = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")
DIHEDRAL_SET = FLIP_ROTATION_SET + ("transpose", "transverse")
DEFAULT_VIEWS = ("identity", "hflip", "rot90", "rot180", "rot270")
MAX_AUG_DEGREES = 15.0


@dataclass(frozen=True)
class GeomTransform:
    kind: str
    patch_size: tuple[int, int]
    degrees: float = 0.0

    def __post_init__(self):
        if self.kind not in _MATRICES and self.kind != "rot_deg":
            raise ConfigError(f"unknown transform {self.kind!r}")
        w, h = self.patch_size
        if w <= 0 or h <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch_size}")
        if self.kind == "rot_deg" and not -MAX_AUG_DEGREES <= self.degrees <= MAX_AUG_DEGREES:
            raise ConfigError(f"rot_deg angle must lie in [-15, 15], got {self.degrees}")

    @property
    def id(self) -> str:
        """Canonical string id carried in detection provenance."""
        if self.kind == "rot_deg":
            return f"rot_deg({self.degrees:g})"
        return self.kind

    @property
    def exact(self) -> bool:
        return self.kind != "rot_deg"

    @property
    def output_size(self) -> tuple[int, int]:
        w, h = self.patch_size
        if self.exact and _MATRICES[self.kind][0][0] == 0:
            return h, w
        return w, h


def transform_point(t: GeomTransform, p: Sequence[float]) -> tuple[float, float]:
    """Map a point of the input frame of ``t`` into its output frame.

    ``rot_deg`` outputs can fall outside the patch; use :func:`in_bounds`.
    """
    x, y = float(p[0]), float(p[1])
    w, h = t.patch_size
    if t.kind == "rot_deg":
        theta = math.radians(t.degrees)
        c, s = math.cos(theta), math.sin(theta)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        dx, dy = x - cx, y - cy
        return cx + c * dx + s * dy, cy - s * dx + c * dy
    (a, b), (cc, d) = _MATRICES[t.kind]
    ow, oh = t.output_size
    # doubled centered coordinates keep the arithmetic on integers for integer inputs
    dx, dy = 2.0 * x - (w - 1), 2.0 * y - (h - 1)
    return ((ow - 1) + a * dx + b * dy) / 2.0, ((oh - 1) + cc * dx + d * dy) / 2.0


def transform_points(t: GeomTransform, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`transform_point` over an ``(n, 2)`` array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w, h = t.patch_size
    if t.kind == "rot_deg":
        theta = math.radians(t.degrees)
        c, s = math.cos(theta), math.sin(theta)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
        return np.column_stack([cx + c * dx + s * dy, cy - s * dx + c * dy])
    m = np.array(_MATRICES[t.kind], dtype=np.float64)
    ow, oh = t.output_size
    centered = 2.0 * pts - np.array([w - 1, h - 1], dtype=np.float64)
    return (centered @ m.T + np.array([ow - 1, oh - 1], dtype=np.float64)) / 2.0


def in_bounds(t: GeomTransform, p: Sequence[float]) -> bool:
    ow, oh = t.output_size
    return 0 <= p[0] <= ow - 1 and 0 <= p[1] <= oh - 1


def inverse(t: GeomTransform) -> GeomTransform:
    """Transform undoing ``t``, defined on ``t``'s output frame."""
    if t.kind == "rot_deg":
        return GeomTransform("rot_deg", t.patch_size, -t.degrees)
    m = np.array(_MATRICES[t.kind])
    inv = tuple(tuple(int(v) for v in row) for row in m.T)  # signed permutations are orthogonal
    return GeomTransform(_BY_MATRIX[inv], t.output_size)


def compose(first: GeomTransform, second: GeomTransform) -> GeomTransform:
    """Transform equivalent to applying ``first`` and then ``second``.

    Only exact transforms compose; ``second`` must act on ``first``'s output frame.
    """
    if not (first.exact and second.exact):
        raise ConfigError("only exact flip/rotation transforms can be composed")
    if second.patch_size != first.output_size:
        raise ConfigError(
            f"{second.id} expects a {second.patch_size} frame but {first.id} produces {first.output_size}"
        )
    m = np.array(_MATRICES[second.kind]) @ np.array(_MATRICES[first.kind])
    key = tuple(tuple(int(v) for v in row) for row in m)
    return GeomTransform(_BY_MATRIX[key], first.patch_size)


def by_id(transform_id: str, patch_size: tuple[int, int]) -> GeomTransform:
    """Parse a canonical transform id for a patch of ``patch_size``."""
    if transform_id.startswith("rot_deg(") and transform_id.endswith(")"):
        return GeomTransform("rot_deg", patch_size, float(transform_id[8:-1]))
    return GeomTransform(transform_id, patch_size)


def apply_to_image(t: GeomTransform, image: np.ndarray, order: int = 1) -> np.ndarray:
    """Apply ``t`` to an ``(H, W[, C])`` array.

    Exact transforms permute pixels. ``rot_deg`` resamples with spline
    interpolation of the given ``order`` and zero fill.
    """
    h, w = image.shape[:2]
    if (w, h) != tuple(t.patch_size):
        raise ConfigError(f"image is {w}x{h} but the transform expects {t.patch_size}")
    if t.kind == "identity":
        return image.copy()
    if t.kind == "hflip":
        return image[:, ::-1].copy()
    if t.kind == "vflip":
        return image[::-1].copy()
    if t.kind in ("rot90", "rot180", "rot270"):
        return np.rot90(image, {"rot90": 1, "rot180": 2, "rot270": 3}[t.kind]).copy()
    if t.kind == "transpose":
        return np.swapaxes(image, 0, 1).copy()
    if t.kind == "transverse":
        return np.swapaxes(image, 0, 1)[::-1, ::-1].copy()

    from scipy import ndimage

    # output pixel (x, y) samples the input at the inverse-rotated location
    theta = math.radians(t.degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    # in (row, col) = (y, x) order: inverse of x' = cx + c dx + s dy, y' = cy - s dx + c dy
    mat = np.array([[c, s], [-s, c]])
    center = np.array([cy, cx])
    offset = center - mat @ center
    if image.ndim == 2:
        return ndimage.affine_transform(image, mat, offset, order=order, mode="constant")
    return np.stack(
        [ndimage.affine_transform(image[..., k], mat, offset, order=order, mode="constant")
         for k in range(image.shape[2])],
        axis=-1,
    )


# -- training augmentation -------------------------------------------------


@dataclass(frozen=True)
class AugmentationPlan:
    """Random geometric augmentation for one training patch, applied in field order."""

    hflip: bool
    vflip: bool
    degrees: float
    patch_size: tuple[int, int]

    def transforms(self) -> list[GeomTransform]:
        out = []
        if self.hflip:
            out.append(GeomTransform("hflip", self.patch_size))
        if self.vflip:
            out.append(GeomTransform("vflip", self.patch_size))
        if self.degrees != 0.0:
            out.append(GeomTransform("rot_deg", self.patch_size, self.degrees))
        return out

    def apply_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mapped points and a mask of those still inside the patch."""
        out = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        for t in self.transforms():
            out = transform_points(t, out)
        w, h = self.patch_size
        keep = (out[:, 0] >= 0) & (out[:, 0] <= w - 1) & (out[:, 1] >= 0) & (out[:, 1] <= h - 1)
        return out, keep


def plan_augmentation(
    rng: np.random.Generator,
    patch_size: tuple[int, int],
    flip_prob: float = 0.5,
    max_degrees: float = MAX_AUG_DEGREES,
) -> AugmentationPlan:
    """Independent horizontal and vertical flips plus a uniform small rotation."""
    if not 0.0 <= max_degrees <= MAX_AUG_DEGREES:
        raise ConfigError(f"max_degrees must lie in [0, 15], got {max_degrees}")
    hflip = bool(rng.random() < flip_prob)
    vflip = bool(rng.random() < flip_prob)
    degrees = float(rng.uniform(-max_degrees, max_degrees))
    return AugmentationPlan(hflip, vflip, degrees, tuple(patch_size))


# -- HSV jitter ------------------------------------------------------------


@dataclass(frozen=True)
class HsvJitter:
    """Per-image HSV perturbation ranges.

    Hue is shifted by a fraction of the full hue circle drawn from
    ``[-hue_delta, hue_delta]``; saturation and value are multiplied by
    ``1 + u`` with ``u`` drawn from ``[-sat_scale, sat_scale]`` and
    ``[-val_scale, val_scale]``.
    """

    hue_delta: float = 0.1
    sat_scale: float = 0.2
    val_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("hue_delta", "sat_scale", "val_scale"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    def sample(self) -> tuple[float, float, float]:
        """The ``(hue shift, saturation factor, value factor)`` drawn for this seed."""
        rng = np.random.default_rng(self.seed)
        dh = rng.uniform(-self.hue_delta, self.hue_delta) if self.hue_delta else 0.0
        ds = rng.uniform(-self.sat_scale, self.sat_scale) if self.sat_scale else 0.0
        dv = rng.uniform(-self.val_scale, self.val_scale) if self.val_scale else 0.0
        return float(dh), 1.0 + float(ds), 1.0 + float(dv)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB to HSV. Input in [0, 1]; hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe) % 6.0,
        np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], axis=-1)


def apply_hsv_jitter(pixels: np.ndarray, jitter: HsvJitter) -> np.ndarray:
    """Jitter an ``(..., 3)`` uint8 RGB buffer; one draw per call (per image)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.shape[-1] != 3:
        raise DataError(f"expected a uint8 RGB buffer, got {pixels.dtype} with shape {pixels.shape}")
    dh, fs, fv = jitter.sample()
    hsv = rgb_to_hsv(pixels / 255.0)
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * fs, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * fv, 0.0, 1.0)
    out = np.rint(hsv_to_rgb(hsv) * 255.0)
    return np.clip(out, 0, 255).astype(np.uint8)


# -- fusion ----------------------------------------------------------------


FUSION_METHODS = ("nms", "confidence_average_cluster")


@dataclass(frozen=True)
class FusionConfig:
    method: str = "confidence_average_cluster"
    cluster_radius: float = 16.0
    min_votes: int = 1

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ConfigError(f"fusion method must be one of {FUSION_METHODS}, got {self.method!r}")
        if self.cluster_radius <= 0:
            raise ConfigError(f"cluster_radius must be positive, got {self.cluster_radius}")
        if self.min_votes < 1:
            raise ConfigError(f"min_votes must be >= 1, got {self.min_votes}")


def back_transform(dets: DetectionSet, view: GeomTransform) -> DetectionSet:
    """Map detections found on ``view``'s output back to the canonical patch frame."""
    if dets.transform_id != view.id:
        raise DataError(f"detections are in frame {dets.transform_id!r}, not {view.id!r}")
    if view.kind == "identity" or not dets.detections:
        return replace(dets, transform_id=IDENTITY, view_id=dets.view_id)
    inv = inverse(view)
    pts = transform_points(inv, np.array([(d.x, d.y) for d in dets.detections]))
    w, h = view.patch_size
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    moved = tuple(
        Detection(float(x), float(y), d.confidence) for (x, y), d in zip(pts.tolist(), dets.detections)
    )
    return DetectionSet(dets.patch_id, moved, dets.model_id, IDENTITY, dets.view_id)


def fuse_detections(
    sets: Iterable[DetectionSet],
    config: FusionConfig = FusionConfig(),
    n_sources: int | None = None,
) -> DetectionSet:
    """Fuse detections of one patch from several (model, view) sources.

    All sets must be in the identity frame. Detections are visited by
    descending confidence (ties by position, model, view); each unassigned
    detection seeds a cluster holding every unassigned detection within
    ``cluster_radius`` of it.

    ``confidence_average_cluster`` emits one detection per cluster at the
    confidence-weighted centroid with confidence equal to the sum over sources
    of each source's best confidence in the cluster divided by the number of
    sources (absent sources count as zero). ``nms`` keeps the seed unchanged.
    Clusters backed by fewer than ``min_votes`` distinct sources are dropped.

    ``n_sources`` defaults to the number of distinct sources among ``sets``,
    including sources with no detections.
    """
    sets = list(sets)
    if not sets:
        raise DataError("nothing to fuse")
    patch_ids = {s.patch_id for s in sets}
    if len(patch_ids) != 1:
        raise DataError(f"cannot fuse detections from different patches {sorted(patch_ids)}")
    for s in sets:
        if s.transform_id != IDENTITY:
            raise DataError(
                f"source {s.source} is still in frame {s.transform_id!r}; back-transform before fusing"
            )
    sources = sorted({s.source for s in sets})
    n_sources = n_sources or len(sources)

    items = [(d, s.source) for s in sets for d in s.detections]
    items.sort(key=lambda it: (-it[0].confidence, it[0].x, it[0].y, it[1]))
    if not items:
        return DetectionSet(patch_ids.pop(), (), "fused", IDENTITY, "fused")
    xy = np.array([(d.x, d.y) for d, _ in items], dtype=np.float64)
    free = np.ones(len(items), dtype=bool)
    r2 = config.cluster_radius ** 2
    out = []
    for i in range(len(items)):
        if not free[i]:
            continue
        d2 = (xy[:, 0] - xy[i, 0]) ** 2 + (xy[:, 1] - xy[i, 1]) ** 2
        members = np.flatnonzero(free & (d2 <= r2))
        free[members] = False
        best: dict[tuple[str, str], float] = {}
        for m in members:
            d, src = items[m]
            best[src] = max(best.get(src, 0.0), d.confidence)
        if len(best) < config.min_votes:
            continue
        seed = items[i][0]
        if config.method == "nms":
            out.append(seed)
            continue
        conf = np.array([items[m][0].confidence for m in members])
        pts = xy[members]
        if conf.sum() > 0:
            cx, cy = (conf[:, None] * pts).sum(axis=0) / conf.sum()
        else:
            cx, cy = pts.mean(axis=0)
        fused_conf = min(1.0, sum(best.values()) / n_sources)
        out.append(Detection(float(cx), float(cy), float(fused_conf)))
    return DetectionSet(patch_ids.pop(), tuple(out), "fused", IDENTITY, "fused")
