import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitokit.errors import ConfigError, DataError
from mitokit.evaluator import Detection, DetectionSet
from mitokit.tta import (
    DIHEDRAL_SET,
    FLIP_ROTATION_SET,
    FusionConfig,
    GeomTransform,
    HsvJitter,
    apply_hsv_jitter,
    apply_to_image,
    back_transform,
    by_id,
    compose,
    fuse_detections,
    hsv_to_rgb,
    inverse,
    plan_augmentation,
    rgb_to_hsv,
    transform_point,
    transform_points,
)

SIZE = (1920, 1280)


def grid_points(size=SIZE):
    w, h = size
    xs, ys = [0, 1, (w - 1) / 2, w - 2, w - 1], [0, 1, (h - 1) / 2, h - 2, h - 1]
    return np.array(list(itertools.product(xs, ys)), dtype=np.float64)


def T(kind, size=SIZE, deg=0.0):
    return GeomTransform(kind, size, deg)


def chain(kinds, size=SIZE):
    t = T(kinds[0], size)
    for k in kinds[1:]:
        t = compose(t, T(k, t.output_size))
    return t


class TestAlgebra:
    @pytest.mark.parametrize("kind", ["hflip", "vflip", "rot180", "transpose", "transverse"])
    def test_involutions(self, kind):
        t = T(kind)
        pts = grid_points()
        back = transform_points(T(kind, t.output_size), transform_points(t, pts))
        np.testing.assert_array_equal(back, pts)

    def test_rot90_order_four(self):
        pts = grid_points()
        out, size = pts, SIZE
        for _ in range(4):
            t = T("rot90", size)
            out, size = transform_points(t, out), t.output_size
        np.testing.assert_array_equal(out, pts)
        assert chain(["rot90"] * 4).kind == "identity"

    @pytest.mark.parametrize("kind", DIHEDRAL_SET)
    def test_inverse(self, kind):
        t = T(kind)
        pts = grid_points()
        np.testing.assert_array_equal(transform_points(inverse(t), transform_points(t, pts)), pts)
        assert compose(t, inverse(t)).kind == "identity"

    @pytest.mark.parametrize("kind", DIHEDRAL_SET)
    def test_stays_in_bounds(self, kind):
        t = T(kind)
        ow, oh = t.output_size
        out = transform_points(t, grid_points())
        assert out[:, 0].min() == 0 and out[:, 0].max() == ow - 1
        assert out[:, 1].min() == 0 and out[:, 1].max() == oh - 1

    def test_dihedral_closure(self):
        for a, b in itertools.product(DIHEDRAL_SET, repeat=2):
            c = compose(T(a), T(b, T(a).output_size))
            assert c.kind in DIHEDRAL_SET
            np.testing.assert_array_equal(
                transform_points(c, grid_points()),
                transform_points(T(b, T(a).output_size), transform_points(T(a), grid_points())),
            )

    def test_flip_rotation_set_is_not_closed(self):
        # hflip followed by rot90 is a reflection about the diagonal
        assert compose(T("hflip"), T("rot90")).kind == "transpose"
        assert "transpose" not in FLIP_ROTATION_SET

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1279, (50, 2))
        for kind in DIHEDRAL_SET:
            t = T(kind)
            np.testing.assert_allclose(transform_points(t, pts), [transform_point(t, p) for p in pts], rtol=0, atol=1e-9)
        t = T("rot_deg", deg=7.5)
        np.testing.assert_allclose(transform_points(t, pts), [transform_point(t, p) for p in pts], atol=1e-9)

    def test_by_id_round_trip(self):
        for kind in DIHEDRAL_SET:
            assert by_id(T(kind).id, SIZE) == T(kind)
        assert by_id("rot_deg(-12.5)", SIZE) == T("rot_deg", deg=-12.5)

    def test_rejections(self):
        with pytest.raises(ConfigError):
            T("shear")
        with pytest.raises(ConfigError):
            T("rot_deg", deg=20)
        with pytest.raises(ConfigError):
            compose(T("rot_deg", deg=3), T("identity"))
        with pytest.raises(ConfigError):
            compose(T("rot90"), T("identity"))  # wrong frame size


class TestImages:
    @pytest.mark.parametrize("kind", DIHEDRAL_SET)
    def test_pixels_follow_points(self, kind):
        size = (7, 5)
        img = np.arange(35).reshape(5, 7)
        t = T(kind, size)
        out = apply_to_image(t, img)
        assert out.shape == (t.output_size[1], t.output_size[0])
        for y, x in itertools.product(range(5), range(7)):
            ox, oy = transform_point(t, (x, y))
            assert out[int(oy), int(ox)] == img[y, x]

    def test_rot90_is_numpy_rot90(self):
        img = np.random.default_rng(0).integers(0, 255, (4, 6, 3))
        np.testing.assert_array_equal(apply_to_image(T("rot90", (6, 4)), img), np.rot90(img))

    def test_small_rotation_moves_bright_pixel(self):
        size = (101, 81)
        img = np.zeros((81, 101))
        img[20, 70] = 1.0
        t = T("rot_deg", size, 10.0)
        out = apply_to_image(t, img, order=1)
        oy, ox = np.unravel_index(np.argmax(out), out.shape)
        ex, ey = transform_point(t, (70, 20))
        assert abs(ox - ex) <= 1 and abs(oy - ey) <= 1

    def test_small_rotation_round_trip(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(200, 1000, (100, 2))
        for deg in (-15, -4.5, 0.5, 15):
            t = T("rot_deg", deg=deg)
            back = transform_points(inverse(t), transform_points(t, pts))
            assert np.abs(back - pts).max() <= 0.5

    def test_size_mismatch(self):
        with pytest.raises(ConfigError):
            apply_to_image(T("hflip", (4, 4)), np.zeros((3, 4)))


class TestAugmentation:
    def test_plan_deterministic(self):
        a = plan_augmentation(np.random.default_rng(5), SIZE)
        b = plan_augmentation(np.random.default_rng(5), SIZE)
        assert a == b
        assert -15 <= a.degrees <= 15

    def test_points_inside_kept(self):
        plan = plan_augmentation(np.random.default_rng(1), SIZE)
        pts, keep = plan.apply_points(np.array([[959.5, 639.5], [0.0, 0.0]]))
        assert keep[0]
        np.testing.assert_allclose(pts[0], [959.5, 639.5], atol=1e-9)

    def test_flip_frequency(self):
        rng = np.random.default_rng(0)
        flips = [plan_augmentation(rng, SIZE).hflip for _ in range(4000)]
        assert abs(np.mean(flips) - 0.5) < 3 * np.sqrt(0.25 / 4000)


class TestHsv:
    def test_zero_jitter_is_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
        out = apply_hsv_jitter(img, HsvJitter(0, 0, 0))
        assert out.tobytes() == img.tobytes()

    def test_gray_unchanged_by_hue(self):
        gray = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
        out = apply_hsv_jitter(gray, HsvJitter(0.5, 0, 0, seed=3))
        assert out.tobytes() == gray.tobytes()

    def test_exhaustive_round_trip(self):
        # every 24-bit color, in chunks of 2^20
        worst = 0
        for start in range(0, 1 << 24, 1 << 20):
            codes = np.arange(start, start + (1 << 20), dtype=np.uint32)
            rgb = np.stack([(codes >> 16) & 255, (codes >> 8) & 255, codes & 255], axis=-1).astype(np.uint8)
            back = np.rint(hsv_to_rgb(rgb_to_hsv(rgb / 255.0)) * 255.0)
            worst = max(worst, int(np.abs(back - rgb).max()))
        assert worst <= 1

    def test_seeded(self):
        assert HsvJitter(seed=4).sample() == HsvJitter(seed=4).sample()
        dh, fs, fv = HsvJitter(seed=4).sample()
        assert abs(dh) <= 0.1 and 0.8 <= fs <= 1.2 and 0.8 <= fv <= 1.2

    def test_rejects_float(self):
        with pytest.raises(DataError):
            apply_hsv_jitter(np.zeros((2, 2, 3)), HsvJitter())


def dset(pts, model="m", view="identity", patch="p"):
    return DetectionSet(patch, tuple(Detection(x, y, c) for x, y, c in pts), model, "identity", view)


class TestFusion:
    def test_unanimous_average(self):
        sets = [dset([(100, 100, 0.9)], view=v) for v in ("identity", "hflip")]
        out = fuse_detections(sets)
        assert len(out) == 1 and out.detections[0].confidence == pytest.approx(0.9)

    def test_six_of_eight(self):
        sets = [dset([(100, 100, 0.9)], view=f"v{i}") for i in range(6)] + [dset([], view="v6"), dset([], view="v7")]
        out = fuse_detections(sets)
        assert out.detections[0].confidence == pytest.approx(0.675)

    def test_min_votes(self):
        sets = [dset([(100, 100, 0.9)], view="a"), dset([(500, 500, 0.8)], view="b"), dset([(101, 100, 0.7)], view="b")]
        out = fuse_detections(sets, FusionConfig(min_votes=2))
        assert len(out) == 1
        assert out.detections[0].x == pytest.approx((0.9 * 100 + 0.7 * 101) / 1.6)

    def test_one_source_votes_once(self):
        sets = [dset([(100, 100, 0.9), (102, 100, 0.9)], view="a"), dset([], view="b")]
        assert len(fuse_detections(sets, FusionConfig(min_votes=2))) == 0
        assert fuse_detections(sets).detections[0].confidence == pytest.approx(0.45)

    def test_nms_keeps_seed(self):
        sets = [dset([(100, 100, 0.9)], view="a"), dset([(110, 100, 0.95)], view="b")]
        out = fuse_detections(sets, FusionConfig(method="nms"))
        assert out.detections == (Detection(110, 100, 0.95),)

    def test_rejects_view_frame(self):
        s = DetectionSet("p", (), "m", "rot90")
        with pytest.raises(DataError, match="back-transform"):
            fuse_detections([s])

    def test_back_transform_round_trip(self):
        truth = [(10.0, 20.0), (1919.0, 0.0), (500.5, 1279.0)]
        for kind in DIHEDRAL_SET:
            t = T(kind)
            pts = transform_points(t, np.array(truth))
            ds = DetectionSet("p", tuple(Detection(x, y, 0.5) for x, y in pts), "m", t.id)
            back = back_transform(ds, t)
            assert back.transform_id == "identity" and back.view_id == t.id
            np.testing.assert_array_equal([(d.x, d.y) for d in back.detections], truth)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_src=st.integers(1, 6),
    radius=st.floats(1.0, 40.0),
)
def test_fusion_invariants(seed, n_src, radius):
    rng = np.random.default_rng(seed)
    sets = []
    for s in range(n_src):
        n = int(rng.integers(0, 8))
        pts = [(*rng.uniform(0, 120, 2), float(rng.uniform())) for _ in range(n)]
        sets.append(dset(pts, view=f"v{s}"))
    fused = fuse_detections(sets, FusionConfig(cluster_radius=radius))
    inputs = np.array([(d.x, d.y) for s in sets for d in s.detections]).reshape(-1, 2)
    assert len(fused) <= len(inputs)
    for d in fused.detections:
        assert 0.0 <= d.confidence <= 1.0
        assert np.hypot(*(inputs - (d.x, d.y)).T).min() <= radius + 1e-9
    # source order does not matter
    again = fuse_detections(list(reversed(sets)), FusionConfig(cluster_radius=radius))
    assert again.detections == fused.detections
