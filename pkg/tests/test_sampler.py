from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitokit.catalog import Label
from mitokit.errors import ConfigError, DataError
from mitokit.sampler import (
    AliasTable,
    BatchSpec,
    build_plan,
    class_weights,
    dataset_weights,
    draw_batch,
    expected_marginals,
    image_weights,
    monte_carlo_marginals,
    weighted_draw,
)
from mitokit.synth import synthetic_catalog

from conftest import build_catalog, random_catalog


def exact_plan(catalog):
    """Rational-arithmetic weights computed straight from the record collections."""
    d_size, s_ann, c_size = {}, {s: 0 for s in catalog.slides}, {}
    for p in catalog.patches.values():
        d = catalog.slides[p.slide_id].dataset_id
        d_size[d] = d_size.get(d, 0) + 1
        c_size[p.class_label] = c_size.get(p.class_label, 0) + 1
    for a in catalog.annotations.values():
        s_ann[catalog.patches[a.patch_id].slide_id] += 1
    inv_d = {d: Fraction(1, n) for d, n in d_size.items()}
    inv_s = {s: Fraction(1, max(n, 1)) for s, n in s_ann.items()}
    wd = {d: v / sum(inv_d.values()) for d, v in inv_d.items()}
    wi = {s: v / sum(inv_s.values()) for s, v in inv_s.items()}
    wc = {c: Fraction(1, n) for c, n in c_size.items()}
    combined = {}
    for pid, p in catalog.patches.items():
        slide = catalog.slides[p.slide_id]
        combined[pid] = wd[slide.dataset_id] * wi[slide.id] * wc[p.class_label]
    return wd, wi, wc, combined


def rel(a, b):
    return abs(a - b) / abs(b)


class TestDatasetWeights:
    def test_equal_sizes(self):
        cat = build_catalog({"a": {"a1": [(1, 0)] * 10}, "b": {"b1": [(0, 1)] * 10}})
        assert dataset_weights(cat) == {"a": 0.5, "b": 0.5}

    def test_one_and_three(self):
        cat = build_catalog({"a": {"a1": [(1, 0)]}, "b": {"b1": [(0, 1)] * 3}})
        w = dataset_weights(cat)
        # (1/1) / (1 + 1/3) = 3/4
        assert rel(w["a"], 0.75) < 1e-12
        assert rel(w["b"], 0.25) < 1e-12

    def test_six_equal(self):
        cat = build_catalog({f"d{i}": {f"s{i}": [(1, 0), (0, 1)]} for i in range(6)})
        for v in dataset_weights(cat).values():
            assert rel(v, 1 / 6) < 1e-12

    def test_empty_dataset_rejected(self):
        cat = build_catalog({"a": {"a1": [(1, 0)]}, "b": {"b1": []}})
        with pytest.raises(DataError, match="'b'"):
            dataset_weights(cat)


class TestImageWeights:
    def test_equal(self):
        cat = build_catalog({"a": {f"s{i}": [(2, 3)] for i in range(3)}})
        for v in image_weights(cat).values():
            assert rel(v, 1 / 3) < 1e-12

    def test_two_and_eight(self):
        cat = build_catalog({"a": {"s1": [(1, 1)], "s2": [(2, 2), (2, 2)]}})
        w = image_weights(cat)
        # (1/2) / (1/2 + 1/8) = 0.8
        assert rel(w["s1"], 0.8) < 1e-12
        assert rel(w["s2"], 0.2) < 1e-12

    def test_zero_annotation_floor(self):
        cat = build_catalog({"a": {"s1": [(0, 0)], "s2": [(1, 0)]}})
        w = image_weights(cat)
        assert w["s1"] == w["s2"] == 0.5

    def test_global_normalization_crosses_datasets(self):
        cat = build_catalog({"a": {"a1": [(1, 0)], "a2": [(1, 0)]}, "b": {"b1": [(1, 0)]}})
        w = image_weights(cat)
        assert all(rel(v, 1 / 3) < 1e-12 for v in w.values())
        per = image_weights(cat, norm="per_dataset")
        assert per == {"a1": 0.5, "a2": 0.5, "b1": 1.0}

    def test_bad_norm(self, small_catalog):
        with pytest.raises(ConfigError):
            image_weights(small_catalog, norm="local")


class TestClassWeights:
    def test_hundred_three_hundred(self):
        cat = build_catalog({"a": {"s": [(1, 0)] * 100 + [(0, 0)] * 300}})
        w = class_weights(cat)
        assert rel(w["MF"], 0.01) < 1e-12
        assert rel(w["NMF"], 1 / 300) < 1e-12

    def test_symmetric(self):
        cat = build_catalog({"a": {"s": [(1, 0)] * 7 + [(0, 0)] * 7}})
        w = class_weights(cat)
        assert w["MF"] == w["NMF"]

    def test_single_mf(self):
        cat = build_catalog({"a": {"s": [(1, 0)] + [(0, 0)] * 4}})
        assert class_weights(cat)["MF"] == 1.0

    def test_missing_class(self):
        cat = build_catalog({"a": {"s": [(0, 0)] * 4}})
        with pytest.raises(DataError, match="MF"):
            class_weights(cat)


class TestBuildPlan:
    def test_uniform(self):
        cat = build_catalog({"a": {"s": [(1, 0)] * 5}})
        plan = build_plan(cat, factors=("dataset", "image"))
        assert len(set(plan.weights.tolist())) == 1

    def test_factor_product_0006(self):
        # dataset sizes 100 and 300 give 0.75; slide annotation counts 100 and 400 give 0.8;
        # 100 MF patches give 0.01
        cat = build_catalog(
            {
                "a": {"a1": [(1, 0)] * 100},
                "b": {"b1": [(0, 1)] * 200 + [(0, 2)] * 100},
            }
        )
        plan = build_plan(cat)
        assert rel(plan.dataset_weights["a"], 0.75) < 1e-12
        assert rel(plan.image_weights["a1"], 0.8) < 1e-12
        assert rel(plan.class_weights["MF"], 0.01) < 1e-12
        assert rel(plan.combined["a1-p0"], 0.006) < 1e-12

    def test_insertion_order_irrelevant(self, small_catalog):
        from mitokit.catalog import CorpusCatalog

        rev = CorpusCatalog.from_records(
            reversed(list(small_catalog.datasets.values())),
            reversed(list(small_catalog.slides.values())),
            reversed(list(small_catalog.patches.values())),
            reversed(list(small_catalog.annotations.values())),
        )
        a, b = build_plan(small_catalog), build_plan(rev)
        assert a.patch_ids == b.patch_ids
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_product_law_exact(self, small_catalog):
        plan = build_plan(small_catalog)
        for pid, w in plan.combined.items():
            p = small_catalog.patches[pid]
            s = small_catalog.slides[p.slide_id]
            assert w == plan.dataset_weights[s.dataset_id] * plan.image_weights[s.id] * plan.class_weights[p.class_label.value]

    @pytest.mark.parametrize("seed", range(10))
    def test_against_rational_oracle(self, seed):
        cat = random_catalog(np.random.default_rng(seed))
        if min(cat.counts.class_sizes.values()) == 0:
            pytest.skip("random catalog lacks a class")
        plan = build_plan(cat)
        wd, wi, wc, combined = exact_plan(cat)
        for d, v in wd.items():
            assert rel(plan.dataset_weights[d], float(v)) < 1e-12
        for s, v in wi.items():
            assert rel(plan.image_weights[s], float(v)) < 1e-12
        for c, v in wc.items():
            assert rel(plan.class_weights[c.value], float(v)) < 1e-12
        for pid, v in combined.items():
            assert rel(plan.combined[pid], float(v)) < 1e-12
        assert abs(sum(plan.dataset_weights.values()) - 1) < 1e-12
        assert abs(sum(plan.image_weights.values()) - 1) < 1e-12

    def test_unknown_factor(self, small_catalog):
        with pytest.raises(ConfigError):
            build_plan(small_catalog, factors=("dataset", "stain"))

    def test_plan_json(self, small_catalog):
        data = build_plan(small_catalog).to_json()
        assert set(data) == {"factors", "image_norm", "dataset_weights", "image_weights", "class_weights", "combined"}
        assert set(data["combined"]) == set(small_catalog.patches)


def implied_distribution(table: AliasTable) -> np.ndarray:
    n = len(table)
    p = table.prob.copy()
    np.add.at(p, table.alias, 1.0 - table.prob)
    return p / n


class TestAliasTable:
    @pytest.mark.parametrize("seed", range(5))
    def test_reconstructs_weights(self, seed):
        w = np.random.default_rng(seed).exponential(size=257)
        w[::13] = 0.0
        np.testing.assert_allclose(implied_distribution(AliasTable(w)), w / w.sum(), atol=1e-14)

    def test_single_item(self):
        t = AliasTable([3.0])
        assert t.sample(np.random.default_rng(0), 5).tolist() == [0] * 5

    @pytest.mark.parametrize("bad", [[], [0.0, 0.0], [1.0, -1.0], [np.nan]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            AliasTable(bad)


class TestDrawBatch:
    def test_reproducible(self, small_catalog):
        plan = build_plan(small_catalog)
        spec = BatchSpec(24, True, 123)
        assert draw_batch(plan, spec) == draw_batch(plan, spec)
        assert draw_batch(plan, spec) != draw_batch(plan, BatchSpec(24, True, 124))

    def test_uniform_weights_reproducible(self):
        ids = [f"p{i}" for i in range(10)]
        spec = BatchSpec(1000, True, 5)
        draw = weighted_draw(ids, np.ones(10), spec)
        assert draw == weighted_draw(ids, np.ones(10), spec)
        counts = np.array([draw.count(i) for i in ids])
        # multinomial(1000, 1/10): sd = 9.5 per cell
        assert np.all(np.abs(counts - 100) < 5 * 9.5)

    def test_point_mass(self):
        ids = ["a", "b", "c"]
        assert weighted_draw(ids, [0.0, 2.0, 0.0], BatchSpec(24, True, 0)) == ["b"] * 24

    def test_without_replacement(self, small_catalog):
        plan = build_plan(small_catalog)
        batch = draw_batch(plan, BatchSpec(5, False, 1))
        assert sorted(batch) == sorted(small_catalog.patches)
        with pytest.raises(ConfigError):
            draw_batch(plan, BatchSpec(6, False, 1))

    def test_without_replacement_skips_zero_weight(self):
        batch = weighted_draw(["a", "b", "c"], [1.0, 0.0, 1.0], BatchSpec(2, False, 0))
        assert sorted(batch) == ["a", "c"]

    def test_batch_size_positive(self):
        with pytest.raises(ConfigError):
            BatchSpec(0)

    def test_balanced_classes_monte_carlo(self):
        cat = build_catalog({"a": {"s1": [(1, 0)] * 30 + [(0, 1)] * 90}, "b": {"s2": [(0, 0)] * 50}})
        plan = build_plan(cat, factors=("class",))
        mc = monte_carlo_marginals(plan, 10**6, seed=11)
        assert abs(mc["class"]["MF"] - 0.5) < 0.005


@settings(max_examples=30, deadline=None)
@given(
    weights=st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 1e3)), min_size=1, max_size=40).filter(
        lambda w: sum(w) > 0
    ),
    scale=st.one_of(st.sampled_from([0.5, 2.0, 1 / 1024]), st.floats(1e-3, 1e3)),
    seed=st.integers(0, 2**63 - 1),
    replace=st.booleans(),
)
def test_scale_invariance(weights, scale, seed, replace):
    ids = [str(i) for i in range(len(weights))]
    n_positive = sum(w > 0 for w in weights)
    spec = BatchSpec(24 if replace else n_positive, replace, seed)
    a = weighted_draw(ids, weights, spec)
    b = weighted_draw(ids, [w * scale for w in weights], spec)
    assert a == b


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_marginals_sum_to_one(seed):
    cat = random_catalog(np.random.default_rng(seed))
    if min(cat.counts.class_sizes.values()) == 0:
        return
    m = expected_marginals(build_plan(cat))
    assert abs(sum(m["dataset"].values()) - 1) < 1e-12
    assert abs(sum(m["class"].values()) - 1) < 1e-12


class TestMarginals:
    def test_six_equal_balanced(self):
        cat = build_catalog({f"d{i}": {f"s{i}": [(1, 0), (0, 1)]} for i in range(6)})
        m = expected_marginals(build_plan(cat))
        for v in m["dataset"].values():
            assert rel(v, 1 / 6) < 1e-12

    def test_single_class(self):
        cat = build_catalog({"a": {"s": [(0, 1)] * 4}})
        m = expected_marginals(build_plan(cat, factors=("dataset", "image")))
        assert m["class"] == {Label.NMF.value: 1.0}

    def test_six_source_structure_matches_monte_carlo(self):
        plan = build_plan(synthetic_catalog(seed=2))
        exp = expected_marginals(plan)
        mc = monte_carlo_marginals(plan, 10**6, seed=9)
        for group in ("dataset", "class"):
            for k, p in exp[group].items():
                assert abs(mc[group][k] - p) <= 0.005 * max(p, 1e-9) + 3 * np.sqrt(p * (1 - p) / 10**6)
