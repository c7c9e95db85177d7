import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import average_precision_direct, cosine_distance_direct
from semi3net import tensor as T
from semi3net.data import SyntheticSpec, synthesize
from semi3net.model import build_model
from semi3net.retrieval import (MissingCategoryWarning, RetrievalIndex, average_precision, build_index,
                                cosine_distance, evaluate, mean_average_precision, rank)


def _unit_rows(r, n, d):
    v = r.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _index(feats, cats=None):
    n = len(feats)
    cats = np.zeros(n, dtype=int) if cats is None else np.asarray(cats)
    return RetrievalIndex(feats, cats, np.arange(100, 100 + n), "image")


@pytest.fixture(scope="module")
def small():
    spec = SyntheticSpec(num_categories=3, per_category=6, image_size=8, seed=1)
    from semi3net.backbone import BackboneConfig
    cfg = BackboneConfig(stages=((1, 4), (1, 8)), fc_dims=(16,), embed_dim=8, num_classes=3, input_size=8)
    model = build_model(cfg, seed=0)
    model.tie()
    return model, synthesize(spec)


class TestCosineDistance:
    def test_identical(self):
        a = _unit_rows(np.random.default_rng(0), 1, 5)[0]
        assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_summation_oracle(self, rng):
        for _ in range(50):
            a, b = _unit_rows(rng, 2, 7)
            assert abs(cosine_distance(a, b) - cosine_distance_direct(a, b)) <= 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(T.DimensionError):
            cosine_distance([1.0, 0.0], [1.0, 0.0, 0.0])


class TestRank:
    def test_self_first(self, rng):
        feats = _unit_rows(rng, 10, 4)
        assert rank(_index(feats), feats[6]).order[0] == 6

    def test_ties_by_gallery_index(self, rng):
        feats = _unit_rows(rng, 5, 4)
        feats[3] = feats[1]
        r = rank(_index(feats), feats[1])
        assert list(r.order[:2]) == [1, 3]

    def test_full_sort_oracle(self, rng):
        feats = _unit_rows(rng, 20, 6)
        q = _unit_rows(rng, 1, 6)[0]
        r = rank(_index(feats), q)
        d = [cosine_distance_direct(f, q) for f in feats]
        assert list(r.order) == sorted(range(20), key=lambda i: (d[i], i))
        assert np.all(np.diff(r.distances) >= 0)
        np.testing.assert_array_equal(r.ids, 100 + r.order)

    def test_rejects_non_unit_gallery(self):
        with pytest.raises(ValueError):
            _index(np.ones((2, 3)))


class TestMAP:
    def test_single_hit_rank_one(self):
        assert average_precision([True, False, False]) == 1.0

    def test_ranks_one_and_three(self):
        assert average_precision([True, False, True, False]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_no_relevant(self, rng):
        feats = _unit_rows(rng, 4, 3)
        r = rank(_index(feats, [0, 0, 1, 1]), feats[0])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert mean_average_precision([r], [5]) == 0.0
        assert any(issubclass(w.category, MissingCategoryWarning) for w in caught)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), g=st.integers(1, 20), q=st.integers(1, 5), k=st.integers(1, 4))
    def test_direct_definition_oracle(self, seed, g, q, k):
        r = np.random.default_rng(seed)
        feats = _unit_rows(r, g, 4)
        cats = r.integers(0, k, size=g)
        idx = _index(feats, cats)
        queries = _unit_rows(r, q, 4)
        qcats = r.integers(0, k, size=q)
        rankings = [rank(idx, v) for v in queries]
        expect = np.mean([average_precision_direct(list(rk.categories == c)) for rk, c in zip(rankings, qcats)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MissingCategoryWarning)
            got = mean_average_precision(rankings, qcats)
        assert abs(got - expect) <= 1e-12
        assert 0.0 <= got <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_gallery_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        feats = _unit_rows(r, 12, 3)
        cats = r.integers(0, 3, size=12)
        q = _unit_rows(r, 1, 3)[0]
        perm = r.permutation(12)
        c = int(cats[0])
        a = mean_average_precision([rank(_index(feats, cats), q)], [c])
        b = mean_average_precision([rank(_index(feats[perm], cats[perm]), q)], [c])
        assert a == pytest.approx(b, abs=1e-12)


class TestIndex:
    def test_shape_and_norms(self, small):
        model, ds = small
        idx = build_index(model, ds, "image")
        assert idx.features.shape == (len(ds), 8)
        np.testing.assert_allclose(np.linalg.norm(idx.features, axis=1), 1.0, atol=1e-9)

    def test_source_switch(self, small):
        model, ds = small
        a, b = build_index(model, ds, "image"), build_index(model, ds, "edgemap")
        assert not np.array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.categories, b.categories)

    def test_rebuild_bitwise(self, small):
        model, ds = small
        assert build_index(model, ds).features.tobytes() == build_index(model, ds).features.tobytes()

    def test_bad_source(self, small):
        model, ds = small
        with pytest.raises(ValueError):
            build_index(model, ds, "sketch")

    def test_evaluate_in_unit_interval(self, small):
        model, ds = small
        for source in ("image", "edgemap"):
            assert 0.0 <= evaluate(model, ds, source) <= 1.0
