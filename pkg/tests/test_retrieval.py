import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clknn.datastore import Datastore
from clknn.exceptions import DimensionMismatchError
from clknn.retrieval import (
    KNNRetriever,
    NeighborList,
    RetrievalConfig,
    adaptive_lambda,
    interpolate,
    knn_search,
    knn_search_batch,
    retrieval_distribution,
    retrieval_distribution_ip,
    retrieval_distribution_l2,
)

from knn_oracle import brute_force_knn


def nl(scores, tokens):
    n = len(scores)
    return NeighborList(np.arange(n), np.asarray(scores, dtype=float), np.asarray(tokens))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"k": 0}, {"T": 0.0}, {"lam": 1.5}, {"lam": -0.1}, {"metric": "cos"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RetrievalConfig(**kw)


class TestSearch:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.ds = Datastore(rng.normal(size=(200, 4)), rng.integers(0, 5, 200), 5)

    def test_self_match(self):
        res = knn_search(self.ds.keys64()[17], self.ds, 3, "l2")
        assert res.indices[0] == 17
        assert res.scores[0] == 0.0
        assert res.tokens[0] == self.ds.tokens[17]

    @pytest.mark.parametrize("metric", ["l2", "ip"])
    def test_tie_rule(self, metric):
        ds = Datastore(np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([0, 1, 2, 3]), 4)
        res = knn_search(np.array([1.0, 0.0]), ds, 3, metric)
        assert res.indices.tolist()[:2] == [1, 2]
        res = knn_search(np.array([1.0, 1.0]), ds, 4, metric)
        assert res.indices.tolist() == [0, 1, 2, 3]

    def test_k_exceeds_size(self):
        res = knn_search(np.zeros(4), self.ds, 1000, "l2")
        assert sorted(res.indices.tolist()) == list(range(200))

    def test_scores_ordered(self):
        res = knn_search(np.ones(4), self.ds, 20, "l2")
        assert np.all(np.diff(res.scores) >= 0)
        res = knn_search(np.ones(4), self.ds, 20, "ip")
        assert np.all(np.diff(res.scores) <= 0)

    def test_l2_score_is_distance(self):
        q = np.array([1.0, 2.0, 0.0, -1.0])
        res = knn_search(q, self.ds, 1, "l2")
        assert res.scores[0] == pytest.approx(np.linalg.norm(self.ds.keys64()[res.indices[0]] - q))

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            knn_search(np.zeros(3), self.ds, 1)

    def test_duplicates_all_returned(self):
        ds = Datastore(np.zeros((5, 2)), np.arange(5), 5)
        assert knn_search(np.zeros(2), ds, 5).indices.tolist() == [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("metric", ["l2", "ip"])
    def test_against_scan_oracle(self, metric):
        rng = np.random.default_rng(1)
        keys = rng.normal(size=(10_000, 16))
        Q = rng.normal(size=(100, 16))
        idx, _ = knn_search_batch(Q, keys, 32, metric)
        np.testing.assert_array_equal(idx, brute_force_knn(Q, keys, 32, metric))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 40), metric=st.sampled_from(["l2", "ip"]))
    def test_quantized_keys_with_ties(self, seed, k, metric):
        # integer-valued coordinates make exact ties common
        rng = np.random.default_rng(seed)
        keys = rng.integers(-2, 3, size=(60, 3)).astype(float)
        Q = rng.integers(-2, 3, size=(5, 3)).astype(float)
        idx, _ = knn_search_batch(Q, keys, k, metric)
        np.testing.assert_array_equal(idx, brute_force_knn(Q, keys, min(k, 60), metric))


class TestDistributions:
    def test_l2_scalar(self):
        p = retrieval_distribution_l2(nl([0.0, math.log(2)], [0, 1]), 1.0, 3)
        np.testing.assert_allclose(p, [2 / 3, 1 / 3, 0.0], atol=1e-15)

    def test_l2_symmetry(self):
        np.testing.assert_allclose(retrieval_distribution_l2(nl([1.3, 1.3], [0, 2]), 0.5, 3), [0.5, 0, 0.5])

    def test_unanimous(self):
        p = retrieval_distribution_l2(nl([0.1, 5.0, 9.0], [4, 4, 4]), 0.1, 5)
        assert p[4] == 1.0

    def test_ip_scalar(self):
        p = retrieval_distribution_ip(nl([1.0, 0.0], [0, 1]), 1.0, 2)
        assert p[0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)

    def test_ip_equal_scores_count_proportional(self):
        p = retrieval_distribution_ip(nl([0.3] * 4, [0, 0, 0, 2]), 0.01, 3)
        np.testing.assert_allclose(p, [0.75, 0, 0.25])

    @pytest.mark.parametrize("score", [-1.0, 0.2, 1.0])
    def test_single_neighbor(self, score):
        assert retrieval_distribution_ip(nl([score], [3]), 0.05, 4)[3] == 1.0

    def test_ip_range_violation(self):
        with pytest.raises(ValueError):
            retrieval_distribution_ip(nl([1.01, 0.0], [0, 1]), 1.0, 2)
        retrieval_distribution_ip(nl([1.0 + 1e-10], [0]), 1.0, 2)

    def test_temperature_limits(self):
        nb = nl([0.5, 1.0, 2.0, 0.5], [0, 1, 1, 2])
        hot = retrieval_distribution_l2(nb, 1e6, 3)
        np.testing.assert_allclose(hot, [0.25, 0.5, 0.25], atol=1e-5)
        cold = retrieval_distribution_l2(nb, 1e-6, 3)
        np.testing.assert_allclose(cold, [0.5, 0.0, 0.5], atol=1e-12)

    def test_extreme_logits_finite(self):
        p = retrieval_distribution_l2(nl([1e4, 2e4], [0, 1]), 1e-3, 2)
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_dispatch(self):
        nb = nl([0.9, 0.1], [0, 1])
        np.testing.assert_array_equal(retrieval_distribution(nb, 0.5, 2, "ip"), retrieval_distribution_ip(nb, 0.5, 2))
        np.testing.assert_array_equal(retrieval_distribution(nb, 0.5, 2, "l2"), retrieval_distribution_l2(nb, 0.5, 2))

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_normalized(self, seed):
        rng = np.random.default_rng(seed)
        k, V = int(rng.integers(1, 30)), int(rng.integers(1, 20))
        tokens = rng.integers(0, V, k)
        T = float(10 ** rng.uniform(-3, 3))
        p = retrieval_distribution_l2(nl(np.sort(rng.exponential(size=k)), tokens), T, V)
        assert abs(p.sum() - 1) <= 1e-9
        p = retrieval_distribution_ip(nl(rng.uniform(-1, 1, k), tokens), T, V)
        assert abs(p.sum() - 1) <= 1e-9


class TestLambda:
    def test_perfect(self):
        assert adaptive_lambda(nl([1.0, 1.0], [0, 1]), 0.7) == 0.7

    def test_clamp(self):
        assert adaptive_lambda(nl([-0.5, 0.2], [0, 1]), 0.7) == 0.0

    def test_mean(self):
        assert adaptive_lambda(nl([1.0, 0.5, 0.5, 0.0], [0] * 4), 0.8) == pytest.approx(0.4, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_bounds_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 16))
        s = rng.uniform(-1, 1, k)
        lam = float(rng.uniform())
        a = adaptive_lambda(nl(s, [0] * k), lam)
        assert 0 <= a <= lam
        i = int(rng.integers(k))
        s2 = s.copy()
        s2[i] = rng.uniform(s[i], 1)
        assert adaptive_lambda(nl(s2, [0] * k), lam) >= a


class TestInterpolate:
    def test_endpoints(self):
        pc, pr = np.array([0.9, 0.1]), np.array([0.2, 0.8])
        np.testing.assert_array_equal(interpolate(pc, pr, 0.0), pc)
        np.testing.assert_array_equal(interpolate(pc, pr, 1.0), pr)

    def test_arithmetic(self):
        np.testing.assert_allclose(interpolate([0.9, 0.1], [0.2, 0.8], 0.5), [0.55, 0.45], atol=1e-15)

    def test_errors(self):
        with pytest.raises(DimensionMismatchError):
            interpolate([1.0], [0.5, 0.5], 0.5)
        with pytest.raises(ValueError):
            interpolate([1.0], [1.0], 1.2)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_point_mass_dominance(self, seed):
        rng = np.random.default_rng(seed)
        V = int(rng.integers(2, 30))
        pc = rng.dirichlet(np.ones(V))
        v = int(rng.integers(V))
        pr = np.zeros(V)
        pr[v] = 1.0
        lam = float(rng.uniform())
        out = interpolate(pc, pr, lam)
        assert out[v] >= lam - 1e-15
        assert abs(out.sum() - 1) <= 1e-9


class TestEstimator:
    def test_fit_predict(self):
        rng = np.random.default_rng(2)
        centers = np.eye(3) * 5
        y = rng.integers(0, 3, 300)
        X = centers[y] + rng.normal(size=(300, 3)) * 0.3
        est = KNNRetriever(n_neighbors=5, temperature=1.0, metric="l2").fit(X, y)
        assert (est.predict(X) == y).mean() > 0.99
        P = est.predict_proba(X[:10])
        np.testing.assert_allclose(P.sum(axis=1), 1.0)
        assert est.get_params()["n_neighbors"] == 5

    def test_from_datastore(self):
        ds = Datastore(np.eye(4), np.arange(4), 6)
        est = KNNRetriever.from_datastore(ds, n_neighbors=1, metric="ip")
        assert est.predict_proba(np.eye(4)).shape == (4, 6)
        assert est.predict(np.eye(4)).tolist() == [0, 1, 2, 3]
