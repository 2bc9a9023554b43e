import csv

import numpy as np
import pytest

from clknn.adapter import TrainConfig
from clknn.datastore import Datastore
from clknn.exceptions import DimensionMismatchError
from clknn.retrieval import RetrievalConfig
from clknn.synthbench import (
    ToyPredictor,
    SynthConfig,
    accuracy_curve,
    dump_pca2d,
    evaluate_pipeline,
    fit_clknn,
    frequency_tiers,
    generate_domain_shift,
    generate_synth,
    lambda_sweep,
    retrieval_accuracy,
    run_ablation,
    train_toy_predictor,
    write_curve_csv,
    write_rows_csv,
    write_summary_csv,
    zipf_probs,
)


def small(**kw):
    base = dict(vocab_size=10, dim=8, train_count=1500, heldout_count=300, seed=0)
    return SynthConfig(**{**base, **kw})


class TestGenerate:
    def test_invalid(self):
        with pytest.raises(ValueError):
            SynthConfig(cluster_spread=0.0)
        with pytest.raises(ValueError):
            SynthConfig(train_count=0)

    def test_shapes(self):
        train, held = generate_synth(small())
        assert (len(train), len(held), train.dim, train.vocab_size) == (1500, 300, 8, 10)

    def test_separable_limit(self):
        train, held = generate_synth(small(cluster_spread=1e-9))
        assert retrieval_accuracy(held, train, 1) == 1.0

    def test_uniform_counts(self):
        train, _ = generate_synth(small(zipf_exponent=0.0, train_count=20000))
        counts = np.bincount(train.tokens, minlength=10)
        # multinomial sd is sqrt(20000*0.1*0.9) ~ 42
        assert np.all(np.abs(counts - 2000) < 5 * 43)

    def test_zipf_skew(self):
        p = zipf_probs(4, 1.0)
        np.testing.assert_allclose(p, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))

    def test_replay(self):
        a, b = generate_synth(small()), generate_synth(small())
        assert a[0] == b[0] and a[1] == b[1]
        assert not generate_synth(small(seed=1))[0] == a[0]

    def test_domain_shift_moves_centers(self):
        cfg = small(train_count=4000)
        general, store, held = generate_domain_shift(cfg)
        assert general == generate_synth(cfg)[0]
        g_mean = general.keys64()[general.tokens == 0].mean(axis=0)
        s_mean = store.keys64()[store.tokens == 0].mean(axis=0)
        h_mean = held.keys64()[held.tokens == 0].mean(axis=0)
        assert np.linalg.norm(g_mean - s_mean) > np.linalg.norm(s_mean - h_mean)

    def test_frequency_tiers(self):
        train, _ = generate_synth(SynthConfig(vocab_size=200, dim=4, train_count=20000, heldout_count=10))
        tiers = frequency_tiers(train.tokens, 200)
        assert tiers["HIGH"]["mass"] > tiers["LOW"]["mass"]
        assert len(tiers["HIGH"]["tokens"]) == 2 and len(tiers["MIDDLE"]["tokens"]) == 40


class TestAccuracy:
    def test_self_retrieval(self):
        _, held = generate_synth(small())
        assert retrieval_accuracy(held, held, 1) == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        store = Datastore(rng.normal(size=(4000, 4)), rng.integers(0, 2, 4000), 2)
        q = Datastore(rng.normal(size=(1000, 4)), rng.integers(0, 2, 1000), 2)
        assert abs(retrieval_accuracy(q, store, 8) - 0.5) <= 0.05

    def test_definition(self):
        store = Datastore(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 0]), 2)
        q = Datastore(np.array([[1.9]]), np.array([0]), 2)
        # neighbors by distance: 2 (tok 1), 1 (tok 0), 3 (tok 0)
        assert retrieval_accuracy(q, store, 3) == pytest.approx(2 / 3)

    def test_curve_non_increasing_when_separated(self):
        train, held = generate_synth(small(cluster_spread=0.2))
        curve = accuracy_curve(held, train, ks=(1, 2, 4, 8, 16, 32))
        assert np.all(np.diff(curve.accuracies) <= 1e-12)
        assert all(0 <= a <= 1 for a in curve.accuracies)

    def test_dim_mismatch(self):
        a = Datastore(np.zeros((2, 2)), np.zeros(2, int), 1)
        b = Datastore(np.zeros((2, 3)), np.zeros(2, int), 1)
        with pytest.raises(DimensionMismatchError):
            retrieval_accuracy(a, b, 1)


class TestPredictor:
    def test_separable_1d(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 600)
        X = (np.where(y == 1, 2.0, -2.0) + 0.5 * rng.normal(size=600))[:, None]
        store = Datastore(X[:400], y[:400], 2)
        model = train_toy_predictor(store, epochs=200, lr=0.5)
        assert (model.predict(X[400:]) == y[400:]).mean() > 0.95

    def test_untrained_is_chance(self):
        train, held = generate_synth(small(zipf_exponent=0.0))
        model = train_toy_predictor(train, epochs=0)
        P = model.predict_proba(held.keys64())
        assert np.max(np.abs(P - 0.1)) < 0.05
        assert abs((model.predict(held.keys64()) == held.tokens).mean() - 0.1) < 0.1

    def test_loss_non_increasing(self):
        train, _ = generate_synth(small())
        model = train_toy_predictor(train, epochs=100, lr=0.1)
        losses = np.array(model.loss_history_)
        assert len(losses) == 101
        assert np.all(np.diff(losses) <= 1e-6)

    def test_deterministic(self):
        train, _ = generate_synth(small())
        a = train_toy_predictor(train, epochs=20, seed=3)
        b = train_toy_predictor(train, epochs=20, seed=3)
        np.testing.assert_array_equal(a.coef_, b.coef_)

    def test_estimator_params(self):
        assert ToyPredictor(vocab_size=4).get_params()["vocab_size"] == 4

    def test_empty_store(self):
        with pytest.raises(ValueError):
            train_toy_predictor(Datastore(np.zeros((0, 2)), np.zeros(0, int), 2))


class TestEvaluate:
    def setup_method(self):
        self.train, self.held = generate_synth(small())
        self.model = train_toy_predictor(self.train, epochs=30)

    def test_lambda_zero_identity(self):
        rep = evaluate_pipeline(self.held, self.train, self.model, rcfg=RetrievalConfig(lam=0.0, metric="l2"))
        assert rep.acc_pknn == rep.acc_pc

    def test_self_store_lambda_one(self):
        rep = evaluate_pipeline(self.held, self.held, self.model,
                                rcfg=RetrievalConfig(k=1, lam=1.0, metric="l2"))
        assert rep.acc_pknn == 1.0 and rep.acc_pr == 1.0

    def test_deterministic(self):
        a = evaluate_pipeline(self.held, self.train, self.model, rcfg=RetrievalConfig(metric="l2"))
        b = evaluate_pipeline(self.held, self.train, self.model, rcfg=RetrievalConfig(metric="l2"))
        assert a == b

    def test_adapter_path_and_sweep(self):
        cfg = TrainConfig(M=2, N=4, K=8, steps=30, batch_size=16, hidden_dim=16, out_dim=8)
        result, pca = fit_clknn(self.train, cfg, 4)
        rep = evaluate_pipeline(self.held, self.train, self.model, result.params, pca,
                                RetrievalConfig(use_adaptive_lambda=True))
        assert rep.method == "clknn" and rep.lambda_mode == "adaptive"
        assert 0 <= rep.mean_lambda <= 0.5
        sweep = lambda_sweep(self.held, self.train, self.model, result.params, pca)
        assert sweep["fixed"][0.0] == sweep["acc_pc"] == sweep["adaptive"][0.0]

    def test_ablation_rows(self):
        cfg = TrainConfig(M=1, N=2, K=4, steps=10, batch_size=8, hidden_dim=8, out_dim=4)
        rows = run_ablation(self.train, self.held, cfg, [(1, 1), (2, 6)], 4, ks=(1, 4))
        assert [(r["M"], r["N"]) for r in rows] == [(1, 1), (2, 6)]
        assert set(rows[0]) == {"M", "N", "final_loss", "acc_top1", "acc_top4"}


class TestCsv:
    def test_writers(self, tmp_path):
        train, held = generate_synth(small())
        model = train_toy_predictor(train, epochs=5)
        rep = evaluate_pipeline(held, train, model, rcfg=RetrievalConfig(metric="l2"), ks=(1, 2))
        write_curve_csv(rep.curve, tmp_path / "c.csv")
        write_summary_csv([rep], tmp_path / "s.csv")
        write_rows_csv([{"M": 1, "acc": 0.5}], tmp_path / "r.csv")
        dump_pca2d(train.keys64(), train.tokens, tmp_path / "p.csv", max_points=50)
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["k", "accuracy"] and [r[0] for r in rows[1:]] == ["1", "2"]
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["method", "acc_pc", "acc_pr", "acc_pknn", "lambda_mode"]
        assert rows[1][0] == "knn" and rows[1][4] == "fixed"
        assert len(list(csv.reader(open(tmp_path / "p.csv")))) == 51
