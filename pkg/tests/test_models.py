import numpy as np
import pytest

from flowguard.dataset import SynthConfig, fit_scaler, scale_dataset, split, synth_flows
from flowguard.errors import ArityMismatch
from flowguard.models import (
    ForestConfig,
    GbtConfig,
    MlpConfig,
    evaluate,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    train_forest,
    train_gbt,
    train_mlp,
)
from flowguard.models.mlp import cross_entropy_and_grads
from flowguard.models.trees import TreeEnsemble

from conftest import make_dataset, numeric_gradient


@pytest.fixture(scope="module")
def flows():
    ds = synth_flows(SynthConfig(2000, 10, 2, 6.0, 0.5), seed=42)
    train, test = split(ds, 0.2, seed=1)
    scaler = fit_scaler(train)
    return scale_dataset(train, scaler), scale_dataset(test, scaler)


def xor_dataset():
    return make_dataset([[0, 0], [0, 1], [1, 0], [1, 1]], [0, 1, 1, 0])


class TestMlp:
    def test_xor_learns_perfectly(self):
        ds = xor_dataset()
        model = train_mlp(ds, MlpConfig(hidden_widths=(8,), epochs=5000,
                                        batch_size=4, learning_rate=0.5, seed=7))
        assert np.mean(model.predict_batch(ds.X) == ds.y) == 1.0

    def test_synth_test_accuracy(self, flows):
        train, test = flows
        model = train_mlp(train, MlpConfig(hidden_widths=(32,), epochs=100, seed=3))
        assert evaluate(model, test).accuracy >= 0.95

    def test_one_class_dataset_rejected(self):
        ds = make_dataset([[0.1], [0.9]], [0, 0], label_map=["only"])
        with pytest.raises(ValueError):
            train_mlp(ds, MlpConfig(epochs=1))

    def test_seed_determinism_is_bitwise(self):
        ds = xor_dataset()
        cfg = MlpConfig(hidden_widths=(4,), epochs=50, batch_size=2,
                        learning_rate=0.2, seed=11)
        a, b = train_mlp(ds, cfg), train_mlp(ds, cfg)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(a.biases, b.biases):
            assert np.array_equal(ba, bb)

    def test_backprop_matches_finite_differences(self):
        # 2 features, 1 hidden layer; every parameter checked
        rng = np.random.default_rng(0)
        ds = make_dataset(rng.uniform(0, 1, (12, 2)), rng.integers(0, 2, 12))
        model = train_mlp(ds, MlpConfig(hidden_widths=(5,), epochs=3,
                                        batch_size=4, learning_rate=0.05, seed=2))
        X, y = ds.X, ds.y
        _, gw, gb = cross_entropy_and_grads(model, X, y)
        analytic = np.concatenate([g.ravel() for g in gw]
                                  + [g.ravel() for g in gb])

        shapes_w = [w.shape for w in model.weights]
        shapes_b = [b.shape for b in model.biases]
        flat = np.concatenate([w.ravel() for w in model.weights]
                              + [b.ravel() for b in model.biases])

        def loss_at(params):
            ws, bs, k = [], [], 0
            for shape in shapes_w:
                size = int(np.prod(shape))
                ws.append(params[k:k + size].reshape(shape)); k += size
            for shape in shapes_b:
                size = int(np.prod(shape))
                bs.append(params[k:k + size].reshape(shape)); k += size
            clone = type(model)(ws, bs)
            return cross_entropy_and_grads(clone, X, y)[0]

        numeric = numeric_gradient(loss_at, flat)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4


class TestForest:
    def test_single_stump_separable(self):
        # oracle: data threshold-separable on one feature, exhaustively checked
        X = np.array([[0.1], [0.2], [0.3], [0.7], [0.8], [0.9]])
        y = np.array([0, 0, 0, 1, 1, 1])
        sep = any(np.mean((X[:, 0] > t) == y) == 1.0
                  for t in (X[:-1, 0] + X[1:, 0]) / 2)
        assert sep
        ds = make_dataset(X, y)
        model = train_forest(ds, ForestConfig(num_trees=1, max_depth=1,
                                              min_leaf=1, feature_subsample=1,
                                              seed=13))
        assert np.mean(model.predict_batch(X) == y) == 1.0

    def test_constant_labels_predict_that_class(self):
        ds = make_dataset([[0.1, 0.2], [0.4, 0.5], [0.8, 0.9]], [1, 1, 1],
                          label_map=["a", "b"])
        model = train_forest(ds, ForestConfig(num_trees=3, seed=0))
        probs = model.predict_proba_batch(ds.X)
        assert np.allclose(probs[:, 1], 1.0)

    def test_seed_determinism(self):
        rng = np.random.default_rng(4)
        ds = make_dataset(rng.uniform(0, 1, (60, 4)), rng.integers(0, 2, 60))
        cfg = ForestConfig(num_trees=5, seed=21)
        a, b = train_forest(ds, cfg), train_forest(ds, cfg)
        for ta, tb in zip(a.trees, b.trees):
            assert np.array_equal(ta.feature, tb.feature)
            assert np.array_equal(ta.threshold, tb.threshold)
            assert np.array_equal(ta.value, tb.value)

    def test_proba_is_mean_of_member_trees(self):
        rng = np.random.default_rng(7)
        ds = make_dataset(rng.uniform(0, 1, (80, 3)), rng.integers(0, 3, 80))
        model = train_forest(ds, ForestConfig(num_trees=3, seed=5))
        X = rng.uniform(0, 1, (20, 3))
        per_tree = [TreeEnsemble([t]).eval(X)[0] for t in model.trees]
        assert np.allclose(model.predict_proba_batch(X),
                           np.mean(per_tree, axis=0))

    def test_synth_test_accuracy(self, flows):
        train, test = flows
        model = train_forest(train, ForestConfig(seed=4))
        assert evaluate(model, test).accuracy >= 0.95


class TestGbt:
    def test_constant_labels_rejected(self):
        ds = make_dataset([[0.1], [0.9]], [0, 0], label_map=["a", "b"])
        with pytest.raises(ValueError):
            train_gbt(ds, GbtConfig(rounds=1))

    def test_zero_rounds_gives_prior(self):
        ds = make_dataset([[0.1], [0.5], [0.9], [0.2]], [0, 0, 0, 1])
        model = train_gbt(ds, GbtConfig(rounds=0))
        for x in ([0.0], [0.33], [1.0]):
            probs = model.predict_proba(np.array(x))
            assert probs == pytest.approx([0.75, 0.25], abs=1e-9)

    def test_zero_rounds_multiclass_prior(self):
        ds = make_dataset([[0.1], [0.5], [0.9], [0.2]], [0, 1, 2, 0])
        model = train_gbt(ds, GbtConfig(rounds=0))
        probs = model.predict_proba(np.array([0.4]))
        assert probs == pytest.approx([0.5, 0.25, 0.25], abs=1e-9)

    def test_staged_scores_accumulate_shrunk_leaves(self):
        rng = np.random.default_rng(3)
        ds = make_dataset(rng.uniform(0, 1, (100, 4)), rng.integers(0, 2, 100))
        model = train_gbt(ds, GbtConfig(rounds=8, max_depth=2, shrinkage=0.3))
        X = rng.uniform(0, 1, (10, 4))
        score = np.full(10, model.base_scores[1])
        for tree in model.trees_per_class[1]:
            step = TreeEnsemble([tree]).eval(X)[0, :, 0]
            score = score + model.shrinkage * step
        assert np.allclose(score, model.scores_batch(X)[:, 1])

    def test_synth_test_accuracy(self, flows):
        train, test = flows
        model = train_gbt(train, GbtConfig(rounds=50, max_depth=3, seed=5))
        assert evaluate(model, test).accuracy >= 0.95


class TestProbModelContract:
    @pytest.mark.parametrize("kind", ["mlp", "forest", "gbt"])
    def test_simplex_on_random_inputs(self, kind, flows):
        train, _ = flows
        model = {
            "mlp": lambda: train_mlp(train, MlpConfig(hidden_widths=(8,), epochs=5, seed=0)),
            "forest": lambda: train_forest(train, ForestConfig(num_trees=5, seed=0)),
            "gbt": lambda: train_gbt(train, GbtConfig(rounds=5, seed=0)),
        }[kind]()
        rng = np.random.default_rng(99)
        X = rng.uniform(0, 1, (1000, train.num_features))
        P = model.predict_proba_batch(X)
        assert np.all(P >= 0)
        assert np.max(np.abs(P.sum(axis=1) - 1.0)) <= 1e-6
        # pure function of the input
        assert np.array_equal(P[:5], model.predict_proba_batch(X[:5]))


class TestEvaluate:
    def test_perfect_predictions(self):
        ds = make_dataset([[0.1], [0.9], [0.2], [0.8]], [0, 1, 0, 1])
        model = train_forest(ds, ForestConfig(num_trees=5, min_leaf=1, seed=1))
        report = evaluate(model, ds)
        assert report.accuracy == 1.0
        assert report.macro_f1 == 1.0

    def test_hand_counted_confusion(self):
        # TP=1, FP=1, FN=0 for class 1; TN=2
        from flowguard.models.metrics import report_from_confusion
        confusion = np.array([[2, 1], [0, 1]])
        report = report_from_confusion(confusion)
        assert report.precision[1] == pytest.approx(0.5)
        assert report.recall[1] == pytest.approx(1.0)
        assert report.f1[1] == pytest.approx(0.6667, abs=1e-4)

    def test_uniform_model_ties_break_to_class_zero(self):
        from flowguard.models.base import ProbModel

        class Uniform(ProbModel):
            num_classes = 3
            num_features = 2
            def predict_proba(self, x):
                return np.full(3, 1 / 3)

        ds = make_dataset([[0, 0], [1, 1], [0, 1], [1, 0]], [0, 1, 2, 0],
                          label_map=["a", "b", "c"])
        report = evaluate(Uniform(), ds)
        assert report.accuracy == pytest.approx(0.5)  # class-0 prevalence

    def test_permutation_invariance(self, flows):
        train, test = flows
        model = train_gbt(train, GbtConfig(rounds=5, seed=0))
        rng = np.random.default_rng(2)
        perm = rng.permutation(test.num_records)
        shuffled = test.subset(perm)
        a, b = evaluate(model, test), evaluate(model, shuffled)
        assert a.accuracy == b.accuracy
        assert np.array_equal(a.confusion, b.confusion)

    def test_arity_mismatch(self, flows):
        train, _ = flows
        model = train_gbt(train, GbtConfig(rounds=2, seed=0))
        bad = make_dataset([[0.1, 0.2]], [0])
        with pytest.raises(ArityMismatch):
            evaluate(model, bad)

    def test_zero_support_f1_is_zero(self):
        from flowguard.models.metrics import report_from_confusion
        confusion = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
        report = report_from_confusion(confusion)
        assert report.f1[2] == 0.0
        assert not np.isnan(report.macro_f1)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["mlp", "forest", "gbt"])
    def test_roundtrip_preserves_predictions(self, kind, flows, tmp_path):
        train, test = flows
        model = {
            "mlp": lambda: train_mlp(train, MlpConfig(hidden_widths=(8,), epochs=5, seed=0)),
            "forest": lambda: train_forest(train, ForestConfig(num_trees=5, seed=0)),
            "gbt": lambda: train_gbt(train, GbtConfig(rounds=5, seed=0)),
        }[kind]()
        path = tmp_path / f"{kind}.json"
        save_model(model, path)
        clone = load_model(path)
        assert np.array_equal(model.predict_proba_batch(test.X[:50]),
                              clone.predict_proba_batch(test.X[:50]))

    def test_kind_tag_and_version(self, flows):
        train, _ = flows
        doc = model_to_dict(train_gbt(train, GbtConfig(rounds=1, seed=0)))
        assert doc["kind"] == "gbt"
        assert doc["format_version"] == 1
        assert model_from_dict(doc).num_features == train.num_features
