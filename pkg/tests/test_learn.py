"""Boosted-tree training, prediction, explanation and evaluation."""

import json

import numpy as np
import pytest

from riskpilot import learn

from _oracles import brute_force_shapley
from _synth import imbalanced_dataset


def _separable(rng, n=300, margin=0.5):
    X = rng.normal(0, 1, size=(n, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    X[y == 1] += margin
    X[y == 0] -= margin
    return X, y


def test_linearly_separable_reaches_full_training_accuracy():
    rng = np.random.default_rng(1)
    X, y = _separable(rng)
    config = learn.TrainConfig(n_trees=50, max_depth=3, learning_rate=0.3,
                               min_samples_leaf=1, seed=0)
    model = learn.train(X, y, config)
    predictions = (learn.predict_proba(model, X) >= 0.5).astype(float)
    assert np.mean(predictions == y) == 1.0


def test_no_signal_predicts_weighted_base_rate():
    X = np.ones((40, 3))
    y = np.array([1.0] * 10 + [0.0] * 30)
    config = learn.TrainConfig(n_trees=20, max_depth=3, learning_rate=0.1,
                               min_samples_leaf=1, positive_class_weight=1.0, seed=0)
    model = learn.train(X, y, config)
    proba = learn.predict_proba(model, X)
    assert np.allclose(proba, 0.25, atol=1e-9)


def test_determinism_same_seed_bit_identical():
    rng = np.random.default_rng(2)
    X, y = _separable(rng, n=200)
    config = learn.TrainConfig(n_trees=30, max_depth=4, subsample=0.7, seed=123)
    first = learn.dump_model(learn.train(X, y, config))
    second = learn.dump_model(learn.train(X, y, config))
    assert first == second


def test_different_seed_differs_with_subsampling():
    rng = np.random.default_rng(3)
    X, y = _separable(rng, n=200)
    a = learn.train(X, y, learn.TrainConfig(n_trees=10, subsample=0.6, seed=1))
    b = learn.train(X, y, learn.TrainConfig(n_trees=10, subsample=0.6, seed=2))
    assert learn.dump_model(a) != learn.dump_model(b)


def test_degenerate_labels_rejected():
    X = np.random.default_rng(0).normal(size=(20, 2))
    with pytest.raises(learn.DegenerateLabels):
        learn.train(X, np.zeros(20))
    with pytest.raises(learn.DegenerateLabels):
        learn.train(X, np.concatenate([np.ones(19), np.zeros(1)]))


def test_loss_monotone_non_increasing_full_sample():
    rng = np.random.default_rng(4)
    X, y = _separable(rng, n=250, margin=0.2)
    config = learn.TrainConfig(n_trees=80, max_depth=3, learning_rate=0.3,
                               min_samples_leaf=2, seed=0)
    model = learn.train(X, y, config)
    losses = model.loss_history
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_empty_model_balanced_base_predicts_half():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0.0, 1.0, 0.0, 1.0])
    config = learn.TrainConfig(n_trees=1, max_depth=1, min_samples_leaf=4,
                               positive_class_weight=1.0, seed=0)
    model = learn.train(X, y, config)
    model.trees = []  # prior only
    assert learn.predict_proba(model, np.array([5.0])) == pytest.approx(0.5)


def test_probabilities_strictly_inside_unit_interval():
    rng = np.random.default_rng(5)
    X, y = _separable(rng, n=200, margin=3.0)
    model = learn.train(X, y, learn.TrainConfig(n_trees=100, learning_rate=0.5,
                                                min_samples_leaf=1, seed=0))
    proba = learn.predict_proba(model, X)
    assert np.all(proba > 0.0) and np.all(proba < 1.0)


def test_schema_mismatch_on_predict():
    rng = np.random.default_rng(6)
    X, y = _separable(rng, n=100)
    model = learn.train(X, y, learn.TrainConfig(n_trees=5, seed=0))
    with pytest.raises(learn.SchemaMismatch):
        learn.predict_proba(model, np.zeros((3, 5)))


def test_serialization_round_trip_preserves_predictions():
    rng = np.random.default_rng(7)
    X, y = _separable(rng, n=150)
    model = learn.train(X, y, learn.TrainConfig(n_trees=20, seed=0),
                        feature_names=("alpha", "beta"))
    clone = learn.load_model(learn.dump_model(model))
    assert np.array_equal(learn.predict_raw(model, X), learn.predict_raw(clone, X))
    assert clone.feature_names == ("alpha", "beta")


def test_schema_hash_guard():
    rng = np.random.default_rng(8)
    X, y = _separable(rng, n=100)
    model = learn.train(X, y, learn.TrainConfig(n_trees=3, seed=0))
    doc = learn.model_to_doc(model)
    doc["schema"]["feature_names"] = ["x", "y"]  # hash no longer matches
    with pytest.raises(learn.SchemaMismatch):
        learn.model_from_doc(doc)


# -- classify -----------------------------------------------------------------

def test_classify_boundary_closed():
    assert learn.classify(0.9, 0.5) == "alert"
    assert learn.classify(0.5, 0.5) == "alert"
    assert learn.classify(0.49, 0.5) == "pass"


def test_threshold_sweep_monotone():
    for score in (0.01, 0.3, 0.77):
        previous = "alert"
        for threshold in (0.05, 0.2, 0.5, 0.8, 0.95):
            flag = learn.classify(score, threshold)
            assert not (previous == "pass" and flag == "alert")
            previous = flag


def test_classify_threshold_validated():
    with pytest.raises(learn.BadTrainConfig):
        learn.classify(0.5, 0.0)


# -- explanations ----------------------------------------------------------------

def test_stump_attributes_only_its_feature():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(200, 4))
    y = (X[:, 2] > 0).astype(float)
    model = learn.train(X, y, learn.TrainConfig(n_trees=1, max_depth=1,
                                                min_samples_leaf=1, seed=0))
    explanation = learn.explain(model, X[0])
    contributions = dict(explanation.contributions)
    assert contributions["f2"] != 0.0
    for name in ("f0", "f1", "f3"):
        assert contributions[name] == 0.0


def test_local_accuracy_on_random_inputs():
    rng = np.random.default_rng(10)
    X, y = imbalanced_dataset(rng, 60, 240, n_features=8)
    model = learn.train(X, y, learn.TrainConfig(n_trees=40, max_depth=4, seed=0))
    for _ in range(50):
        x = rng.normal(size=8)
        explanation = learn.explain(model, x)
        total = explanation.base + sum(v for _, v in explanation.contributions)
        assert abs(total - explanation.prediction_raw) < 1e-6


def test_matches_brute_force_shapley_small_model():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(300, 6))
    y = ((X[:, 0] + 0.8 * X[:, 1] - 0.5 * X[:, 2] + 0.3 * X[:, 4]) > 0).astype(float)
    model = learn.train(X, y, learn.TrainConfig(n_trees=25, max_depth=3,
                                                min_samples_leaf=2, seed=0))
    for row in range(4):
        explanation = learn.explain(model, X[row])
        got = np.array([v for _, v in explanation.contributions])
        want = brute_force_shapley(model, X[row])
        assert np.max(np.abs(got - want)) < 1e-6


def _stump_tree(feature, threshold=0.0, left_value=-1.0, right_value=1.0):
    return learn.Tree(
        feature=np.array([feature, -1, -1], dtype=np.int32),
        threshold=np.array([threshold, 0.0, 0.0]),
        left=np.array([1, -1, -1], dtype=np.int32),
        right=np.array([2, -1, -1], dtype=np.int32),
        value=np.array([0.0, left_value, right_value]),
        cover=np.array([400.0, 200.0, 200.0]))


def test_duplicated_feature_symmetry():
    # An ensemble using two features interchangeably must attribute equal
    # inputs equally; checked against the exhaustive oracle too.
    model = learn.GbmModel(
        base_score=0.0, learning_rate=1.0,
        trees=[_stump_tree(0), _stump_tree(1),
               _stump_tree(0, left_value=0.5, right_value=-0.5),
               _stump_tree(1, left_value=0.5, right_value=-0.5)],
        feature_names=("a", "b", "c"), schema_version="1",
        config=learn.TrainConfig(n_trees=4, max_depth=1))
    for x in (np.array([0.4, 0.4, -2.0]), np.array([-1.2, -1.2, 3.0])):
        want = brute_force_shapley(model, x)
        explanation = learn.explain(model, x)
        got = np.array([v for _, v in explanation.contributions])
        assert np.max(np.abs(got - want)) < 1e-6
        assert got[0] == pytest.approx(got[1], abs=1e-9)
        assert got[2] == 0.0


def test_explanation_top_ranked_by_magnitude():
    rng = np.random.default_rng(13)
    X, y = _separable(rng, n=200)
    model = learn.train(X, y, learn.TrainConfig(n_trees=10, seed=0),
                        feature_names=("first", "second"))
    top = learn.explain(model, X[0]).top(2)
    magnitudes = [abs(v) for _, v in top]
    assert magnitudes == sorted(magnitudes, reverse=True)


# -- metrics ----------------------------------------------------------------------

def _confusion_arrays(tp, fn, fp, tn):
    y_true = np.concatenate([np.ones(tp + fn), np.zeros(fp + tn)])
    y_pred = np.concatenate([np.ones(tp), np.zeros(fn), np.ones(fp), np.zeros(tn)])
    return y_true, y_pred


def test_minority_metrics_from_hand_confusion():
    y_true, y_pred = _confusion_arrays(tp=141, fn=73, fp=147, tn=1068)
    report = learn.metrics_report(y_true, y_pred)
    assert report["positive"]["support"] == 214
    assert report["negative"]["support"] == 1215
    assert round(report["positive"]["precision"], 2) == 0.49
    assert round(report["positive"]["recall"], 2) == 0.66
    assert round(report["negative"]["precision"], 2) == 0.94
    assert round(report["negative"]["recall"], 2) == 0.88


def test_perfect_predictions():
    y = np.array([0, 1, 1, 0, 1])
    report = learn.metrics_report(y, y, scores=y.astype(float))
    assert report["macro"]["f1"] == 1.0
    assert report["accuracy"] == 1.0
    assert report["roc_auc"] == 1.0


def test_constant_negative_classifier_macro_recall():
    y_true = np.concatenate([np.ones(100), np.zeros(600)])
    y_pred = np.zeros(700)
    report = learn.metrics_report(y_true, y_pred)
    assert report["positive"]["recall"] == 0.0
    assert report["negative"]["recall"] == 1.0
    assert report["macro"]["recall"] == 0.5


def test_micro_accuracy_identity():
    rng = np.random.default_rng(14)
    y_true = rng.integers(0, 2, size=500)
    y_pred = rng.integers(0, 2, size=500)
    report = learn.metrics_report(y_true, y_pred)
    confusion = report["confusion"]
    derived = (confusion["tp"] + confusion["tn"]) / 500
    assert report["accuracy"] == pytest.approx(derived)
    assert report["accuracy"] == pytest.approx(float(np.mean(y_true == y_pred)))


def test_roc_auc_with_ties():
    y_true = np.array([1, 1, 0, 0])
    scores = np.array([0.8, 0.5, 0.5, 0.1])
    # pairs: (1>0): 0.8>0.5, 0.8>0.1, 0.5=0.5 (half), 0.5>0.1 -> 3.5/4
    assert learn.roc_auc(y_true, scores) == pytest.approx(0.875)


def test_empty_test_set():
    with pytest.raises(learn.EmptyTestSet):
        learn.metrics_report(np.array([]), np.array([]))


def test_feature_permutation_invariance():
    rng = np.random.default_rng(15)
    X, y = imbalanced_dataset(rng, 50, 200, n_features=6)
    config = learn.TrainConfig(n_trees=20, max_depth=3, seed=0)
    model = learn.train(X, y, config)
    perm = rng.permutation(6)
    model_perm = learn.train(X[:, perm], y, config)
    x = rng.normal(size=6)
    assert learn.predict_proba(model, x) == pytest.approx(
        learn.predict_proba(model_perm, x[perm]), abs=1e-12)


def test_time_ordered_split():
    train_idx, test_idx = learn.split_time_ordered(100, 0.25)
    assert train_idx.max() < test_idx.min()
    assert len(test_idx) == 25
