import math

import numpy as np
import pytest

from snipattn.baselines import (
    TfidfClassifier,
    TfidfModel,
    logreg_proba,
    logreg_train,
    tfidf_fit,
    tfidf_matrix,
    tfidf_transform,
)


class TestTfidf:
    def test_idf_values(self):
        m = tfidf_fit([["a", "b"], ["a"]])
        assert m.idf[m.vocabulary["a"]] == pytest.approx(1.0, abs=1e-15)
        assert m.idf[m.vocabulary["b"]] == pytest.approx(math.log(3 / 2) + 1.0, abs=1e-15)

    def test_unit_norm(self):
        m = tfidf_fit([["a", "b", "b"], ["c"]])
        v = tfidf_transform(["a", "b", "b", "c"], m)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-15)

    def test_unseen_only_is_zero(self):
        m = tfidf_fit([["a"], ["b"]])
        assert not tfidf_transform(["zzz"], m).any()

    def test_duplicate_documents_identical_rows(self):
        m = tfidf_fit([["x", "y"], ["x", "y"], ["z"]])
        X = tfidf_matrix([["x", "y"], ["x", "y"]], m)
        assert np.array_equal(X[0], X[1])

    def test_max_features_keeps_most_frequent(self):
        m = tfidf_fit([["a", "b"], ["a", "c"], ["a"]], max_features=1)
        assert list(m.vocabulary) == ["a"]

    def test_empty(self):
        with pytest.raises(ValueError):
            tfidf_fit([])

    def test_json_round_trip(self, tmp_path):
        clf = TfidfClassifier(epochs=20).fit([["a"], ["b"]], [0, 1])
        clf.model.save(tmp_path / "t.json")
        back = TfidfModel.load(tmp_path / "t.json")
        assert back.vocabulary == clf.model.vocabulary
        assert np.array_equal(back.weights, clf.model.weights)
        assert np.array_equal(back.idf, clf.model.idf)


class TestLogreg:
    def test_separable(self):
        X = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        y = [0, 0, 1, 1]
        W, b, _ = logreg_train(X, y, l2=1e-6, epochs=500, lr=2.0)
        assert np.array_equal(np.argmax(logreg_proba(X, W, b), axis=1), y)

    def test_strong_l2_gives_priors(self):
        X = np.random.default_rng(0).normal(size=(40, 5))
        y = [0] * 30 + [1] * 10
        W, b, _ = logreg_train(X, y, l2=1e6, epochs=2000, lr=1.0)
        p = logreg_proba(X, W, b)
        assert np.allclose(p, [0.75, 0.25], atol=1e-3)

    def test_loss_non_increasing(self):
        X = np.random.default_rng(1).random((30, 6))
        y = np.random.default_rng(2).integers(0, 3, 30)
        y[:3] = [0, 1, 2]
        _, _, hist = logreg_train(X, y, epochs=100, lr=0.5)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            logreg_train(np.ones((3, 2)), [1, 1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            logreg_train(np.ones((3, 2)), [0, 1])


def test_classifier_unfit():
    with pytest.raises(RuntimeError):
        TfidfClassifier().predict_proba([["a"]])


def test_classifier_learns_keyword():
    streams = [["noise", "good"]] * 10 + [["noise", "bad"]] * 10
    clf = TfidfClassifier(epochs=300).fit(streams, [1] * 10 + [0] * 10)
    p = clf.predict_proba([["good"], ["bad"]])
    assert p[0, 1] > 0.5 > p[1, 1]
