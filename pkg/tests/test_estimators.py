import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from s2m2 import data
from s2m2.errors import ValidationError
from s2m2.estimators import (CosineFewShotClassifier, FrozenBackbone, S2M2Backbone, check_images,
                             check_labels)

SMALL = dict(epochs=1, batch_size=16, channels=(4, 4, 8, 8), val_tasks=3, val_query=5, val_k_shot=1,
             phase2_max_epochs=2)


@pytest.fixture(scope="module")
def small_split():
    ds = data.generate_synthetic(seed=5, classes=8, per_class=20, size=16)
    x, y = ds.images.astype(np.float64), ds.labels

    def pick(classes):
        mask = np.isin(y, classes)
        return x[mask], y[mask]

    return pick(range(4)), pick(range(4, 6)), pick(range(6, 8))


@pytest.fixture(scope="module")
def fitted(small_split):
    (xb, yb), (xv, yv), _ = small_split
    return S2M2Backbone(**SMALL).fit(xb, yb, xv, yv)


def test_params_round_trip():
    est = S2M2Backbone(alpha=1.0, selfsup="exemplar")
    params = est.get_params()
    assert params["alpha"] == 1.0 and params["selfsup"] == "exemplar"
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(alpha=3.0)
    assert twin.alpha == 3.0 and est.alpha == 1.0
    assert clone(CosineFewShotClassifier(steps=7)).steps == 7


def test_check_images():
    x = np.random.default_rng(0).random((3, 8, 8))
    assert check_images(x).shape == (3, 1, 8, 8)
    with pytest.raises(ValidationError):
        check_images(x * 2)
    with pytest.raises(ValidationError):
        check_images(x[:, None], image_shape=(1, 4, 4))
    with pytest.raises(ValueError):
        check_images(np.full((2, 1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_labels(x, [0, 1])


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        S2M2Backbone().transform(np.zeros((1, 1, 8, 8)))
    with pytest.raises(NotFittedError):
        S2M2Backbone().predict(np.zeros((1, 1, 8, 8)))
    with pytest.raises(NotFittedError):
        CosineFewShotClassifier().predict(np.zeros((1, 4)))


def test_phase2_needs_validation_classes(small_split):
    (xb, yb), _, _ = small_split
    with pytest.raises(ValidationError):
        S2M2Backbone(**SMALL).fit(xb, yb)


def test_overlapping_validation_classes_rejected(small_split):
    (xb, yb), _, _ = small_split
    with pytest.raises(ValidationError):
        S2M2Backbone(**SMALL).fit(xb, yb, xb, yb)


def test_fitted_backbone(fitted, small_split):
    (xb, yb), _, _ = small_split
    assert fitted.method_ == "s2m2_r"
    assert {h["phase"] for h in fitted.history_} == {1, 2}
    feats = fitted.transform(xb[:5])
    assert feats.shape == (5, fitted.n_features_out_) == (5, 8)
    proba = fitted.predict_proba(xb[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(fitted.predict(xb)) <= set(yb)
    assert 0.0 <= fitted.score(xb, yb) <= 1.0


def test_fit_without_phase2(small_split):
    (xb, yb), _, _ = small_split
    est = S2M2Backbone(**SMALL, phase2=False, selfsup="none").fit(xb, yb + 10)
    assert est.method_ == "baseline++"
    np.testing.assert_array_equal(est.classes_, np.arange(10, 14))


def test_fit_is_deterministic(small_split):
    (xb, yb), _, _ = small_split
    a = S2M2Backbone(**SMALL, phase2=False).fit(xb, yb).transform(xb[:4])
    b = S2M2Backbone(**SMALL, phase2=False).fit(xb, yb).transform(xb[:4])
    np.testing.assert_array_equal(a, b)


def test_few_shot_pipeline(fitted, small_split):
    _, _, (xn, yn) = small_split
    support = np.concatenate([np.flatnonzero(yn == c)[:5] for c in (6, 7)])
    query = np.setdiff1d(np.arange(len(yn)), support)
    clf = make_pipeline(FrozenBackbone(fitted.model_), CosineFewShotClassifier(random_state=1))
    clf.fit(xn[support], yn[support])
    assert set(clf.predict(xn[query])) <= {6, 7}
    assert 0.0 <= clf.score(xn[query], yn[query]) <= 1.0


def test_cosine_classifier_separable():
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 5
    X = np.concatenate([c + rng.normal(scale=0.3, size=(10, 3)) for c in centers])
    y = np.repeat(["a", "b", "c"], 10)
    clf = CosineFewShotClassifier().fit(X, y)
    assert clf.score(X, y) == 1.0
    with pytest.raises(ValidationError):
        clf.predict(np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        CosineFewShotClassifier().fit(X[:10], y[:10])


def test_frozen_backbone_needs_model():
    with pytest.raises(ValidationError):
        FrozenBackbone().fit()
