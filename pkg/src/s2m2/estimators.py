"""scikit-learn style estimators over the functional training and evaluation code.

``S2M2Backbone`` learns a feature extractor from base-class images and acts as
a transformer (images -> features). ``CosineFewShotClassifier`` is the novel
class head fitted on those features, so a few-shot task is::

    clf = make_pipeline(FrozenBackbone(backbone.model_), CosineFewShotClassifier())
    clf.fit(support_images, support_labels).score(query_images, query_labels)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import ImageDataset, RotationConfig, SplitSpec
from .errors import ValidationError
from .evaluation import AdaptConfig, EpisodeSpec, embed, fit_cosine_classifier
from .losses import MixupSpec, SelfSupSpec
from .model import FewShotModel
from .tensor import Tensor, no_grad
from .training import TrainConfig, run_s2m2


def check_images(X, image_shape=None) -> np.ndarray:
    """(n, C, H, W) float array with pixels in [0, 1]; (n, H, W) gains a channel axis."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValidationError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValidationError("pixel values must lie in [0, 1]")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValidationError(f"images of shape {X.shape[1:]} do not match the fitted shape {tuple(image_shape)}")
    return X


def check_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    """Validated images plus a 1-D label vector of the same length."""
    y = np.asarray(y)
    flat = np.asarray(X).reshape(len(X), -1) if hasattr(X, "__len__") else X
    check_X_y(flat, y, ensure_min_samples=2)
    return check_images(X), y


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class S2M2Backbone(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Two-phase S2M2 feature learner.

    ``fit(X, y)`` trains on base-class images; phase 2 (Manifold Mixup
    fine-tuning) needs held-out classes passed as ``X_val, y_val`` and is
    skipped when ``phase2=False``. ``transform`` returns d-dimensional
    features; ``predict`` classifies into the base classes.
    """

    def __init__(self, selfsup="rotation", phase2=True, epochs=30, batch_size=32, lr=None, optimizer="adam",
                 alpha=2.0, mixup_layers=(0, 1, 2, 3), angles=(0, 90, 180, 270), copies=4, scale=10.0,
                 channels=(16, 32, 64, 64), strides=(2, 1, 2, 1), phase2_max_epochs=10,
                 val_n_way=5, val_k_shot=5, val_query=15, val_tasks=100, n_jobs=1, random_state=0):
        self.selfsup = selfsup
        self.phase2 = phase2
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.alpha = alpha
        self.mixup_layers = mixup_layers
        self.angles = angles
        self.copies = copies
        self.scale = scale
        self.channels = channels
        self.strides = strides
        self.phase2_max_epochs = phase2_max_epochs
        self.val_n_way = val_n_way
        self.val_k_shot = val_k_shot
        self.val_query = val_query
        self.val_tasks = val_tasks
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, optimizer=self.optimizer,
            seed=self.random_state, selfsup=SelfSupSpec(self.selfsup, RotationConfig(tuple(self.angles)), self.copies),
            mixup=MixupSpec(self.alpha, tuple(self.mixup_layers)), phase2=self.phase2,
            phase2_max_epochs=self.phase2_max_epochs,
            val_episodes=EpisodeSpec(self.val_n_way, self.val_k_shot, self.val_query, self.val_tasks,
                                     self.random_state),
            adapt=AdaptConfig(scale=self.scale), scale=self.scale,
            channels=tuple(self.channels), strides=tuple(self.strides))

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_labels(X, y)
        config = self._train_config()
        self.classes_ = np.unique(y)
        images, labels = [X], [np.searchsorted(self.classes_, y)]
        val = ()
        if X_val is not None:
            X_val, y_val = check_labels(X_val, y_val)
            val_classes, val_labels = np.unique(y_val, return_inverse=True)
            if np.intersect1d(val_classes, self.classes_).size:
                raise ValidationError("validation classes must be disjoint from the training classes")
            images.append(check_images(X_val, X.shape[1:]))
            labels.append(val_labels + len(self.classes_))
            val = range(len(self.classes_), len(self.classes_) + len(val_classes))
        elif self.phase2:
            raise ValidationError("phase 2 selects epochs on held-out classes; pass X_val and y_val")
        n_total = len(self.classes_) + len(val)
        dataset = ImageDataset(np.concatenate(images).astype(np.float32), np.concatenate(labels), n_total)
        splits = SplitSpec(range(len(self.classes_)), val, ())
        result = run_s2m2(dataset, splits, config, n_jobs=self.n_jobs)
        self.model_ = result.model
        self.history_ = result.state.history
        self.method_ = result.method
        self.image_shape_ = X.shape[1:]
        self.n_features_out_ = self.model_.backbone.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_.backbone, check_images(X, self.image_shape_))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_shape_)
        with no_grad():
            return self.model_.logits(X).data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))


class FrozenBackbone(TransformerMixin, BaseEstimator):
    """Wraps a trained ``FewShotModel`` (e.g. from a checkpoint) as a stateless transformer."""

    def __init__(self, model: FewShotModel | None = None, batch_size=256):
        self.model = model
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValidationError("FrozenBackbone needs a trained model")
        self.n_features_out_ = self.model.backbone.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self)
        return embed(self.model.backbone, check_images(X, self.model.backbone.image_shape), self.batch_size)

    def __sklearn_is_fitted__(self):
        return self.model is not None


class CosineFewShotClassifier(ClassifierMixin, BaseEstimator):
    """Cosine classifier fitted on fixed features (full-batch Adam)."""

    def __init__(self, steps=100, lr=1e-2, scale=10.0, random_state=0):
        self.steps = steps
        self.lr = lr
        self.scale = scale
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, ensure_min_samples=2)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        self.classifier_ = fit_cosine_classifier(X, encoded, len(self.classes_),
                                                 AdaptConfig(self.steps, self.lr, self.scale), self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "classifier_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        with no_grad():
            return self.classifier_(Tensor(X)).data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

