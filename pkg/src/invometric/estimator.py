"""scikit-learn estimators over the embedding models.

``InvolutionEmbedder`` is a transformer: it trains a preset on ``(X, y)``
and maps images to embeddings. ``CosineKNN`` classifies embeddings by
majority vote over their cosine nearest neighbours. Chained in a
``Pipeline`` they give an image classifier backed by similarity search.

X holds pixel intensities in ``[0, 255]``, either as ``(N, H, W, C)``
arrays or flattened ``(N, H*W*C)`` rows (``image_shape`` says how to fold
them; square single-channel rows are folded automatically).
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .datasets import BatchPlan, ImageDataset
from .exceptions import ConfigError, ShapeError
from .losses import MSLossConfig
from .models import LOSSES, PRESETS, build_preset, parse_shape, train
from .optim import Adam
from .search import EmbeddingIndex


def _as_images(X, image_shape):
    X = check_array(X, allow_nd=True, dtype=None, ensure_min_features=1)
    if X.ndim == 2:
        if image_shape is None:
            side = math.isqrt(X.shape[1])
            if side * side != X.shape[1]:
                raise ShapeError(f"cannot fold {X.shape[1]} features into an image; set image_shape")
            image_shape = (side, side, 1)
        image_shape = parse_shape(image_shape)
        if math.prod(image_shape) != X.shape[1]:
            raise ShapeError(f"{X.shape[1]} features do not match image_shape {image_shape}")
        X = X.reshape((len(X), *image_shape))
    elif X.ndim == 3:
        X = X[..., None]
    elif X.ndim != 4:
        raise ShapeError(f"expected 2-d rows or 4-d images, got {X.ndim}-d input")
    if X.dtype != np.uint8:
        X = np.asarray(X, dtype=np.float64)
        if not np.isfinite(X).all() or X.min() < 0 or X.max() > 255:
            raise ValueError("pixel intensities must lie in [0, 255]")
        X = np.rint(X).astype(np.uint8)
    return X


class InvolutionEmbedder(TransformerMixin, BaseEstimator):
    """Train a preset and embed images with it.

    ``loss="ms"`` yields unit-norm embeddings suited to cosine search;
    ``loss="ce"`` trains through a classifier head and returns the 256-d
    trunk output.
    """

    def __init__(self, preset="hybrid1", loss="ms", epochs=5, batch_size=64,
                 learning_rate=0.001, classes_per_batch=8, image_shape=None,
                 alpha=2.0, beta=50.0, lam=1.0, epsilon=0.1, random_state=0):
        self.preset = preset
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.classes_per_batch = classes_per_batch
        self.image_shape = image_shape
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.epsilon = epsilon
        self.random_state = random_state

    def _validate_hyperparameters(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if int(self.epochs) < 0 or int(self.batch_size) < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")

    def fit(self, X, y):
        self._validate_hyperparameters()
        images = _as_images(X, self.image_shape)
        y = column_or_1d(y, warn=True)
        if len(y) != len(images):
            raise ValueError(f"X has {len(images)} samples but y has {len(y)}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        seed = 0 if self.random_state is None else int(self.random_state)
        n_classes = len(self.classes_)
        if self.loss == "ms":
            if n_classes < 2:
                raise ValueError("multi-similarity training needs at least two classes")
            plan = BatchPlan.for_loss("ms", int(self.batch_size), seed,
                                      min(int(self.classes_per_batch), n_classes))
        else:
            plan = BatchPlan.for_loss("ce", int(self.batch_size), seed)
        self.model_ = build_preset(self.preset, images.shape[1:], seed, self.loss,
                                   n_classes=n_classes)
        ds = ImageDataset(images, codes.astype(np.int64))
        cfg = MSLossConfig(self.alpha, self.beta, self.lam, self.epsilon)
        self.history_ = train(self.model_, ds, int(self.epochs), plan, ms_config=cfg,
                              optimizer=Adam(lr=self.learning_rate))
        self.image_shape_ = tuple(images.shape[1:])
        self.n_features_in_ = math.prod(self.image_shape_)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        images = _as_images(X, self.image_shape or (self.image_shape_ if np.ndim(X) == 2 else None))
        if images.shape[1:] != self.image_shape_:
            raise ShapeError(f"fitted on {self.image_shape_} images, got {images.shape[1:]}")
        return self.model_.embed(images)


class CosineKNN(ClassifierMixin, BaseEstimator):
    """k-nearest-neighbour classifier under cosine similarity.

    Ties in the vote go to the tied label whose best neighbour ranks highest.
    """

    def __init__(self, n_neighbors=5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X = check_array(X)
        y = column_or_1d(y, warn=True)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if not 1 <= int(self.n_neighbors) <= len(X):
            raise ValueError(f"n_neighbors must be in [1, {len(X)}]")
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.index_ = EmbeddingIndex(X, codes)
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X, n_neighbors=None):
        """``(similarities, indices)`` of the nearest fitted rows, most similar first."""
        check_is_fitted(self, "index_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        k = int(n_neighbors or self.n_neighbors)
        if not 1 <= k <= len(self.index_):
            raise ValueError(f"n_neighbors must be in [1, {len(self.index_)}]")
        q = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
        sims = q @ self.index_.matrix.T
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(sims, order, axis=1), order

    def predict(self, X):
        _, order = self.kneighbors(X)
        votes = self.index_.labels[order]
        n_cls = len(self.classes_)
        out = np.empty(len(votes), dtype=np.int64)
        for i, row in enumerate(votes):
            counts = np.bincount(row, minlength=n_cls)
            tied = np.flatnonzero(counts == counts.max())
            # first neighbour whose label is among the tied
            out[i] = row[np.isin(row, tied)][0]
        return self.classes_[out]
