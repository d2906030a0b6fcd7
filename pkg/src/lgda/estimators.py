"""scikit-learn style wrappers around pretraining and adaptation.

``X`` is an ``N x H x W x 3`` float array in [0, 1] (or a list of
``ImageSample``), ``y`` an ``N x H x W x 2`` binary mask array with channel
0 = cup and channel 1 = disc.
"""
from __future__ import annotations

import tempfile
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import NUM_CLASSES, ImageSample
from .local_denoise import LocalCorrectionConfig, build_pseudolabel_cache
from .metrics import dice
from .sample_division import DivisionConfig
from .segmodel import ReferenceSegNet, pretrained_reference_backbone
from .trainer import TrainConfig, adapt, predict_probs, pretrain_source


# ---------------------------------------------------------------- validation

def check_images(X, stride: int = 1) -> np.ndarray:
    """Validate an image batch and return it as float32 N x H x W x 3."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], ImageSample):
        X = np.stack([s.image for s in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
        raise ValueError("image values must be finite and in [0, 1]")
    if X.shape[1] % stride or X.shape[2] % stride:
        raise ValueError(f"image size {X.shape[1:3]} is not divisible by the model stride {stride}")
    return X


def check_masks(y, n: int, shape: tuple[int, int]) -> np.ndarray:
    """Validate binary N x H x W x 2 masks matching ``n`` images of ``shape``."""
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], ImageSample):
        y = np.stack([s.mask for s in y])
    y = np.asarray(y)
    if y.shape != (n, *shape, NUM_CLASSES):
        raise ValueError(f"expected masks shaped {(n, *shape, NUM_CLASSES)}, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary")
    return y.astype(np.uint8)


def to_samples(X: np.ndarray, y: np.ndarray | None = None, prefix: str = "x",
               domain_tag: str = "target") -> list[ImageSample]:
    return [ImageSample(f"{prefix}_{i:05d}", X[i], None if y is None else y[i], domain_tag)
            for i in range(len(X))]


def _samples_from(X, prefix: str, stride: int) -> list[ImageSample]:
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], ImageSample):
        check_images(X, stride)
        return [s.without_mask() for s in X]
    return to_samples(check_images(X, stride), prefix=prefix)


def mean_dice(pred: np.ndarray, y: np.ndarray) -> float:
    """Mean over images of the disc/cup-averaged Dice."""
    return float(np.mean([np.mean([dice(p[..., c], t[..., c]) for c in range(NUM_CLASSES)])
                          for p, t in zip(pred, y)]))


class _SegmenterMixin:
    threshold: float

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_probs(self.model_, _samples_from(X, "x", self.model_.stride))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return mean_dice(pred, check_masks(y, len(pred), pred.shape[1:3]))


# ---------------------------------------------------------------- estimators

class SourceSegmenter(_SegmenterMixin, BaseEstimator):
    """Supervised source model (BCE + soft-Dice, best-by-validation)."""

    def __init__(self, feature_channels: int = 64, dropout_rate: float = 0.3, epochs: int = 30,
                 batch_size: int = 8, learning_rate: float = 1e-3, val_fraction: float = 0.1,
                 augment: bool = True, threshold: float = 0.5, seed: int = 0):
        self.feature_channels = feature_channels
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.val_fraction = val_fraction
        self.augment = augment
        self.threshold = threshold
        self.seed = seed

    def fit(self, X, y):
        images = check_images(X, ReferenceSegNet.stride)
        masks = check_masks(y, len(images), images.shape[1:3])
        config = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                             epochs_source=self.epochs, val_fraction=self.val_fraction,
                             augment_source=self.augment, seed=self.seed)
        model = pretrained_reference_backbone(self.feature_channels, self.dropout_rate, seed=self.seed)
        self.model_, self.history_ = pretrain_source(model, to_samples(images, masks, "src", "source"), config)
        return self


class LGDAAdapter(_SegmenterMixin, BaseEstimator):
    """Source-free adaptation of a fitted source model to unlabeled targets.

    ``fit`` takes target images only; passing ``y`` is an error, so labels
    cannot leak into adaptation.
    """

    def __init__(self, source=None, epochs: int = 1, batch_size: int = 8, learning_rate: float = 1e-3,
                 num_passes: int = 10, neighborhood: int = 3, top_k: int = 5,
                 strategy: str = "threshold", eta: float = 0.044, fraction: float = 0.3,
                 global_correction: bool = True, prototype_momentum: float = 0.0,
                 metric: str = "cosine", threshold: float = 0.5, cache_dir: str | None = None,
                 seed: int = 0):
        self.source = source
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.num_passes = num_passes
        self.neighborhood = neighborhood
        self.top_k = top_k
        self.strategy = strategy
        self.eta = eta
        self.fraction = fraction
        self.global_correction = global_correction
        self.prototype_momentum = prototype_momentum
        self.metric = metric
        self.threshold = threshold
        self.cache_dir = cache_dir
        self.seed = seed

    def _source_model(self):
        if isinstance(self.source, SourceSegmenter):
            check_is_fitted(self.source, "model_")
            return self.source.model_
        if isinstance(self.source, ReferenceSegNet):
            return self.source
        raise TypeError("source must be a fitted SourceSegmenter or a ReferenceSegNet")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate, epochs_adapt=self.epochs,
            num_passes=self.num_passes, seed=self.seed, prototype_momentum=self.prototype_momentum,
            metric=self.metric, global_correction=self.global_correction,
            division=DivisionConfig(strategy=self.strategy, eta=self.eta, fraction=self.fraction),
            local=LocalCorrectionConfig(neighborhood=self.neighborhood, top_k=self.top_k))

    def fit(self, X, y=None):
        if y is not None:
            raise ValueError("adaptation is source-free and unsupervised; do not pass target labels")
        model = self._source_model()
        targets = _samples_from(X, "tgt", model.stride)
        config = self.train_config()
        if self.cache_dir is not None:
            self._adapt(model, targets, config, self.cache_dir)
        else:
            with tempfile.TemporaryDirectory(prefix="lgda-cache-") as tmp:
                self._adapt(model, targets, config, tmp)
        return self

    def _adapt(self, model, targets: Sequence[ImageSample], config: TrainConfig, cache_dir):
        build_pseudolabel_cache(model, targets, config.num_passes, config.local, cache_dir, seed=self.seed)
        self.model_, self.history_ = adapt(model, targets, cache_dir, config)
