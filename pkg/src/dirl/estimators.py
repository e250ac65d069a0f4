"""Estimator-style wrappers over the training loops.

`DirlPretrainer` is a transformer: fit runs self-distillation pretraining on
images plus centroid annotations, transform returns mean-pooled encoder
features. `DualStreamMilClassifier` is a classifier over bags of instance
features. Both follow the usual conventions: constructor args are stored
verbatim, fitted state lives in trailing-underscore attributes, get_params /
set_params come from the base class.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .cell_prior import CentroidMap
from .config import DEFAULTS
from .encoder import encode
from .errors import ConfigError, DataError, NotFittedError
from .mil import Bag, MilConfig, _predict_scores, mil_forward, train_mil
from .ssl.trainer import init_train_state, train_epochs
from .validation import check_bags, check_images, check_labels


def _as_centroid_map(entry, size: int) -> CentroidMap:
    if isinstance(entry, CentroidMap):
        return entry
    return CentroidMap(size, size, [(int(x), int(y), int(c)) for x, y, c in entry])


class DirlPretrainer(BaseEstimator, TransformerMixin):
    """Self-distillation pretraining of a patch-token encoder.

    Parameters mirror the pipeline config; anything else can be overridden
    through `overrides` with raw config keys (e.g. {"ssl.lambda2": 0.05}).
    """

    def __init__(self, variant="dirl", epochs=30, batch_size=16, lr=5e-4,
                 patch_size=8, embed_dim=32, depth=3, heads=4,
                 aux_cell_count=False, seed=0, overrides=None):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.aux_cell_count = aux_cell_count
        self.seed = seed
        self.overrides = overrides

    def _config(self, image_size: int) -> dict:
        cfg = dict(DEFAULTS)
        cfg.update({
            "data.image_size": image_size,
            "encoder.p": self.patch_size,
            "encoder.d": self.embed_dim,
            "encoder.L": self.depth,
            "encoder.h": self.heads,
            "ssl.epochs": self.epochs,
            "ssl.batch_size": self.batch_size,
            "ssl.lr": self.lr,
        })
        for key, value in (self.overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r} in overrides")
            cfg[key] = value
        return cfg

    def fit(self, X, y=None, centroid_maps=None):
        """X: (N, S, S, 3) images; centroid_maps: one annotation per image."""
        X = check_images(X)
        size = X.shape[1]
        if centroid_maps is None:
            if self.variant != "baseline":
                raise DataError(
                    f"variant {self.variant!r} pools cell regions and needs "
                    f"centroid_maps; only 'baseline' can fit without them"
                )
            maps = [CentroidMap(size, size, []) for _ in range(len(X))]
        else:
            if len(centroid_maps) != len(X):
                raise DataError(
                    f"{len(centroid_maps)} centroid maps for {len(X)} images"
                )
            maps = [_as_centroid_map(m, size) for m in centroid_maps]

        cfg = self._config(size)
        state = init_train_state(cfg, self.variant, self.seed, len(X),
                                 aux_enabled=self.aux_cell_count)
        self.history_ = train_epochs(list(X), maps, state)
        self.state_ = state
        self.encoder_config_ = state.enc_cfg
        self.n_features_out_ = state.enc_cfg.d
        return self

    def transform(self, X) -> np.ndarray:
        """Mean-pooled final-layer tokens from the momentum encoder."""
        if not hasattr(self, "state_"):
            raise NotFittedError("this DirlPretrainer has not been fitted yet")
        X = check_images(X)
        cfg = self.encoder_config_
        if X.shape[1] % cfg.p or (X.shape[1] // cfg.p) ** 2 != cfg.n:
            raise DataError(
                f"images of {X.shape[1]}px do not produce {cfg.n} tokens at p={cfg.p}"
            )
        out = np.zeros((len(X), cfg.d))
        for start in range(0, len(X), 64):
            chunk = X[start : start + 64]
            t, _ = encode(chunk, cfg, self.state_.teacher.encoder)
            out[start : start + len(chunk)] = t.tokens.data.mean(axis=-2)
        return out


class DualStreamMilClassifier(BaseEstimator, ClassifierMixin):
    """Bag classifier mixing a critical-instance stream with attention pooling."""

    def __init__(self, query_dim=32, lr=2e-4, weight_decay=5e-2, epochs=50,
                 val_fraction=0.2, seed=0):
        self.query_dim = query_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        """X: sequence of (N_i, d) instance-feature arrays; y: bag labels."""
        bags = check_bags(X)
        y = check_labels(y, len(bags))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = bags[0].shape[1]
        cfg = MilConfig(
            n_classes=len(self.classes_),
            in_dim=self.n_features_in_,
            query_dim=self.query_dim,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            val_fraction=self.val_fraction,
        )
        wrapped = [Bag(f"bag{i:05d}", int(label), feats)
                   for i, (feats, label) in enumerate(zip(bags, y_enc))]
        self.params_, self.fit_info_ = train_mil(wrapped, cfg, self.seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this DualStreamMilClassifier has not been fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        bags = check_bags(X)
        wrapped = [Bag(f"q{i:05d}", 0, feats) for i, feats in enumerate(bags)]
        return _predict_scores(wrapped, self.params_, len(self.classes_))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def bag_attention(self, bag_features) -> np.ndarray:
        """Instance attention weights for one bag (sums to 1)."""
        self._check_fitted()
        feats = check_bags([bag_features])[0]
        _, _, attn = mil_forward(Bag("q", 0, feats), self.params_)
        return attn
