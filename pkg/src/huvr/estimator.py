"""Scikit-learn style wrappers so the hyper-network composes with the
wider pipeline ecosystem.

``HuvrEncoder.fit`` trains the model on an array of images and
``transform`` maps images to compressed per-image embeddings (the global
TinTok by default). ``TinyTokenPca`` wraps the PCA baseline with the same
interface for side-by-side probing.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import evaluation, trainer
from .data import ImageTensor, LabeledDataset, content_id, to_uint8
from .hypernet import HuvrConfig, HuvrModel
from .losses import LossConfig
from .trainer import TrainConfig


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images [n, 3, H, W], got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def _as_dataset(X: np.ndarray) -> LabeledDataset:
    images = [ImageTensor(x, content_id(to_uint8(x))) for x in X]
    return LabeledDataset(images, np.zeros(len(images), dtype=np.int64), 1)


class HuvrEncoder(BaseEstimator, TransformerMixin):
    """Trainable image -> compressed embedding transformer.

    Parameters mirror the model and training configuration; ``feature_source``
    selects which token stage ``transform`` returns.
    """

    def __init__(self, image_size=32, patch_size=8, d_vit=64, n_enc_blocks=4,
                 n_heads=4, d_t=16, d_dec=64, n_dec_blocks=1,
                 decoder_attention=True, variant="plus_decoder",
                 epochs=10, batch_size=16, lr_base=0.0005, clip_norm=0.01,
                 weight_decay=0.05, feature_source="tintok", seed=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_vit = d_vit
        self.n_enc_blocks = n_enc_blocks
        self.n_heads = n_heads
        self.d_t = d_t
        self.d_dec = d_dec
        self.n_dec_blocks = n_dec_blocks
        self.decoder_attention = decoder_attention
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_base = lr_base
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.feature_source = feature_source
        self.seed = seed

    def _config(self) -> HuvrConfig:
        return HuvrConfig(image_size=self.image_size, patch_size=self.patch_size,
                          d_vit=self.d_vit, n_enc_blocks=self.n_enc_blocks,
                          n_heads=self.n_heads, d_t=self.d_t, d_dec=self.d_dec,
                          n_dec_blocks=self.n_dec_blocks,
                          decoder_attention=self.decoder_attention,
                          variant=self.variant, seed=self.seed)

    def fit(self, X, y=None):
        X = _check_images(X)
        if X.shape[2] != self.image_size or X.shape[3] != self.image_size:
            raise ValueError(f"images must be {self.image_size}x{self.image_size}")
        self.model_ = HuvrModel(self._config())
        cfg = TrainConfig(lr_base=self.lr_base, batch_size=self.batch_size,
                          epochs=self.epochs, clip_norm=self.clip_norm,
                          weight_decay=self.weight_decay, seed=self.seed,
                          loss=LossConfig())
        trainer.train(self.model_, _as_dataset(X), None, cfg)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("HuvrEncoder is not fitted")
        X = _check_images(X)
        return evaluation.extract_features(self.model_, _as_dataset(X),
                                           self.feature_source)

    def reconstruct(self, X) -> np.ndarray:
        """Decode images back to pixels through the fitted hyper-network."""
        if not hasattr(self, "model_"):
            raise NotFittedError("HuvrEncoder is not fitted")
        X = _check_images(X)
        from .autodiff import Tensor
        from .data import normalize
        out = []
        for s in range(0, len(X), self.batch_size):
            recon, _ = self.model_.forward(Tensor(normalize(X[s:s + self.batch_size])))
            out.append(recon.data.copy())
        return np.concatenate(out, axis=0)


class TinyTokenPca(BaseEstimator, TransformerMixin):
    """PCA compression of frozen feature vectors, the TinTok baseline."""

    def __init__(self, d_t=16):
        self.d_t = d_t

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.pca_ = evaluation.fit_pca(X, self.d_t)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "pca_"):
            raise NotFittedError("TinyTokenPca is not fitted")
        return self.pca_.apply(np.asarray(X, dtype=np.float64))

    def inverse_transform(self, Z) -> np.ndarray:
        if not hasattr(self, "pca_"):
            raise NotFittedError("TinyTokenPca is not fitted")
        return self.pca_.invert(np.asarray(Z, dtype=np.float64))
