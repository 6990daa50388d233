"""scikit-learn style wrappers around IGD and the DSVDD baselines."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .inference import detection_scores, localization_map
from .models import BackboneConfig
from .trainer import TrainConfig, encode_all, run_em, train_dsvdd_baseline


def check_images(X, n_channels=None, resolution=None) -> np.ndarray:
    """Validate an image batch and return it as float32 ``(N, C, H, W)``.

    Parameters
    ----------
    X : array-like, shape (N, H, W) or (N, H, W, C)
        Intensities in [0, 1]; ``C`` must be at most 4.
    n_channels, resolution : optional
        When given (from a fitted model), the batch must match them.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError("images must be numeric")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] > 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, H, W, C<=4), got {X.shape}")
    if len(X) == 0:
        raise ValueError("need at least one image")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    if n_channels is not None and X.shape[-1] != n_channels:
        raise ValueError(f"model was fitted on {n_channels}-channel images, got {X.shape[-1]}")
    if resolution is not None and tuple(X.shape[1:3]) != tuple(resolution):
        raise ValueError(f"model was fitted on {tuple(resolution)} images, got {tuple(X.shape[1:3])}")
    return np.ascontiguousarray(X.transpose(0, 3, 1, 2))


class _DeepOneClass(BaseEstimator, OutlierMixin, TransformerMixin):
    """Shared prediction plumbing; subclasses implement ``_fit_models``.

    Follows the scikit-learn outlier convention: ``score_samples`` and
    ``decision_function`` are larger for normal images and ``predict``
    returns +1 (normal) or -1 (anomalous). ``anomaly_score`` gives the raw
    score where larger means more anomalous.
    """

    def _backbone(self):
        return BackboneConfig(variant=self.variant, latent_dim=self.latent_dim, width=self.width)

    def fit(self, X, y=None):
        """Fit on normal images ``X``; ``y`` is ignored."""
        if not 0.0 <= self.contamination < 0.5:
            raise ValueError("contamination must lie in [0, 0.5)")
        x = check_images(X)
        self.n_channels_ = x.shape[1]
        self.resolution_ = tuple(x.shape[2:])
        self._fit_models(torch.from_numpy(x))
        train_scores = self.anomaly_score(X)
        self.offset_ = -float(np.quantile(train_scores, 1.0 - self.contamination))
        return self

    def _checked(self, X) -> torch.Tensor:
        check_is_fitted(self, "global_model_")
        return torch.from_numpy(check_images(X, self.n_channels_, self.resolution_))

    def anomaly_score(self, X) -> np.ndarray:
        x = self._checked(X)
        out = detection_scores(x, self.global_model_, getattr(self, "local_model_", None),
                               stride=self._stride(), use_local=getattr(self, "local_model_", None) is not None)
        return np.array([b.s_total for b in out])

    def _stride(self):
        return None

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) < 0, -1, 1)

    def transform(self, X) -> np.ndarray:
        """Latent codes of the global encoder, shape ``(N, latent_dim)``."""
        x = self._checked(X)
        return encode_all(self.global_model_.network.encoder, x).numpy()


class IGD(_DeepOneClass):
    """Interpolated Gaussian descriptor one-class detector.

    Parameters
    ----------
    epochs, lr, batch_size, weight_decay :
        Optimiser settings shared by the global and local models.
    lambda1, lambda2, lambda3, rho :
        Loss weights; see :class:`igd.trainer.TrainConfig`.
    latent_dim, variant, width :
        Backbone settings; see :class:`igd.models.BackboneConfig`.
    use_local : bool
        Also train a patch-level model and fuse its max patch score.
    patch_size, patches_per_image, local_stride :
        Local model sampling and inference grid.
    contamination : float
        Expected anomaly fraction in the training data; sets ``offset_``.
    random_state : int
    """

    def __init__(self, epochs=30, lr=1e-4, batch_size=64, weight_decay=1e-6, lambda1=1.0, lambda2=1.0,
                 lambda3=0.1, rho=0.15, latent_dim=128, variant="desk_cnn", width=16, use_local=False,
                 patch_size=(16, 16), patches_per_image=4, local_stride=None, contamination=0.0,
                 random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.rho = rho
        self.latent_dim = latent_dim
        self.variant = variant
        self.width = width
        self.use_local = use_local
        self.patch_size = patch_size
        self.patches_per_image = patches_per_image
        self.local_stride = local_stride
        self.contamination = contamination
        self.random_state = random_state

    def _train_config(self, scope):
        return TrainConfig(lambda1=self.lambda1, lambda2=self.lambda2, lambda3=self.lambda3, rho=self.rho,
                           lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.random_state, model_scope=scope,
                           patch_size=self.patch_size, patches_per_image=self.patches_per_image)

    def _fit_models(self, x):
        self.global_model_, self.train_state_ = run_em(x, self._train_config("global"), self._backbone())
        self.descriptor_ = self.global_model_.descriptor
        if self.use_local:
            self.local_model_, _ = run_em(x, self._train_config("local"), self._backbone())
        else:
            self.local_model_ = None

    def _stride(self):
        return self.local_stride

    def localize(self, X, smooth=0) -> np.ndarray:
        """Per-pixel anomaly maps, shape ``(N, H, W)``."""
        x = self._checked(X)
        return np.stack([localization_map(xi, self.global_model_, self.local_model_, smooth) for xi in x])


class DeepSVDD(_DeepOneClass):
    """Fixed-centre hypersphere baseline; ``reconstruction=True`` adds the reconstruction loss."""

    def __init__(self, epochs=30, lr=1e-4, batch_size=64, weight_decay=1e-6, lambda2=1.0, rho=0.15,
                 reconstruction=False, latent_dim=128, variant="desk_cnn", width=16, contamination=0.0,
                 random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.lambda2 = lambda2
        self.rho = rho
        self.reconstruction = reconstruction
        self.latent_dim = latent_dim
        self.variant = variant
        self.width = width
        self.contamination = contamination
        self.random_state = random_state

    def _fit_models(self, x):
        cfg = TrainConfig(lambda2=self.lambda2, rho=self.rho, lr=self.lr, weight_decay=self.weight_decay,
                          batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state,
                          baseline="dsvdd_rec" if self.reconstruction else "dsvdd")
        self.global_model_ = train_dsvdd_baseline(x, cfg, self._backbone())
        self.center_ = self.global_model_.center.numpy()
