"""scikit-learn compatible wrapper around the training pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autoencoder import embed
from .data import ImageDataset, normalize
from .losses import soft_assign
from .metrics import accuracy, hard_assign
from .trainer import TrainConfig, run
from .triplets import AugmentationPolicy
from . import tensor as T


class DeepClusteringEstimator(ClusterMixin, TransformerMixin, BaseEstimator):
    """Convolutional autoencoder clustering with triplet separation.

    ``X`` may be ``N x C x H x W``, ``N x H x W`` (one channel) or flat
    ``N x D`` together with ``image_shape``.  ``transform`` returns latent
    codes, ``predict`` hard cluster assignments, ``score`` the clustering
    accuracy against labels.

    Examples
    --------
    >>> from dcsep.data import synthetic_blobs
    >>> ds = synthetic_blobs(3, 20, 8, seed=0)
    >>> est = DeepClusteringEstimator(n_clusters=3, channels=(4, 8), latent_dim=4,
    ...                               pretrain_epochs=1, joint_epochs=1, batch_size=16)
    >>> est.fit(ds.images).predict(ds.images).shape
    (60,)
    """

    def __init__(self, n_clusters=10, variant="shallow", channels=None, latent_dim=None,
                 alpha=1.0, beta=0.8, gamma=0.01, omega=0.1, margin=0.24, lr=1e-3,
                 batch_size=64, pretrain_epochs=3, joint_epochs=60, augment_count=10,
                 normalize=True, image_shape=None, random_state=0):
        self.n_clusters = n_clusters
        self.variant = variant
        self.channels = channels
        self.latent_dim = latent_dim
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.omega = omega
        self.margin = margin
        self.lr = lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.joint_epochs = joint_epochs
        self.augment_count = augment_count
        self.normalize = normalize
        self.image_shape = image_shape
        self.random_state = random_state

    def _images(self, X, reset):
        X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64],
                        ensure_min_samples=2 if reset else 1)
        if X.ndim == 2:
            if self.image_shape is None:
                raise ValueError("flat input needs image_shape=(C, H, W)")
            X = X.reshape((len(X),) + tuple(self.image_shape))
        elif X.ndim == 3:
            X = X[:, None]
        elif X.ndim != 4:
            raise ValueError(f"expected 2-, 3- or 4-D input, got {X.ndim}-D")
        X = X.astype(np.float32, copy=False)
        if not reset and X.shape[1:] != self.input_shape_:
            raise ValueError(f"expected images of shape {self.input_shape_}, "
                             f"got {X.shape[1:]}")
        return X

    def _config(self):
        seed = int(self.random_state or 0)
        return TrainConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           omega=self.omega, margin=self.margin, lr=self.lr,
                           batch_size=self.batch_size, pretrain_epochs=self.pretrain_epochs,
                           joint_epochs=self.joint_epochs, init_seed=seed,
                           shuffle_seed=seed + 1, augment_seed=seed + 2,
                           variant=self.variant, latent_dim=self.latent_dim,
                           channels=self.channels,
                           policy=AugmentationPolicy.for_digits(
                               augment_count=self.augment_count))

    def fit(self, X, y=None):
        images = self._images(X, reset=True)
        self.input_shape_ = images.shape[1:]
        dataset = ImageDataset(images)
        if self.normalize:
            dataset = normalize(dataset)
        self.mean_, self.std_ = dataset.mean, dataset.std
        result = run(self._config(), dataset, self.n_clusters)
        self.params_ = result.params
        self.cluster_centers_ = result.state.centroids.data.copy()
        self.labels_ = result.assignments
        self.history_ = result.log
        self.n_features_in_ = int(np.prod(self.input_shape_))
        return self

    def _prepare(self, X):
        check_is_fitted(self, "params_")
        images = self._images(X, reset=False)
        if self.normalize:
            images = ((images - self.mean_) / self.std_).astype(np.float32)
        return images

    def transform(self, X):
        images = self._prepare(X)
        return embed(self.params_, images)

    def predict_proba(self, X):
        """Soft cluster assignments."""
        z = self.transform(X)
        return soft_assign(T.Tensor(z), T.Tensor(self.cluster_centers_)).data

    def predict(self, X):
        return hard_assign(self.predict_proba(X))

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    def score(self, X, y):
        """Clustering accuracy under the best one-to-one cluster/label mapping."""
        return accuracy(np.asarray(y), self.predict(X), self.n_clusters).acc
