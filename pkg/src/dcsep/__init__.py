"""Deep convolutional clustering with triplet-based inter-class separation,
built on a small numpy autodiff core."""

from .autoencoder import NetworkSpec, build, decode, embed, encode
from .data import (ImageDataset, imbalanced_subsample, load_idx, normalize,
                   save_idx, synthetic_blobs)
from .errors import DcsepError
from .estimator import DeepClusteringEstimator
from .kmeans import kmeans
from .losses import (ClusterState, balance_loss, kl_clustering_loss, soft_assign,
                     target_distribution, triplet_loss)
from .metrics import accuracy, hard_assign, kmeans_pixel_baseline
from .trainer import TrainConfig, init_clusters, pretrain, run, train_joint
from .triplets import AugmentationPolicy

__version__ = "0.1.0"
