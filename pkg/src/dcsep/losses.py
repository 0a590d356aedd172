"""Clustering layer and the loss terms of the joint objective.

``L = alpha * L_r + beta * L_c + gamma * L_b + omega * L_t`` where

* ``L_r`` is the reconstruction loss (see :mod:`dcsep.autoencoder`),
* ``L_c`` the KL divergence between the sharpened target ``p`` and the
  Student-t soft assignment ``q``,
* ``L_b`` the entropy balance term,
* ``L_t`` the triplet hinge on squared latent distances.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NonFiniteLoss, ShapeError

EPS = 1e-12


@dataclass
class ClusterState:
    """Trainable K x d centroid matrix."""

    centroids: T.Tensor

    def __post_init__(self):
        if not isinstance(self.centroids, T.Tensor):
            self.centroids = T.Tensor(self.centroids, requires_grad=True,
                                      name="cluster.centroids")
        if self.centroids.ndim != 2:
            raise ShapeError("ClusterState", self.centroids.shape, ("K", "d"))
        if not np.isfinite(self.centroids.data).all():
            raise ValueError("centroids must be finite")

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _centroids(state):
    return state.centroids if isinstance(state, ClusterState) else T.as_tensor(state)


def soft_assign(z, state):
    """Student-t (one degree of freedom) similarity of each row of ``z`` to each centroid."""
    z = T.as_tensor(z)
    mu = _centroids(state)
    if z.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ShapeError("soft_assign", z.shape, mu.shape)
    kernel = T.reciprocal(T.add(T.pairwise_sq_distance(z, mu), 1.0))
    return T.div(kernel, T.sum_(kernel, axis=1, keepdims=True))


def target_distribution(q):
    """Square and frequency-normalize ``q``; returns a constant array."""
    q = np.asarray(q.data if isinstance(q, T.Tensor) else q, dtype=np.float64)
    freq = np.maximum(q.sum(axis=0), EPS)
    weight = q * q / freq
    return weight / np.maximum(weight.sum(axis=1, keepdims=True), EPS)


def kl_clustering_loss(p, q):
    """sum_ij p_ij log(p_ij / q_ij); gradient flows into ``q`` only."""
    q = T.as_tensor(q)
    p = np.asarray(p.data if isinstance(p, T.Tensor) else p)
    if p.shape != q.shape:
        raise ShapeError("kl_clustering_loss", p.shape, q.shape)
    p = p.astype(q.dtype)
    entropy_part = float(np.sum(p * np.log(np.maximum(p, EPS))))
    cross = T.sum_(T.mul(T.Tensor(p), T.log(q, floor=EPS)))
    loss = T.sub(entropy_part, cross)
    value = loss.item()
    # p == q can cancel to a few ulps below zero; shift by a constant so the
    # reported divergence stays non-negative (gradients are unaffected)
    if -1e-9 * max(1.0, abs(entropy_part)) < value < 0:
        loss = T.add(loss, -value)
    return loss


def _row_entropy_sum(q):
    # sum_ij q_ij log q_ij
    return T.sum_(T.mul(q, T.log(q, floor=EPS)))


def balance_loss(q, variant="implemented"):
    """Entropy balance term.

    ``implemented``: mean_i H(q_i) - H(mean_i q_i).  It is <= 0, and reaches
    -log K when every row is one-hot and rows spread evenly over clusters.

    ``literal``: sum_ij q_ij log q_ij - sum_j qbar_j log qbar_j, the
    opposite orientation with a batch sum, kept for comparison runs.
    """
    q = T.as_tensor(q)
    batch = q.shape[0]
    qbar = T.mean(q, axis=0)
    marginal = _row_entropy_sum(qbar)  # = -H(qbar)
    if variant == "implemented":
        return T.sub(marginal, T.mul(_row_entropy_sum(q), 1.0 / batch))
    if variant == "literal":
        return T.sub(_row_entropy_sum(q), marginal)
    raise ValueError(f"unknown balance-loss variant {variant!r}")


def triplet_loss(za, zp, zn, margin):
    """sum_i max(0, |za_i - zp_i|^2 - |za_i - zn_i|^2 + margin)."""
    za, zp, zn = T.as_tensor(za), T.as_tensor(zp), T.as_tensor(zn)
    if not za.shape == zp.shape == zn.shape or za.ndim != 2:
        raise ShapeError("triplet_loss", za.shape, zp.shape, zn.shape)
    if margin <= 0:
        raise ValueError("margin must be positive")
    gap = T.sub(T.l2_sq_distance(za, zp), T.l2_sq_distance(za, zn))
    return T.sum_(T.relu(T.add(gap, margin)))


def composite_loss(l_r, l_c, l_b, l_t, alpha, beta, gamma, omega):
    """Weighted sum of the four terms; rejects non-finite terms by name."""
    terms = (("L_r", l_r, alpha), ("L_c", l_c, beta),
             ("L_b", l_b, gamma), ("L_t", l_t, omega))
    total = None
    for name, term, weight in terms:
        term = T.as_tensor(term)
        if not np.isfinite(term.data).all():
            raise NonFiniteLoss(name)
        part = T.mul(term, float(weight))
        total = part if total is None else T.add(total, part)
    return total
