"""Lloyd's k-means with k-means++ seeding."""

import numpy as np


def _sq_dists(x, centers):
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0)


def _plusplus(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k: take any point not yet used
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def inertia(x, centers, labels):
    x = np.asarray(x, dtype=np.float64)
    return float(((x - centers[labels]) ** 2).sum())


def _lloyd(x, centers, max_iters):
    labels = None
    for _ in range(max_iters):
        new_labels = _sq_dists(x, centers).argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = ((x - centers[labels]) ** 2).sum(1).argmax()
                centers[j] = x[far]
                labels[far] = j
    labels = _sq_dists(x, centers).argmin(axis=1)
    return centers, labels


def kmeans(z, n_clusters, seed=0, max_iters=300, n_init=10):
    """Cluster rows of ``z``; returns ``(centroids, labels, inertia)``.

    Runs ``n_init`` seeded restarts and keeps the lowest within-cluster sum
    of squares.  Each restart stops at an assignment fixpoint or after
    ``max_iters`` Lloyd iterations.
    """
    x = np.asarray(z, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("z must be a 2-D array")
    if n_clusters < 1:
        raise ValueError("n_clusters must be positive")
    distinct = len(np.unique(x, axis=0))
    if distinct < n_clusters:
        raise ValueError(f"{distinct} distinct rows cannot seed {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, labels = _lloyd(x, _plusplus(x, n_clusters, rng), max_iters)
        counts = np.bincount(labels, minlength=n_clusters)
        for j in np.flatnonzero(counts == 0):
            far = ((x - centers[labels]) ** 2).sum(1).argmax()
            centers[j] = x[far]
            labels[far] = j
        score = inertia(x, centers, labels)
        if best is None or score < best[2]:
            best = (centers.copy(), labels.copy(), score)
    return best
