"""Clustering accuracy, CSV exports and a 2-D principal-component projection."""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import LabelsRequired, LengthMismatch
from .kmeans import kmeans

METRICS_HEADER = ["epoch", "loss_total", "loss_r", "loss_c", "loss_b", "loss_t",
                  "acc", "neg_fallbacks", "seconds"]


@dataclass
class AccResult:
    acc: float
    mapping: dict
    confusion: np.ndarray


def hard_assign(q):
    """Row-wise argmax; ties resolve to the lowest cluster index."""
    return np.asarray(q.data if hasattr(q, "data") else q).argmax(axis=1)


def accuracy(labels, assignments, n_clusters=None):
    """Best fraction of matches over one-to-one cluster -> label mappings.

    The mapping is solved exactly as a linear assignment on the confusion
    matrix, padded to square when cluster and label counts differ.
    """
    labels = np.asarray(labels, dtype=np.int64)
    assignments = np.asarray(assignments, dtype=np.int64)
    if labels.shape != assignments.shape or labels.ndim != 1:
        raise LengthMismatch(
            f"{labels.shape} labels vs {assignments.shape} assignments")
    if len(labels) == 0:
        raise LengthMismatch("no samples")
    if labels.min() < 0 or assignments.min() < 0:
        raise ValueError("labels and assignments must be non-negative")
    size = max(n_clusters or 0, int(labels.max()) + 1, int(assignments.max()) + 1)
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (assignments, labels), 1)
    rows, cols = linear_sum_assignment(-confusion)
    matched = int(confusion[rows, cols].sum())
    mapping = {int(r): int(c) for r, c in zip(rows, cols) if confusion[r].any()}
    return AccResult(acc=matched / len(labels), mapping=mapping, confusion=confusion)


def kmeans_pixel_baseline(dataset, n_clusters=None, seed=0, n_init=10):
    """k-means on flattened pixels, scored with :func:`accuracy`."""
    if dataset.labels is None:
        raise LabelsRequired("the pixel baseline needs labels")
    k = n_clusters or dataset.class_count
    flat = dataset.images.reshape(len(dataset), -1)
    _, assignments, _ = kmeans(flat, k, seed=seed, n_init=n_init)
    return accuracy(dataset.labels, assignments, k)


# exports -------------------------------------------------------------------

def _fmt(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def export_metrics(log, path):
    """Write metrics rows (dicts or objects with the header fields) as CSV."""
    rows = log.rows if hasattr(log, "rows") else log
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for row in rows:
                get = row.get if isinstance(row, dict) else lambda k: getattr(row, k)
                writer.writerow([_fmt(get(k)) for k in METRICS_HEADER])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = []
        for row in reader:
            parsed = {}
            for key, value in row.items():
                if value == "":
                    parsed[key] = None
                elif key in ("epoch", "neg_fallbacks"):
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows


def _write_rows(path, header, rows):
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_embeddings(z, labels, assignments, path):
    z = np.asarray(z)
    n, d = z.shape
    labels = np.full(n, -1) if labels is None else np.asarray(labels)
    header = ["index", "label", "assignment"] + [f"z{i}" for i in range(d)]
    rows = ([str(i), str(int(labels[i])), str(int(assignments[i]))]
            + [_fmt(v) for v in z[i]] for i in range(n))
    _write_rows(path, header, rows)


def export_projection(coords, labels, assignments, path):
    n = len(coords)
    labels = np.full(n, -1) if labels is None else np.asarray(labels)
    rows = ([str(i), str(int(labels[i])), str(int(assignments[i])),
             _fmt(coords[i, 0]), _fmt(coords[i, 1])] for i in range(n))
    _write_rows(path, ["index", "label", "assignment", "pc1", "pc2"], rows)


def project_2d(z, iters=1000, tol=1e-12):
    """Coordinates on the top two principal components of mean-centred ``z``.

    Power iteration with deflation from a fixed start vector; components with
    no remaining variance come back as zero columns.
    """
    x = np.asarray(z, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least two samples with two features")
    x = x - x.mean(axis=0)
    cov = x.T @ x / len(x)
    scale = np.abs(cov).max()
    coords = np.zeros((len(x), 2))
    if scale == 0:
        return coords
    start = np.random.default_rng(0).standard_normal(cov.shape[0])
    for comp in range(2):
        v = start / np.linalg.norm(start)
        eig = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-12 * scale:
                v = None
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            eig = norm
            if done:
                break
        if v is None:
            break
        # deterministic sign: largest-magnitude loading positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        coords[:, comp] = x @ v
        cov = cov - eig * np.outer(v, v)
    return coords
