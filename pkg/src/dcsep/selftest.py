"""Built-in correctness checks shared by the ``selftest`` command and the
acceptance suite."""

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .autoencoder import NetworkSpec, build, decode, encode, reconstruction_loss
from .data import normalize, synthetic_blobs
from .gradcheck import finite_difference_check
from .losses import (balance_loss, composite_loss, kl_clustering_loss, soft_assign,
                     target_distribution, triplet_loss)
from .metrics import accuracy

TINY_SPEC = NetworkSpec(variant="shallow", input_shape=(1, 8, 8), latent_dim=4,
                        channels=(2, 3))
DEFAULT_WEIGHTS = (1.0, 0.8, 0.01, 0.1)
DEFAULT_MARGIN = 0.24
# gradients below this fraction of the largest one, on both sides, count as
# exact zeros (a few ulps of the working precision)
ZERO_TOL = {"float64": 1e-12, "float32": 1e-6}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: str
    seconds: float = 0.0


# gradients -----------------------------------------------------------------

def tiny_problem(dtype=np.float64, seed=0, batch=4, n_clusters=3):
    """A tiny network, a triplet batch and centroids for gradient checks."""
    rng = np.random.default_rng(seed)
    params = build(TINY_SPEC, seed=seed, dtype=dtype)
    shape = (batch,) + TINY_SPEC.input_shape
    xa = rng.normal(size=shape).astype(dtype)
    xp = (xa + 0.1 * rng.normal(size=shape)).astype(dtype)
    # a near negative keeps every hinge active, away from its kink
    xn = (xa + 0.2 * rng.normal(size=shape)).astype(dtype)
    mu = rng.normal(size=(n_clusters, TINY_SPEC.latent_dim)).astype(dtype)
    return params, (xa, xp, xn), mu


def _with_tensors(params, names, tensors):
    swap = dict(zip(names, tensors))
    return replace(params,
                   encoder={k: swap.get(k, v) for k, v in params.encoder.items()},
                   decoder={k: swap.get(k, v) for k, v in params.decoder.items()})


def composite_objective(params, batch, p, weights=DEFAULT_WEIGHTS, margin=DEFAULT_MARGIN,
                        mu=None, terms=None):
    """The full weighted objective for one triplet batch with target ``p`` held fixed."""
    xa, xp, xn = batch
    za = encode(params, xa, "train")
    parts = {
        "L_r": lambda: reconstruction_loss(xa, decode(params, za, "train")),
        "L_c": lambda: kl_clustering_loss(p, soft_assign(za, mu)),
        "L_b": lambda: balance_loss(soft_assign(za, mu)),
        "L_t": lambda: triplet_loss(za, encode(params, xp, "train"),
                                    encode(params, xn, "train"), margin),
    }
    zero = T.Tensor(0.0, dtype=za.dtype)
    values = [parts[name]() if terms is None or name in terms else zero for name in parts]
    return composite_loss(*values, *weights)


def composite_gradient_error(dtype=np.float64, h=1e-6, seed=0, terms=None, max_coords=None,
                             zero_tol=None):
    """Max relative error between backprop and central differences for the
    weighted objective, w.r.t. every network parameter and the centroids.

    The analytic pass runs at ``dtype``; differences are taken in extended
    precision so the reference carries neither 32- nor 64-bit rounding.
    """
    if zero_tol is None:
        zero_tol = ZERO_TOL[np.dtype(dtype).name]
    with T.precision(dtype):
        params, batch, mu = tiny_problem(dtype, seed)
        names = list(params.encoder) + list(params.decoder)
        arrays = [np.asarray(params.encoder.get(n, params.decoder.get(n)).data)
                  for n in names] + [mu]
        p = target_distribution(soft_assign(encode(params, batch[0], "train"), mu))

        def fn(*tensors):
            net = _with_tensors(params, names, tensors[:-1])
            cast = tuple(b.astype(tensors[0].dtype) for b in batch)
            return composite_objective(net, cast, p, mu=tensors[-1], terms=terms)

        return finite_difference_check(fn, arrays, h=h, fd_dtype=np.longdouble,
                                       max_coords=max_coords, zero_tol=zero_tol)


def term_gradient_errors(dtype=np.float64, seed=0):
    """Gradient error of each loss term on its own, through the tiny network."""
    return {name: composite_gradient_error(dtype, seed=seed, terms={name})
            for name in ("L_r", "L_c", "L_b", "L_t")}


# distributions -------------------------------------------------------------

def distribution_violations(n_batches=1000, seed=0):
    """Count violations of the q/p/L_c/L_b invariants over random batches."""
    rng = np.random.default_rng(seed)
    counts = {"q_rows": 0, "p_rows": 0, "L_c": 0, "L_b": 0}
    worst_row = 0.0
    with T.precision(np.float64):
        for _ in range(n_batches):
            k = int(rng.integers(2, 11))
            b = int(rng.integers(1, 65))
            d = int(rng.integers(1, 17))
            scale = 10.0 ** rng.uniform(-2, 2)
            z = rng.normal(scale=scale, size=(b, d))
            mu = rng.normal(scale=scale, size=(k, d))
            q = soft_assign(z, mu).data
            p = target_distribution(q)
            q_err = np.abs(q.sum(1) - 1).max()
            p_err = np.abs(p.sum(1) - 1).max()
            worst_row = max(worst_row, q_err, p_err)
            counts["q_rows"] += int(q_err > 1e-6)
            counts["p_rows"] += int(p_err > 1e-6)
            counts["L_c"] += int(kl_clustering_loss(p, q).item() < 0)
            lb = balance_loss(q).item()
            counts["L_b"] += int(not -math.log(k) - 1e-9 <= lb <= 1e-9)
    return counts, worst_row


# accuracy oracle -----------------------------------------------------------

def brute_force_accuracy(labels, assignments, k):
    labels = np.asarray(labels)
    assignments = np.asarray(assignments)
    best = 0
    for perm in itertools.permutations(range(k)):
        best = max(best, int(np.sum(np.asarray(perm)[assignments] == labels)))
    return best / len(labels)


def accuracy_oracle_mismatches(n_instances=200, seed=0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_instances):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(1, 51))
        labels = rng.integers(0, k, n)
        clusters = rng.integers(0, k, n)
        if accuracy(labels, clusters, k).acc != brute_force_accuracy(labels, clusters, k):
            bad += 1
    return bad


# negative selection --------------------------------------------------------

def negative_selection_audit(seed=0, n_per_class=60, epochs=1, batch_size=32):
    """Run training on blobs with a hook that re-checks every selected negative.

    Returns counts keyed ``violations``, ``ok``, ``fallbacks`` and ``total``.
    """
    from .trainer import TrainConfig, run

    ds = normalize(synthetic_blobs(3, n_per_class, 8, seed=seed))
    audit = {"violations": 0, "ok": 0, "fallbacks": 0, "total": 0}

    def hook(_, batch, encoder):
        anchors = ds.images[batch.anchor_indices]
        z_a = encoder(anchors).astype(np.float64)
        z_n = encoder(ds.images[batch.negative_indices]).astype(np.float64)
        for i, t in enumerate(batch.triplets):
            audit["total"] += 1
            if t.fallback:
                audit["fallbacks"] += 1
                continue
            z_p = encoder(t.augments).astype(np.float64)
            radius = np.sqrt(((z_p - z_a[i]) ** 2).sum(1)).max()
            d = np.sqrt(((z_n[i] - z_a[i]) ** 2).sum())
            if d > radius and t.negative_index != t.anchor_index:
                audit["ok"] += 1
            else:
                audit["violations"] += 1

    config = TrainConfig(joint_epochs=epochs, batch_size=batch_size, pretrain_epochs=3,
                         channels=(8, 16), latent_dim=8, init_seed=seed,
                         shuffle_seed=seed + 1, augment_seed=seed + 2, kmeans_n_init=3)
    run(config, ds, 3, hook=hook)
    return audit


# table ---------------------------------------------------------------------

def _timed(name, threshold, fn, ok):
    start = time.perf_counter()
    value = fn()
    return CheckResult(name, ok(value), value, threshold, time.perf_counter() - start)


def run_checks(n_batches=1000, n_instances=200):
    results = [
        _timed("gradient (64-bit)", "< 1e-6",
               lambda: composite_gradient_error(np.float64), lambda v: v < 1e-6),
        _timed("gradient (32-bit)", "< 1e-3",
               lambda: composite_gradient_error(np.float32), lambda v: v < 1e-3),
        _timed("distribution invariants", "0 violations",
               lambda: sum(distribution_violations(n_batches)[0].values()),
               lambda v: v == 0),
        _timed("ACC oracle", "0 mismatches",
               lambda: accuracy_oracle_mismatches(n_instances), lambda v: v == 0),
    ]
    start = time.perf_counter()
    audit = negative_selection_audit()
    results.append(CheckResult("negative selection", audit["violations"] == 0,
                               audit["violations"], "0 violations",
                               time.perf_counter() - start))
    return results


def format_table(results):
    lines = [f"{'check':<26}{'result':<8}{'value':>14}  {'threshold':<14}{'seconds':>8}"]
    for r in results:
        value = f"{r.value:.3g}" if isinstance(r.value, float) else str(r.value)
        lines.append(f"{r.name:<26}{'PASS' if r.passed else 'FAIL':<8}{value:>14}  "
                     f"{r.threshold:<14}{r.seconds:>8.1f}")
    return "\n".join(lines)
