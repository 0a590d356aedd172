"""Central finite-difference gradient checking."""

import numpy as np

from .errors import NonFiniteValue
from .tensor import Tape, Tensor, backward


def _as_list(point):
    if isinstance(point, np.ndarray) or np.isscalar(point):
        return [np.asarray(point)], True
    return [np.asarray(p) for p in point], False


def finite_difference_check(fn, point, h=1e-3, fd_dtype=np.float64,
                            max_coords=None, rng=None, return_grads=False, zero_tol=0.0):
    """Compare analytic gradients of ``fn`` against central differences.

    Parameters
    ----------
    fn : callable
        Takes one Tensor per array in ``point`` and returns a scalar Tensor.
        Must be deterministic.
    point : ndarray or sequence of ndarrays
        Where to evaluate.  The analytic pass runs at the dtype of these
        arrays.
    h : float
        Finite-difference step.
    fd_dtype : dtype or None
        Precision of the finite-difference evaluations.  The default float64
        keeps the reference free of 32-bit rounding; ``None`` evaluates at the
        point's own dtype.
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per array.
    zero_tol : float
        Coordinates where both gradients are at most ``zero_tol`` times the
        largest analytic gradient magnitude count as agreeing zeros.  Needed
        where a gradient is exactly zero by construction and only rounding
        noise remains on each side.

    Returns
    -------
    float
        max over coordinates of ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-12)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays, single = _as_list(point)
    rng = rng if rng is not None else np.random.default_rng(0)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors) if not single else fn(tensors[0])
    value = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(value):
        raise NonFiniteValue("function value is not finite")
    backward(tape, out, params=tensors)
    analytic = [t.grad.astype(np.float64) for t in tensors]

    work_dtype = fd_dtype if fd_dtype is not None else None
    base = [a.astype(work_dtype) if work_dtype is not None else a.copy()
            for a in arrays]

    def evaluate(values):
        ts = [Tensor(v) for v in values]
        res = fn(*ts) if not single else fn(ts[0])
        # keep the working precision until after the difference
        val = np.asarray(res.data).reshape(-1)[0]
        if not np.isfinite(val):
            raise NonFiniteValue("function value is not finite")
        return val

    floor = zero_tol * max(float(np.abs(g).max()) for g in analytic)
    worst = 0.0
    numeric = [np.zeros_like(g) for g in analytic]
    for k, arr in enumerate(base):
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        for idx in flat_idx:
            pos = np.unravel_index(idx, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + h
            plus = evaluate(base)
            arr[pos] = orig - h
            minus = evaluate(base)
            arr[pos] = orig
            fd = float((plus - minus) / (2 * h))
            numeric[k][pos] = fd
            ga = analytic[k][pos]
            if abs(ga) <= floor and abs(fd) <= floor:
                continue
            err = abs(ga - fd) / max(abs(ga), abs(fd), 1e-12)
            worst = max(worst, err)
    if return_grads:
        return worst, analytic, numeric
    return worst
