"""Xavier initialization and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, ShapeError
from .tensor import Tensor, get_default_dtype


def fans(shape):
    """Return ``(fan_in, fan_out)`` for a dense (in, out) or conv (out, in, k, k) shape."""
    shape = tuple(shape)
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def xavier_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, rng, name=None, dtype=None):
    """Glorot-uniform tensor: values drawn from [-b, b], b = sqrt(6/(fan_in+fan_out))."""
    shape = tuple(shape)
    if not shape or any(int(s) < 1 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    bound = xavier_bound(*fans(shape))
    values = rng.uniform(-bound, bound, size=shape)
    return Tensor(values.astype(dtype or get_default_dtype()),
                  requires_grad=True, name=name)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Apply one bias-corrected Adam update in place.

    ``params`` and ``grads`` are parallel sequences; moment buffers are keyed
    by parameter name (falling back to position), so parameters should carry
    unique names when the state is checkpointed.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteGradient(p.name or f"param[{i}]")

    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        key = p.name or i
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, m.shape)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[key] = m.astype(p.dtype)
        state.v[key] = v.astype(p.dtype)
        step = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
    return params, state


class Adam:
    """Stateful wrapper reading ``.grad`` off each parameter."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)
