"""Parameter storage and the differentiable kernels built on autodiff.

``ParamStore`` owns named arrays plus their AdamW moment buffers; every
training step wraps the arrays in fresh graph leaves via ``tensors()``.
The kernels here (linear, attention, mse, temperature-scaled KL) are thin
compositions of autodiff primitives, so their gradients inherit the
finite-difference guarantees of the op set.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ShapeError

__all__ = [
    "ParamStore",
    "value_and_grad",
    "linear",
    "attention",
    "mse",
    "kl_softmax",
    "glorot_uniform",
    "sine_layer_uniform",
]


class ParamStore:
    """Named parameter arrays with per-parameter optimizer state.

    Every parameter has exactly one gradient slot of identical shape
    (materialized by ``collect_grads``); first/second moment accumulators
    start at zero and the shared step counter at 0.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, array):
        if name in self._arrays:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        arr = np.asarray(array)
        self._arrays[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def __contains__(self, name):
        return name in self._arrays

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name, array):
        arr = np.asarray(array)
        if name in self._arrays and arr.shape != self._arrays[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {arr.shape} vs {self._arrays[name].shape}")
        if name not in self._arrays:
            self.add(name, arr)
        else:
            self._arrays[name] = arr

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def moments(self, name):
        return self._m[name], self._v[name]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def tensors(self, requires_grad=True) -> dict[str, Tensor]:
        """Fresh leaf tensors over the stored arrays (graph per step)."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self._arrays.items()}

    def collect_grads(self, tensors) -> dict[str, np.ndarray]:
        """Gradients by name; parameters the graph never touched get zeros."""
        out = {}
        for name, t in tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for k, v in self._arrays.items():
            dup.add(k, v.copy())
        dup.step = self.step
        return dup

    def astype(self, dtype) -> "ParamStore":
        dup = ParamStore()
        for k, v in self._arrays.items():
            dup.add(k, v.astype(dtype))
        return dup


def value_and_grad(graph, params: ParamStore, inputs=None):
    """Evaluate a composed expression and every parameter gradient.

    ``graph`` is a callable taking the dict of parameter tensors (and the
    optional ``inputs`` payload) and returning a scalar loss tensor.
    """
    tensors = params.tensors()
    loss = graph(tensors) if inputs is None else graph(tensors, inputs)
    if loss.data.size != 1:
        raise ShapeError(f"value_and_grad: loss must be scalar, got shape {loss.data.shape}")
    loss.backward()
    return float(loss.data), params.collect_grads(tensors)


# kernels ------------------------------------------------------------------


def linear(x, weight, bias=None):
    out = ad.matmul(x, weight)
    if bias is not None:
        out = ad.add(out, bias)
    return out


def attention(queries, keys, values, scale):
    """Scaled-dot attention: ``softmax(q k^T * scale) v``.

    Works on 2-D operands ``(n, w)``/``(m, w)``/``(m, wv)`` or equally
    batched 3-D stacks.  Rows of the weight matrix sum to one.
    """
    q, k, v = ad._wrap(queries), ad._wrap(keys), ad._wrap(values)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys vs {v.shape[-2]} values")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} vs key width {k.shape[-1]}")
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), float(scale))
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(weights, v)


def mse(a, b):
    """Mean squared error over every element."""
    a, b = ad._wrap(a), ad._wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} vs {b.shape}")
    d = ad.sub(a, b)
    return ad.tmean(ad.mul(d, d))


def kl_softmax(logits_a, logits_b, tau):
    """Temperature-softened divergence ``tau^2 * KL(softmax(a/tau) || softmax(b/tau))``.

    The softmax runs over the trailing axis; with extra leading axes the
    per-row divergences are averaged.  Zero exactly when ``a - b`` is a
    constant vector.
    """
    if tau <= 0:
        raise ArgumentError(f"kl_softmax: temperature must be positive, got {tau}")
    a, b = ad._wrap(logits_a), ad._wrap(logits_b)
    if a.shape != b.shape:
        raise ShapeError(f"kl_softmax: shapes {a.shape} vs {b.shape}")
    inv = 1.0 / float(tau)
    la = ad.log_softmax(ad.mul(a, inv), axis=-1)
    lb = ad.log_softmax(ad.mul(b, inv), axis=-1)
    per_row = ad.tsum(ad.mul(ad.exp(la), ad.sub(la, lb)), axis=-1)
    return ad.mul(ad.tmean(per_row), float(tau) ** 2)


# initializers --------------------------------------------------------------


def glorot_uniform(rng, shape, dtype=np.float64):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def sine_layer_uniform(rng, shape, omega, first=False, dtype=np.float64):
    """SIREN-style init for a linear layer feeding ``sin(omega * .)``."""
    fan_in = shape[0]
    limit = (1.0 / fan_in) if first else (np.sqrt(6.0 / fan_in) / omega)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
