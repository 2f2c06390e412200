"""Reverse-mode automatic differentiation over numpy arrays.

The op set is deliberately small: it covers exactly what the conditional
implicit network family in this package needs (affine maps, sine
activations, layer normalization, the softmax family, attention plumbing,
reductions, table row gathers and stop-gradient).  Graphs are rebuilt on
every optimization step; ``Tensor.backward`` accumulates gradients into
``.grad`` in a single reverse topological pass.

Backward closures take the upstream gradient as an argument instead of
capturing their output node, so graphs are plain DAGs with no reference
cycles: buffers free by refcount as soon as backward passes them, which
keeps large training steps allocation-stable.

Dtypes are preserved: feed float64 leaves to get float64 gradients (the
finite-difference test suite relies on this), float32 for speed.  Python
scalars never promote array dtypes.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sine",
    "exp",
    "log",
    "tsum",
    "tmean",
    "reshape",
    "swapaxes",
    "permute",
    "broadcast_to",
    "concat",
    "narrow",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gather_rows",
    "stop_gradient",
]


class Tensor:
    """A node in the computation graph wrapping one ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, retain_grads=False):
        """Seed with ones and accumulate gradients through the graph.

        Interior gradients are released as soon as they have been
        propagated (pass ``retain_grads=True`` to keep them, e.g. for
        Jacobian inspection in tests); leaf gradients always persist.
        """
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            bw = node._bw
            if bw is not None:
                bw(node.grad)
                if not retain_grads:
                    node.grad = None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _acc_own(t, g):
    """Accumulate a freshly allocated gradient contribution."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_shared(t, g):
    """Accumulate a contribution that aliases another array."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape``; returns (array, fresh)."""
    if g.shape == shape:
        return g, False
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g, True


def _acc_bcast(t, g):
    got, fresh = _unbroadcast(g, t.data.shape)
    if fresh:
        _acc_own(t, got)
    else:
        _acc_shared(t, got)


# elementwise arithmetic ------------------------------------------------
# Python scalars take a dedicated path so they never promote array dtypes.


def add(a, b):
    if isinstance(b, (int, float)):
        a = _wrap(a)
        out = _result(a.data + b, (a,))
        if out.requires_grad:
            def _bw(g):
                _acc_shared(a, g)
            out._bw = _bw
        return out
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _acc_bcast(a, g)
            _acc_bcast(b, g)
        out._bw = _bw
    return out


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(neg(b), a)
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            _acc_bcast(a, g)
            gb, _ = _unbroadcast(g, b.data.shape)
            _acc_own(b, -gb)
        out._bw = _bw
    return out


def mul(a, b):
    if isinstance(b, (int, float)):
        a = _wrap(a)
        out = _result(a.data * b, (a,))
        if out.requires_grad:
            def _bw(g):
                _acc_own(a, g * b)
            out._bw = _bw
        return out
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga, _ = _unbroadcast(g * b.data, a.data.shape)
                _acc_own(a, ga)
            if b.requires_grad:
                gb, _ = _unbroadcast(g * a.data, b.data.shape)
                _acc_own(b, gb)
        out._bw = _bw
    return out


def neg(a):
    a = _wrap(a)
    out = _result(-a.data, (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_own(a, -g)
        out._bw = _bw
    return out


# linear algebra ---------------------------------------------------------


def matmul(a, w):
    """Matrix product.

    Two supported layouts: ``a`` with any leading shape against a 2-D
    weight ``(k, m)``, or a batched product of equal-rank stacks
    (``(..., n, k) @ (..., k, m)``).
    """
    a, w = _wrap(a), _wrap(w)
    if w.ndim == 2:
        if a.data.shape[-1] != w.data.shape[0]:
            raise ShapeError(
                f"matmul: inner dimensions {a.data.shape[-1]} vs {w.data.shape[0]}"
            )
        out = _result(np.matmul(a.data, w.data), (a, w))
        if out.requires_grad:
            k = a.data.shape[-1]

            def _bw(g):
                if a.requires_grad:
                    _acc_own(a, np.matmul(g, w.data.T))
                if w.requires_grad:
                    m = g.shape[-1]
                    _acc_own(w, np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, m)))
            out._bw = _bw
        return out
    if a.ndim != w.ndim:
        raise ShapeError(f"matmul: rank mismatch {a.ndim} vs {w.ndim}")
    if a.data.shape[-1] != w.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions {a.data.shape[-1]} vs {w.data.shape[-2]}"
        )
    out = _result(np.matmul(a.data, w.data), (a, w))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _acc_own(a, np.matmul(g, w.data.swapaxes(-1, -2)))
            if w.requires_grad:
                _acc_own(w, np.matmul(a.data.swapaxes(-1, -2), g))
        out._bw = _bw
    return out


# nonlinearities ----------------------------------------------------------


def sine(a, omega=1.0):
    """``sin(omega * x)`` with a fixed (non-learned) frequency."""
    a = _wrap(a)
    pre = a.data if omega == 1.0 else omega * a.data
    out = _result(np.sin(pre), (a,))
    if out.requires_grad:
        def _bw(g):
            gg = np.cos(pre)
            gg *= g
            if omega != 1.0:
                gg *= omega
            _acc_own(a, gg)
        out._bw = _bw
    return out


def exp(a):
    a = _wrap(a)
    out = _result(np.exp(a.data), (a,))
    if out.requires_grad:
        data = out.data

        def _bw(g):
            _acc_own(a, g * data)
        out._bw = _bw
    return out


def log(a):
    a = _wrap(a)
    out = _result(np.log(a.data), (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_own(a, g / a.data)
        out._bw = _bw
    return out


# reductions --------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, src_shape, axes, keepdims, scale=None):
    if scale is not None:
        g = g * scale
    if not keepdims:
        shape = list(src_shape)
        for ax in axes:
            shape[ax] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, src_shape)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        axes = _axis_tuple(axis, a.data.ndim)

        def _bw(g):
            _acc_shared(a, _spread(g, a.data.shape, axes, keepdims))
        out._bw = _bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _axis_tuple(axis, a.data.ndim)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        inv = 1.0 / n

        def _bw(g):
            _acc_shared(a, _spread(g, a.data.shape, axes, keepdims, scale=inv))
        out._bw = _bw
    return out


# shape plumbing ----------------------------------------------------------


def reshape(a, shape):
    a = _wrap(a)
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_shared(a, g.reshape(a.data.shape))
        out._bw = _bw
    return out


def swapaxes(a, ax1, ax2):
    a = _wrap(a)
    out = _result(a.data.swapaxes(ax1, ax2), (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_shared(a, g.swapaxes(ax1, ax2))
        out._bw = _bw
    return out


def permute(a, axes):
    a = _wrap(a)
    out = _result(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inv = np.argsort(axes)

        def _bw(g):
            _acc_shared(a, np.transpose(g, inv))
        out._bw = _bw
    return out


def broadcast_to(a, shape):
    a = _wrap(a)
    out = _result(np.broadcast_to(a.data, shape), (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_bcast(a, g)
        out._bw = _bw
    return out


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    out = _result(np.concatenate([p.data for p in parts], axis=axis), parts)
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        nd = out.data.ndim

        def _bw(g):
            offs = 0
            for p, s in zip(parts, sizes):
                sl = [slice(None)] * nd
                sl[axis] = slice(offs, offs + s)
                _acc_shared(p, g[tuple(sl)])
                offs += s
        out._bw = _bw
    return out


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along one axis."""
    a = _wrap(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _result(a.data[sl], (a,))
    if out.requires_grad:
        def _bw(g):
            gz = np.zeros_like(a.data)
            gz[sl] = g
            _acc_own(a, gz)
        out._bw = _bw
    return out


# softmax family ----------------------------------------------------------


def softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, (a,))
    if out.requires_grad:
        def _bw(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _acc_own(a, s * (g - dot))
        out._bw = _bw
    return out


def log_softmax(a, axis=-1):
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _result(y, (a,))
    if out.requires_grad:
        def _bw(g):
            _acc_own(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        out._bw = _bw
    return out


# normalization -----------------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the trailing feature axis."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature width {x.data.shape[-1]} vs gain {gain.data.shape} / bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xc = None
    out = _result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _bw(g):
            if gain.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _acc_own(gain, (g * xhat).sum(axis=axes))
            if bias.requires_grad:
                axes = tuple(range(g.ndim - 1))
                _acc_own(bias, g.sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                dxhat -= m1
                dxhat -= xhat * m2
                dxhat *= inv
                _acc_own(x, dxhat)
        out._bw = _bw
    return out


# lookup / detach ----------------------------------------------------------


def gather_rows(table, indices):
    """Select rows of a 2-D table by integer index array (any shape)."""
    table = _wrap(table)
    indices = np.asarray(indices)
    out = _result(table.data[indices], (table,))
    if out.requires_grad:
        def _bw(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, indices, g)
            _acc_own(table, gt)
        out._bw = _bw
    return out


def stop_gradient(a):
    """Pass the value through, block gradient flow entirely."""
    a = _wrap(a)
    return Tensor(a.data, requires_grad=False)
