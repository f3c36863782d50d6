"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the encoder stack and its losses need are provided.
Every op builds a graph node holding its parents and a backward closure;
``Tensor.backward`` walks the graph once in reverse topological order.
"""

import math

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "parameter",
    "uniform_init",
    "add",
    "matmul",
    "log_softmax",
    "softmax",
    "layernorm",
    "attention",
    "concat",
    "detach",
    "dropout",
    "relu",
    "maximum",
    "finite_difference_grad",
]


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    s = data.sum()
    if not math.isfinite(s) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _node(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- construction ------------------------------------------------------

def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng, fan_in, shape):
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward, "add")


def neg(a):
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward, "div")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _node(out, (a,), lambda g: (g / ad,), "log")


def relu(a):
    a = _as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def maximum(a, floor):
    """Elementwise max(a, floor) for a constant floor; gradient passes where a > floor."""
    a = _as_tensor(a)
    keep = a.data > floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


def detach(a):
    """Same values, no gradient path back to ``a``."""
    a = _as_tensor(a)
    return Tensor(a.data.copy(), requires_grad=False)


def dropout(a, p, rng):
    a = _as_tensor(a)
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# -- reductions and shape ----------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)


def getitem(a, idx):
    a = _as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(a.data[idx]), (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), backward, "matmul")


# -- normalizers -------------------------------------------------------

def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        flat = g.reshape(-1, g.shape[-1])
        dgamma = (flat * xhat.reshape(flat.shape)).sum(axis=0) if gamma.requires_grad else None
        dbeta = flat.sum(axis=0) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward, "layernorm")


# -- attention ---------------------------------------------------------

_MASKED = -1e30


def attention(q, k, v, mask=None, heads=1, return_weights=False):
    """Multi-head scaled dot-product attention over (B, T, d) inputs.

    ``mask`` is a (B, T) boolean array marking valid (unpadded) key frames.
    Masked keys get exactly zero weight. A query row with no valid key is an error.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 3 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"attention expects equal (B, T, d) shapes, got {q.shape}, {k.shape}, {v.shape}")
    B, T, d = q.shape
    if d % heads:
        raise ShapeError(f"model dim {d} is not divisible into {heads} heads")
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)

    def split(x):
        return x.reshape(B, T, heads, dk).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("attention row has every key masked")
        scores = np.where(mask[:, None, None, :], scores, _MASKED)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    if mask is not None:
        w *= mask[:, None, None, :]
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, vh).transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        gh = split(g)
        dv = np.matmul(w.transpose(0, 1, 3, 2), gh)
        dw = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
        dq = np.matmul(ds, kh)
        dkk = np.matmul(ds.transpose(0, 1, 3, 2), qh)

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(B, T, d)

        return merge(dq), merge(dkk), merge(dv)

    result = _node(out, (q, k, v), backward, "attention")
    if return_weights:
        return result, w
    return result


# -- test oracle -------------------------------------------------------

def finite_difference_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``f`` receives a float64 array of x's shape and returns a float.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
