"""Dense-tensor reverse-mode differentiation.

A ``Tensor`` wraps a numpy array and remembers how it was produced. Every op
records its parents and a closure that maps the output adjoint to parent
adjoints. ``backward`` walks the recorded nodes in reverse creation order, so
accumulation order is fixed by recording order and runs are reproducible.

Broadcasting is deliberately limited to bias-add (``add_bias``) and row
scaling (``row_scale``); everything else requires matching shapes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

PARAM_GROUPS = (
    "anchor_offset",
    "anchor_latent",
    "anchor_scale",
    "mlp",
    "appearance_embed",
    "adapt_layer",
)

_counter = itertools.count()
_dtype = np.float32


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


def get_dtype():
    return _dtype


def set_dtype(dtype):
    """Set the working float type (float64 for tests, float32 for training)."""
    global _dtype
    _dtype = np.dtype(dtype).type
    if _dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")


@contextmanager
def precision(dtype):
    prev = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, parents=(), backward=None, name=None, dtype=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _dtype))
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar for the handful of ops used in loss arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Param(Tensor):
    """Leaf tensor with a persistent gradient and an optimizer group."""

    __slots__ = ("group",)

    def __init__(self, data, group, name=None, dtype=None):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(data, name=name, dtype=dtype)
        self.group = group
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        self.grad += g

    def assign(self, data):
        """Replace the value (e.g. after pruning rows); resets the gradient."""
        self.data = np.ascontiguousarray(np.asarray(data, dtype=self.data.dtype))
        self.grad = np.zeros_like(self.data)


def constant(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def custom(out_data, parents, backward_fn, name=None):
    """Record an op whose adjoint is hand-derived.

    ``backward_fn(g)`` receives the output adjoint and returns one adjoint per
    parent (``None`` for parents that need none).
    """
    out = Tensor(out_data, name=name, dtype=np.asarray(out_data).dtype)
    out._parents = tuple(parents)
    out._backward = backward_fn
    return out


def _tracks(t):
    return isinstance(t, Param) or t._backward is not None


def backward(loss, retain=True):
    """Populate gradients of every tensor reachable from ``loss``.

    Params accumulate across calls; intermediates receive fresh gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    for t in order:
        if not isinstance(t, Param):
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in order:
        if t._backward is not None and t.grad is not None:
            for p, g in zip(t._parents, t._backward(t.grad)):
                if g is not None and _tracks(p):
                    p._accumulate(g)
    if not retain:
        for t in order:
            if not isinstance(t, Param):
                t.grad = None


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- arithmetic

def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "add")
    return custom(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "sub")
    return custom(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = constant(a), constant(b)
    _check_same(a, b, "mul")
    return custom(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = float(c)
    return custom(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def add_scalar(a, c):
    return custom(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def add_bias(a, b):
    """a[m, n] + b[n] broadcast over rows."""
    if a.data.ndim != 2 or b.data.shape != (a.shape[1],):
        raise DimensionError(f"add_bias: {a.shape} + {b.shape}")
    return custom(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def row_scale(a, s):
    """a[m, n] * s[m] per row."""
    if a.data.ndim != 2 or s.data.shape != (a.shape[0],):
        raise DimensionError(f"row_scale: {a.shape} * {s.shape}")

    def bw(g):
        return g * s.data[:, None], np.einsum("ij,ij->i", g, a.data)

    return custom(a.data * s.data[:, None], (a, s), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return custom(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return custom(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def linear(x, w, b=None):
    """x[B, in] @ w[out, in]^T (+ b[out])."""
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[1]} vs weight {w.shape}")
    out = custom(x.data @ w.data.T, (x, w), lambda g: (g @ w.data, g.T @ x.data))
    return out if b is None else add_bias(out, b)


def total(a):
    return custom(a.data.sum(dtype=a.data.dtype), (a,), lambda g: (np.full_like(a.data, g),))


def mean(a):
    n = a.data.size
    return custom(a.data.sum(dtype=a.data.dtype) / n, (a,), lambda g: (np.full_like(a.data, g / n),))


# ------------------------------------------------------------- elementwise

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    mask = x.data > 0
    return custom(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = _sigmoid(x.data)
    return custom(y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x):
    y = np.logaddexp(x.data.dtype.type(0), x.data)
    return custom(y, (x,), lambda g: (g * _sigmoid(x.data),))


def tanh(x):
    y = np.tanh(x.data)
    return custom(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x):
    y = np.exp(x.data)
    return custom(y, (x,), lambda g: (g * y,))


ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus, "tanh": tanh, "exp": exp}


def elementwise(op, x):
    return ELEMENTWISE[op](x)


# ------------------------------------------------------------------ shape

def reshape(a, shape):
    return custom(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=1):
    tensors = [constant(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def cols(a, start, stop):
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return custom(np.ascontiguousarray(a.data[:, start:stop]), (a,), bw)


def gather_rows(a, idx):
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return custom(a.data[idx], (a,), bw)


def repeat_rows(a, reps):
    """Each row repeated ``reps`` times consecutively: [m, n] -> [m*reps, n]."""
    m = a.shape[0]
    return custom(np.repeat(a.data, reps, axis=0), (a,),
                  lambda g: (g.reshape(m, reps, *a.shape[1:]).sum(axis=1),))


def broadcast_row(v, m):
    """A vector [n] stacked into [m, n]."""
    return custom(np.broadcast_to(v.data, (m,) + v.shape).copy(), (v,), lambda g: (g.sum(axis=0),))


def tile_cols(a, reps):
    """[m, n] -> [m, n*reps], the whole row block repeated."""
    n = a.shape[1]
    return custom(np.tile(a.data, (1, reps)), (a,), lambda g: (g.reshape(-1, reps, n).sum(axis=1),))


# ---------------------------------------------------------------- row ops

def softmax_rows(x):
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - np.einsum("ij,ij->i", g, y)[:, None]),)

    return custom(y, (x,), bw)


def normalize_rows(x, fallback=None, eps=1e-8):
    """Rows divided by their L2 norm. Rows with norm < eps become ``fallback``
    (zero gradient there); the count of such rows is stored on the output name."""
    n = np.linalg.norm(x.data, axis=1)
    bad = n < eps
    safe = np.where(bad, 1.0, n).astype(x.data.dtype)
    y = x.data / safe[:, None]
    if bad.any():
        y[bad] = 0.0 if fallback is None else fallback

    def bw(g):
        gx = (g - y * np.einsum("ij,ij->i", g, y)[:, None]) / safe[:, None]
        gx[bad] = 0.0
        return (gx,)

    return custom(y, (x,), bw, name=f"normalized:{int(bad.sum())}")


# ------------------------------------------------------------------- MLP

class MlpWeights:
    """Two-layer perceptron, weights stored (out, in) like a linear layer."""

    def __init__(self, w1, b1, w2, b2, group="mlp", name="mlp"):
        self.w1 = Param(w1, group, f"{name}.w1")
        self.b1 = Param(b1, group, f"{name}.b1")
        self.w2 = Param(w2, group, f"{name}.w2")
        self.b2 = Param(b2, group, f"{name}.b2")
        self.name = name

    @classmethod
    def init(cls, rng, n_in, hidden, n_out, name="mlp", group="mlp"):
        lim1 = 1.0 / np.sqrt(n_in)
        lim2 = 1.0 / np.sqrt(hidden)
        return cls(rng.uniform(-lim1, lim1, (hidden, n_in)), rng.uniform(-lim1, lim1, hidden),
                   rng.uniform(-lim2, lim2, (n_out, hidden)), rng.uniform(-lim2, lim2, n_out),
                   group=group, name=name)

    @property
    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2)]

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def n_in(self):
        return self.w1.shape[1]

    @property
    def n_out(self):
        return self.w2.shape[0]

    def size(self):
        return sum(p.data.size for p in self.params())


def mlp_forward(weights, x):
    """W2 relu(W1 x + b1) + b2 on a batch of rows; no head activation."""
    if x.shape[1] != weights.n_in:
        raise DimensionError(f"{weights.name}: input width {x.shape[1]} != {weights.n_in}")
    h = relu(linear(x, weights.w1, weights.b1))
    return linear(h, weights.w2, weights.b2)


# ---------------------------------------------------------- gradient check

def finite_diff_check(f, params, eps=1e-5, coords=None, analytic=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps nothing to a scalar Tensor (reading the current param values).
    ``eps`` may be a sequence of step sizes; each coordinate then keeps its
    best agreement, so a step that straddles a ReLU kink does not count as a
    failure while a wrong gradient still fails at every step.
    ``coords`` optionally restricts the check to ``{param_index: flat indices}``.
    ``analytic`` overrides the autodiff gradients (list aligned with params),
    which lets callers test the checker itself.
    """
    steps = tuple(np.atleast_1d(eps).tolist())
    if min(steps) <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("non-finite objective")
    backward(loss)
    grads = analytic if analytic is not None else [p.grad.copy() for p in params]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(k, ())
        g = np.asarray(grads[k]).reshape(-1)
        for i in idx:
            ad = float(g[i])
            best = np.inf
            for h in steps:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(np.asarray(f().data).reshape(-1)[0])
                flat[i] = orig - h
                fm = float(np.asarray(f().data).reshape(-1)[0])
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise EvaluationError(f"non-finite objective at {p.name}[{i}]")
                fd = (fp - fm) / (2 * h)
                best = min(best, abs(fd - ad) / max(abs(fd), abs(ad), 1e-8))
            worst = max(worst, best)
    return worst
