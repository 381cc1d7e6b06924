"""Minimal float64 tensor with reverse-mode differentiation.

Only the operations needed by the counting regressor, the domain
discriminator and the adaptation losses are provided.  Every op validates
shapes eagerly and records a closure that maps the output gradient to input
gradients.  Nodes get a monotonically increasing id at creation, so sorting
the reachable nodes by id gives a valid topological order; ``backward`` visits
each node exactly once.
"""

import contextlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, InvalidShapeError, TrainingDivergedError

_ids = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (inference)."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_retain")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._retain = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data

    def retain_grad(self):
        """Keep ``grad`` on this non-leaf tensor after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidShapeError("backward() without an explicit gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise InvalidShapeError(f"upstream gradient shape {grad.shape} != tensor shape {self.data.shape}")
        order = _reachable(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if not node._retain:
                node.grad = None


def _reachable(root):
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent.requires_grad and parent._id not in seen:
                seen[parent._id] = parent
                stack.append(parent)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def make_op(data, parents, backward):
    """Wrap ``data`` as the output of an op whose gradient rule is ``backward(g)``.

    ``backward`` receives the output gradient and must return one gradient
    (or None) per entry of ``parents``.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    out._retain = False
    out.requires_grad = _recording and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents

        def _run(g):
            for p, pg in zip(parents, backward(g)):
                if pg is not None:
                    _accumulate(p, pg)

        out._backward = _run
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return make_op(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return make_op(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x):
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return make_op(out, (x,), lambda g: (np.where(mask, g, 0.0),))


def sigmoid(x):
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def grad_reverse(x, mu):
    """Identity forward; backward multiplies the gradient by ``-mu``.

    ``mu == 0`` detaches: no gradient reaches ``x`` at all.
    """
    mu = float(mu)
    if mu < 0 or not math.isfinite(mu):
        raise InvalidArgumentError(f"grad_reverse coefficient must be >= 0, got {mu}")
    if mu == 0.0:
        return Tensor(x.data.copy())
    return make_op(x.data.copy(), (x,), lambda g: (-mu * g,))


# ---------------------------------------------------------------- reductions


def seq_sum(a, axis=None):
    """Sum in strict row-major order (matches a plain accumulation loop bit for bit)."""
    a = np.asarray(a, dtype=np.float64)
    if axis is None:
        flat = a.reshape(-1)
        return np.float64(0.0) if flat.size == 0 else np.cumsum(flat)[-1]
    rows = a.reshape(a.shape[0], -1)
    if rows.shape[1] == 0:
        return np.zeros(a.shape[0])
    return np.cumsum(rows, axis=1)[:, -1]


def sum_all(x):
    return make_op(np.array(seq_sum(x.data)), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x):
    n = x.data.size
    if n == 0:
        raise InvalidShapeError("mean of an empty tensor")
    return make_op(np.array(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def sample_sums(x):
    """Per-sample totals: sum over every axis except the first."""
    if x.ndim < 1:
        raise InvalidShapeError("sample_sums needs a leading batch axis")
    n = x.shape[0]
    out = seq_sum(x.data, axis=0)
    tail = (1,) * (x.ndim - 1)
    return make_op(out, (x,), lambda g: (np.broadcast_to(g.reshape((n,) + tail), x.shape).copy(),))


def spatial_mean(x):
    """(N, C, H, W) -> (N, C) mean over the spatial extent."""
    if x.ndim != 4:
        raise InvalidShapeError(f"spatial_mean expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.sum(axis=(2, 3)) / hw
    return make_op(out, (x,), lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),))


# ---------------------------------------------------------------- structural


def reshape(x, shape):
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors):
    """Concatenate along the leading axis."""
    tensors = list(tensors)
    if not tensors:
        raise InvalidShapeError("concat of nothing")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise InvalidShapeError(f"concat: trailing shapes {t.shape[1:]} and {tail} differ")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return make_op(out, tensors, lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors))))


def narrow(x, start, stop):
    """Rows ``start:stop`` of the leading axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise InvalidShapeError(f"narrow [{start}, {stop}) outside leading extent {x.shape[0]}")

    def backward(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return make_op(x.data[start:stop].copy(), (x,), backward)


def take(x, indices):
    """Gather rows of the leading axis (repeats allowed; gradients scatter-add)."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(x.data[idx].copy(), (x,), backward)


# ---------------------------------------------------------------- raster ops


def _as_batch(x, op):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise InvalidShapeError(f"{op} expects (C, H, W) or (N, C, H, W), got {x.shape}")


def conv2d(x, weight, bias, stride=1, dilation=1, padding=0, relu=False):
    """2-D cross-correlation of (N, C, H, W) or (C, H, W) input with (K, C, kh, kw) weights.

    ``relu=True`` fuses a rectifier into the kernel; the result equals
    ``relu(conv2d(...))`` exactly, without the intermediate array.
    """
    xb, squeeze = _as_batch(x, "conv2d")
    if weight.ndim != 4 or bias.shape != (weight.shape[0],):
        raise InvalidShapeError(f"conv2d: weight {weight.shape} / bias {bias.shape} malformed")
    n, c, h, w = xb.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise InvalidShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise InvalidArgumentError(f"conv2d: stride={stride}, dilation={dilation}, padding={padding}")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"conv2d: output extent {ho}x{wo} from input {h}x{w}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = xb.data
    else:
        xp = np.ascontiguousarray(xb.data)
    wd = np.ascontiguousarray(weight.data)
    out = kernels.conv2d_forward(xp, wd, np.ascontiguousarray(bias.data), stride, dilation, ho, wo, relu)

    def backward(g):
        dxp, dw, db = kernels.conv2d_backward(xp, wd, np.ascontiguousarray(g), stride, dilation,
                                              xb.requires_grad, out if relu else None)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    y = make_op(out, (xb, weight, bias), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def avgpool2(x):
    """Non-overlapping 2x2 mean pooling."""
    xb, squeeze = _as_batch(x, "avgpool2")
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise InvalidShapeError(f"avgpool2 needs even extents, got {h}x{w}")
    out = kernels.avgpool2_forward(np.ascontiguousarray(xb.data))

    def backward(g):
        return (kernels.avgpool2_backward(np.ascontiguousarray(g)),)

    y = make_op(out, (xb,), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


def batchnorm(x, gamma, beta, training, stats, eps=1e-5):
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics (biased variance) normalise the
    input and ``stats`` is updated in place with ``momentum``, using the
    unbiased variance estimate.  In eval mode ``stats`` is used as is.
    """
    xb, squeeze = _as_batch(x, "batchnorm")
    n, c, h, w = xb.shape
    if n * h * w == 0:
        raise InvalidShapeError("batchnorm over an empty extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} for {c} channels")
    xd = xb.data
    gd = gamma.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        mom = stats.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean[...] = (1.0 - mom) * stats.mean + mom * mu
        stats.var[...] = (1.0 - mom) * stats.var + mom * unbiased

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xd - stats.mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * gd * inv_std[None, :, None, None]
            return dx, dgamma, dbeta

    out = xhat * gd + beta.data[None, :, None, None]
    y = make_op(out, (xb, gamma, beta), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params[name].data``.

    ``params`` and ``grads`` map names to Tensors / arrays; only names present
    in ``grads`` are updated.  Moments are created zero-initialised on first
    use.  A non-finite gradient raises before anything is modified.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InvalidShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = p.data - update
        if not np.all(np.isfinite(p.data)):
            raise TrainingDivergedError(f"parameter {name!r} became non-finite")
