"""A small dense-tensor reverse-mode autodiff engine (float64).

Only the operations needed by the generator, discriminator, losses and the
fitting objective are provided.  Gradients accumulate into ``Tensor.grad`` of
leaf tensors; calling :meth:`Tensor.backward` twice adds twice.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import TensorShapeError


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = ""):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    # basic protocol -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor, accumulating leaf gradients."""
        if grad is None:
            if self.data.size != 1:
                raise TensorShapeError("backward", self.shape, ())
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise TensorShapeError("backward", self.shape, grad.shape)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operators ----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, parents if req else (), backward if req else None, op)


def custom_op(data, inputs, backward, op: str = "custom") -> Tensor:
    """Wrap an externally computed value with a user-supplied backward rule.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(inputs), backward, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TensorShapeError(op, a.shape, b.shape) from None


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip values; the gradient is passed only where the input is inside the range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# reductions and reshaping -------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _make(out, (a,), back, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise TensorShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Tensor:
    """Gather entries of the flattened tensor."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -a.size or idx.max() >= a.size):
        raise TensorShapeError("take", a.shape, idx.shape)

    def back(g):
        out = np.zeros(a.size)
        np.add.at(out, idx, g)
        return (out.reshape(a.shape),)
    return _make(a.data.reshape(-1)[idx], (a,), back, "take")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise TensorShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))
    return _make(out, tuple(ts), back, "concat")


# linear algebra -------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorShapeError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _windows(xp, k, s, Ho, Wo):
    """``(N, C, Ho, Wo, k, k)`` strided view of sliding windows."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]


def _scatter_windows(cols, s, Hp, Wp):
    """Adjoint of :func:`_windows`: add ``(N, C, Ho, Wo, k, k)`` back to an image."""
    N, C, Ho, Wo, k, _ = cols.shape
    out = np.zeros((N, C, Hp, Wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i: i + (Ho - 1) * s + 1: s, j: j + (Wo - 1) * s + 1: s] += cols[..., i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x (N, C, H, W)`` with ``w (O, C, k, k)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise TensorShapeError("conv2d", x.shape, w.shape)
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < k or Wp < k:
        raise TensorShapeError("conv2d", x.shape, w.shape)
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride, Ho, Wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise TensorShapeError("conv2d", x.shape, w.shape, b.shape)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(N, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
            gx = _scatter_windows(gcols, stride, Hp, Wp)[:, :, pad: pad + H, pad: pad + W]
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)
    return _make(out, tuple(parents), back, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of ``x (N, Cin, H, W)`` with ``w (Cin, Cout, k, k)``.

    Output size is ``(H - 1) * stride - 2 * pad + k``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise TensorShapeError("conv_transpose2d", x.shape, w.shape)
    N, Ci, H, W = x.shape
    _, Co, k, _ = w.shape
    Hp, Wp = (H - 1) * stride + k, (W - 1) * stride + k
    if Hp - 2 * pad < 1 or Wp - 2 * pad < 1:
        raise TensorShapeError("conv_transpose2d", x.shape, w.shape)
    xm = x.data.transpose(0, 2, 3, 1).reshape(N * H * W, Ci)
    wm = w.data.reshape(Ci, Co * k * k)
    cols = (xm @ wm).reshape(N, H, W, Co, k, k).transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, stride, Hp, Wp)
    out = full[:, :, pad: Hp - pad, pad: Wp - pad]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Co,):
            raise TensorShapeError("conv_transpose2d", x.shape, w.shape, b.shape)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gp = np.zeros((N, Co, Hp, Wp))
        gp[:, :, pad: Hp - pad, pad: Wp - pad] = g
        gcols = _windows(gp, k, stride, H, W).transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, Co * k * k)
        gx = (gcols @ wm.T).reshape(N, H, W, Ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)
    return _make(np.ascontiguousarray(out), tuple(parents), back, "conv_transpose2d")


# losses ---------------------------------------------------------------------------

def l1_loss(pred, target) -> Tensor:
    """Mean absolute error."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise TensorShapeError("l1_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)
    return _make(np.abs(diff).mean(), (pred, target), lambda g: (g * sgn / n, -g * sgn / n), "l1_loss")


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stable form)."""
    z, t = as_tensor(logits), as_tensor(target)
    if t.shape != z.shape:
        try:
            tb = np.broadcast_to(t.data, z.shape)
        except ValueError:
            raise TensorShapeError("bce_with_logits", z.shape, t.shape) from None
    else:
        tb = t.data
    x = z.data
    loss = np.maximum(x, 0) - x * tb + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def back(g):
        gz = g * (_sigmoid(x) - tb) / n
        gt = _unbroadcast(-g * x / n, t.shape)
        return gz, gt
    return _make(loss.mean(), (z, t), back, "bce_with_logits")


# checking -------------------------------------------------------------------------

def gradcheck(fn, inputs, probes: int = 5, eps: float = 1e-6, seed=0) -> float:
    """Worst relative error between backprop and central differences.

    ``fn(*tensors)`` returns a tensor; it is reduced to a scalar with fixed
    random weights.  Each probe compares the analytic directional derivative
    along a random direction (all inputs at once) with
    ``(L(x + eps v) - L(x - eps v)) / (2 eps)``.
    """
    rng = np.random.default_rng(seed)
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    out = fn(*[Tensor(x) for x in xs])
    w = rng.normal(size=out.shape)

    def loss(arrays):
        return float((fn(*[Tensor(a) for a in arrays]).data * w).sum())

    leaves = [Tensor(x.copy(), requires_grad=True) for x in xs]
    y = fn(*leaves)
    y.backward(w)
    grads = [np.zeros_like(x) if t.grad is None else t.grad for x, t in zip(xs, leaves)]
    worst = 0.0
    for _ in range(probes):
        vs = [rng.normal(size=x.shape) for x in xs]
        analytic = float(np.sum([np.sum(g * v) for g, v in zip(grads, vs)]))
        fd = (loss([x + eps * v for x, v in zip(xs, vs)])
              - loss([x - eps * v for x, v in zip(xs, vs)])) / (2 * eps)
        scale = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(analytic - fd) / scale)
    return worst
