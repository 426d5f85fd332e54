"""Reverse-mode automatic differentiation over dense float64 numpy tensors.

Every operation records its parents and a vector-Jacobian product closure on
the output tensor; ``backward`` walks the records in reverse topological
order and accumulates gradients additively into leaf tensors. The engine is
deliberately small: 2-D matmul, 1-D convolution, a GRU cell, batch
normalization, and the elementwise/reduce suite the encoders and losses
need. Everything runs in float64 (finite-difference checks are unreliable
at single precision).
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / monitoring)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense float64 array plus its position in the backward graph.

    ``_parents`` and ``_vjp`` form the operation record: the op kind is kept
    in ``_op``, saved context lives in the vjp closure. Leaf tensors
    (parameters, inputs) have no record; ``backward`` accumulates into their
    ``grad`` buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

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
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor(self.data, requires_grad=False)
        return out

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # operator sugar; constants are lifted to constant tensors
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def topo_order(root):
    """Operation records reachable from ``root``, parents before children."""
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The loss must be scalar. Intermediate gradients are kept in a local
    table so a second backward over the same graph (after clearing leaf
    grads) reproduces identical values.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        stored = set()
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                # copy anything we do not exclusively own: views, the incoming
                # gradient itself, or an array already handed to another parent
                if pg.base is not None or pg is g or id(pg) in stored:
                    pg = pg.copy()
                grads[id(parent)] = pg
                stored.add(id(pg))
            else:
                acc += pg


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="raise", invalid="raise"):
        out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
        "div",
    )


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    ad = a.data
    return _record(ad**e, (a,), lambda g: (g * e * ad ** (e - 1.0),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        out = np.log(a.data)
    ad = a.data
    return _record(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="raise"):
        out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    ad = a.data
    out = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))), np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a):
    """log(1 + exp(x)), computed stably; backward is sigmoid(x)."""
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _record(out, (a,), lambda g: (g / (1.0 + np.exp(-ad)),), "softplus")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = float(np.prod([a.shape[i] for i in axes])) if axes else 1.0
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _record(out, (a,), vjp, "mean")


def max_over(a, axis=None, keepdims=False):
    """Max reduction; gradient splits evenly between tied maxima."""
    a = as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=True)
    mask = a.data == out
    counts = mask.sum(axis=axes, keepdims=True)
    res = out if keepdims else out.squeeze(axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * (g / counts),)

    return _record(res, (a,), vjp, "max_over")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose"
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat"
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


def getitem(a, key):
    """Basic slicing or integer-array row gather; backward scatter-adds."""
    a = as_tensor(a)
    out = a.data[key]
    fancy = isinstance(key, np.ndarray) and key.dtype.kind in "iu"

    def vjp(g):
        gx = np.zeros_like(a.data)
        if fancy:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return _record(np.array(out, copy=True) if fancy else out.copy(), (a,), vjp, "getitem")


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T, ad.T @ g),
        "matmul",
    )


def _im2col(xp, K, stride):
    """(B, C, P_pad) -> ((B*P_out, C*K) contiguous, P_out)."""
    B, C = xp.shape[0], xp.shape[1]
    windows = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]  # B,C,Pout,K
    p_out = windows.shape[2]
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B * p_out, C * K), p_out


def conv1d(x, kernel, stride=1, padding=0, bias=None):
    """Cross-correlation of (B, C_in, P) with (C_out, C_in, K).

    Output length is floor((P + 2*padding - K)/stride) + 1. Implemented as
    im2col + one GEMM so BLAS carries the arithmetic.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects (B,C,P) and (C_out,C_in,K), got {x.shape}, {kernel.shape}")
    B, c_in, P = x.shape
    c_out, c_in_k, K = kernel.shape
    if c_in_k != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, kernel {c_in_k}")
    if K > P + 2 * padding:
        raise ShapeError(f"kernel width {K} exceeds padded input length {P + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols, p_out = _im2col(xp, K, stride)
    out = (cols @ kernel.data.reshape(c_out, -1).T).reshape(B, p_out, c_out).transpose(0, 2, 1)
    kd = kernel.data
    p_pad = P + 2 * padding

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * p_out, c_out)
        dk = (gm.T @ cols).reshape(c_out, c_in, K)
        if stride == 1 and padding <= K - 1:
            # input gradient is itself a correlation with the flipped kernel
            flipped = np.ascontiguousarray(kd[:, :, ::-1].transpose(1, 0, 2))
            gp = np.pad(g, ((0, 0), (0, 0), (K - 1 - padding, K - 1 - padding)))
            gcols, _ = _im2col(gp, K, 1)
            dx = (gcols @ flipped.reshape(c_in, -1).T).reshape(B, P, c_in).transpose(0, 2, 1)
        else:
            dcols = (gm @ kd.reshape(c_out, -1)).reshape(B, p_out, c_in, K).transpose(0, 2, 1, 3)
            dxp = np.zeros((B, c_in, p_pad))
            for k in range(K):
                dxp[:, :, k : k + stride * p_out : stride] += dcols[:, :, :, k]
            dx = dxp[:, :, padding : p_pad - padding] if padding else dxp
        return (dx, dk)

    res = _record(out, (x, kernel), vjp, "conv1d")
    if bias is not None:
        res = add(res, reshape(as_tensor(bias), (1, c_out, 1)))
    return res


def gru_cell(x, h_prev, w_ih, w_hh, b_ih, b_hh):
    """One GRU step: reset/update gates and candidate state.

    Weights follow the stacked convention: w_ih is (3H, D_in), w_hh is
    (3H, H), gate order (reset, update, candidate). Fully differentiable
    through time by construction.
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    H = h_prev.shape[1]
    gi = add(matmul(x, transpose(w_ih, (1, 0))), b_ih)
    gh = add(matmul(h_prev, transpose(w_hh, (1, 0))), b_hh)
    r = sigmoid(add(gi[:, 0:H], gh[:, 0:H]))
    z = sigmoid(add(gi[:, H : 2 * H], gh[:, H : 2 * H]))
    n = tanh(add(gi[:, 2 * H : 3 * H], mul(r, gh[:, 2 * H : 3 * H])))
    return add(mul(sub(1.0, z), n), mul(z, h_prev))


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over (B, D) or (B, C, P) inputs.

    Train mode normalizes by batch statistics (biased variance) and returns
    refreshed running stats (unbiased variance, torch convention); eval mode
    normalizes by the running stats. Returns (y, running_mean, running_var).
    """
    x = as_tensor(x)
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 3:
        axes, view = (0, 2), (1, -1, 1)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 3-D input, got {x.shape}")
    count = int(np.prod([x.shape[i] for i in axes]))
    gamma_v = reshape(gamma, view)
    beta_v = reshape(beta, view)
    if training:
        if count < 2:
            raise ShapeError(f"batchnorm train mode needs >= 2 samples per feature, got {count}")
        mu = mean(x, axis=axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=axes, keepdims=True)
        xhat = div(centered, sqrt(add(var, eps)))
        unbiased = var.data.reshape(-1) * count / (count - 1)
        new_mean = (1.0 - momentum) * running_mean + momentum * mu.data.reshape(-1)
        new_var = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        rm = np.reshape(running_mean, view)
        rv = np.reshape(running_var, view)
        xhat = div(sub(x, rm), np.sqrt(rv + eps))
        new_mean, new_var = running_mean, running_var
    return add(mul(gamma_v, xhat), beta_v), new_mean, new_var


# ---------------------------------------------------------------------------
# composite helpers shared by encoders and losses


def global_avg_pool(x):
    """Mean over the trailing (temporal) axis of a (B, C, P) tensor."""
    return mean(x, axis=-1)


def l2_normalize(x, axis=-1, eps=1e-12):
    norm = sqrt(add(sum_(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def cosine_sim(a, b, axis=-1, eps=1e-12):
    return sum_(mul(l2_normalize(a, axis, eps), l2_normalize(b, axis, eps)), axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    """Stable log-sum-exp; the max shift is treated as a constant."""
    x = as_tensor(x)
    m = max_over(x, axis=axis, keepdims=True).detach()
    out = add(log(sum_(exp(sub(x, m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        ax = axis % x.ndim
        out = reshape(out, tuple(n for i, n in enumerate(out.shape) if i != ax))
    return out
