"""Small reverse-mode differentiation engine on top of numpy.

Every array that takes part in a network or a loss is a :class:`Tensor`.
Operations record their parents and a closure that maps the output
gradient to parent gradients; :meth:`Tensor.backward` walks the record in
reverse topological order.

Image tensors are laid out channels-first, either ``(C, H, W)`` or
``(N, C, H, W)``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "tensor",
    "backward",
    "conv2d",
    "pool2",
    "resize_bilinear_2x",
    "leaky_relu",
    "sigmoid",
    "relu",
    "dense",
    "concat",
    "stack",
    "filter2d_valid",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinite values."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32
        self.branches = None


_state = _State()

CHECK_FINITE = True


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for new tensors."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable recording of the computation graph."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise primitive evaluated inside.

    Yields a list that receives one boolean/integer array per call of
    ``leaky_relu``, ``relu``, ``abs`` and max pooling.  Two evaluations
    with equal logs lie on the same smooth piece of the function, which is
    what a finite-difference gradient check needs.
    """
    old = _state.branches
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = old


def _log_branch(arr):
    if _state.branches is not None:
        _state.branches.append(arr)


def _check(arr, op):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """n-dimensional real array with optional gradient tracking."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        _check(self.data, "leaf")

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = _check(data, op)
        out.grad = None
        out._op = op
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        x = self
        out = np.power(x.data, p) if p != 2 else x.data * x.data

        def bw(g):
            if p == 2:
                return (2.0 * g * x.data,)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = p * np.power(x.data, p - 1)
            # x**p with p < 1 has an unbounded slope at 0; treat it as flat there
            d = np.where(np.isfinite(d), d, 0.0).astype(x.dtype, copy=False)
            return (g * d,)

        return Tensor._make(out, (x,), bw, "pow")

    def abs(self):
        x = self
        _log_branch(x.data > 0)
        return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")

    def __abs__(self):
        return self.abs()

    def sum(self, axis=None, keepdims=False):
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")

    def transpose(self, *axes):
        x = self
        axes = axes or tuple(reversed(range(x.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")

    def __getitem__(self, idx):
        x = self

        def bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g) if _needs_add_at(idx) else full.__setitem__(idx, g)
            return (full,)

        return Tensor._make(np.ascontiguousarray(x.data[idx]), (x,), bw, "getitem")

    def clamp_min(self, low):
        return relu(self - low) + low

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient requires a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        order = _toposort(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_add_at(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    order.reverse()
    return order


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or _state.dtype)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def backward(loss, params):
    """Run reverse mode from a scalar ``loss`` and return one gradient per parameter.

    Parameters that the loss does not depend on receive a zero array.
    Existing ``.grad`` buffers are cleared first.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        p.grad = None
    loss.backward()
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


# ---------------------------------------------------------------------------
# image primitives


def _batched(x):
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")


def _reflect_pad_adjoint(g, p, axis):
    n = g.shape[axis] - 2 * p
    sl = [slice(None)] * g.ndim

    def take(s):
        sl[axis] = s
        return g[tuple(sl)]

    out = take(slice(p, p + n)).copy()
    osl = [slice(None)] * g.ndim
    osl[axis] = slice(1, p + 1)
    out[tuple(osl)] += np.flip(take(slice(0, p)), axis)
    osl[axis] = slice(n - 1 - p, n - 1)
    out[tuple(osl)] += np.flip(take(slice(p + n, None)), axis)
    return out


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D cross-correlation.

    ``padding="same"`` reflects ``k // 2`` pixels on each side so the output
    has ``ceil(H / stride)`` rows; ``"valid"`` uses no padding.
    """
    xb, squeeze = _batched(x)
    if kernel.ndim != 4:
        raise ValueError("kernel must be (C_out, C_in, k, k)")
    co, ci, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if xb.shape[1] != ci:
        raise ValueError(f"input has {xb.shape[1]} channels, kernel expects {ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    k, s = kh, int(stride)
    p = k // 2 if padding == "same" else 0
    n, _, h, w = xb.shape
    xd = xb.data
    if p:
        if h <= p or w <= p:
            raise ValueError("image too small for reflect padding")
        xd = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    hp, wp = xd.shape[2:]
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError("image smaller than kernel")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(ci * k * k, n * ho * wo)
    wmat = kernel.data.reshape(co, ci * k * k)
    out = (wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (wmat.T @ g2).reshape(ci, k, k, n, ho, wo)
            gp = np.zeros((n, ci, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
            if p:
                gp = _reflect_pad_adjoint(gp, p, 2)
                gp = _reflect_pad_adjoint(gp, p, 3)
            gx = gp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    res = Tensor._make(out, parents, bw, "conv2d")
    return res.reshape(res.shape[1:]) if squeeze else res


def pool2(x, kind="avg"):
    """2x2 pooling with stride 2 over the last two axes.

    Max pooling sends the gradient to the first maximum in row-major
    order within each window.
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"pool2 needs even spatial dims, got {(h, w)}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    if kind == "avg":
        out = blocks.mean(axis=(-3, -1))

        def bw(g):
            g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
            return (g.astype(x.dtype, copy=False),)

    elif kind == "max":
        nd = len(lead)
        perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
        flat = blocks.transpose(perm).reshape(*lead, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        _log_branch(arg)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            onehot = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
            inv = np.argsort(perm)
            back = onehot.reshape(*lead, h // 2, w // 2, 2, 2).transpose(inv)
            return (back.reshape(x.shape),)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return Tensor._make(np.ascontiguousarray(out), (x,), bw, f"pool2_{kind}")


_resize_cache = {}


def _upsample_matrix(n, dtype):
    key = (n, np.dtype(dtype).str)
    m = _resize_cache.get(key)
    if m is None:
        # align-corners: output sample i sits at input coordinate i*(n-1)/(2n-1)
        pos = np.arange(2 * n) * (n - 1) / (2 * n - 1)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        frac = pos - lo
        m = np.zeros((2 * n, n))
        m[np.arange(2 * n), lo] = 1 - frac
        m[np.arange(2 * n), lo + 1] += frac
        m = m.astype(dtype)
        _resize_cache[key] = m
    return m


def resize_bilinear_2x(x):
    """Bilinear 2x upsampling of the last two axes (align-corners convention).

    Corner samples of input and output coincide, so affine ramps are
    reproduced exactly.
    """
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError("resize_bilinear_2x needs spatial dims >= 2")
    ah = _upsample_matrix(h, x.dtype)
    aw = _upsample_matrix(w, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return Tensor._make(out, (x,), bw, "resize")


def leaky_relu(x, slope=0.1):
    mask = x.data > 0
    _log_branch(mask)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def relu(x):
    _log_branch(x.data > 0)
    mask = (x.data > 0).astype(x.dtype)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dense(x, weights, bias=None):
    """Affine map ``weights @ x + bias`` for ``x`` of shape (N_in,) or (B, N_in)."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weights.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
        else:
            gw = g.T @ x.data
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return tuple(grads)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor._make(out, parents, bw, "dense")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def filter2d_valid(x, kernel):
    """Correlate every channel of ``x`` with a fixed 2-D kernel (no padding).

    The kernel is a constant; only ``x`` receives a gradient.
    """
    kernel = np.asarray(kernel, dtype=x.dtype)
    kh, kw = kernel.shape
    h, w = x.shape[-2:]
    if h < kh or w < kw:
        raise ValueError(f"image {(h, w)} smaller than filter {(kh, kw)}")
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, h, w)
    win = sliding_window_view(flat, (kh, kw), axis=(1, 2))
    out = np.einsum("bijkl,kl->bij", win, kernel, optimize=True)
    ho, wo = out.shape[1:]

    def bw(g):
        g = g.reshape(-1, ho, wo)
        gx = np.zeros_like(flat)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho, j:j + wo] += kernel[i, j] * g
        return (gx.reshape(x.shape),)

    return Tensor._make(out.reshape(*lead, ho, wo), (x,), bw, "filter2d")


def standardize(x, eps=1e-6):
    """Per-channel zero mean, unit variance over the last two axes."""
    centered = x - x.mean(axis=(-2, -1), keepdims=True)
    var = (centered * centered).mean(axis=(-2, -1), keepdims=True)
    return centered / (var + eps) ** 0.5
