"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; calling
``backward()`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that
requires them.

Two numeric modes share one code path: float32 for training and
inference, float64 for gradient verification (finite differences in
float32 are too noisy to gate on).  Verification mode additionally
turns NaN/Inf anywhere in data or gradients into a hard error.
"""

from __future__ import annotations

import numpy as np
from scipy import special

_VERIFY_MODE = False

_INV_LN2 = float(1.0 / np.log(2.0))
_TWO_OVER_SQRT_PI = float(2.0 / np.sqrt(np.pi))


def set_verify_mode(on: bool) -> None:
    """Toggle strict 64-bit verification behaviour (NaN/Inf are fatal)."""
    global _VERIFY_MODE
    _VERIFY_MODE = bool(on)


def verify_mode() -> bool:
    return _VERIFY_MODE


class GraphError(RuntimeError):
    """Raised on malformed use of the autodiff graph."""


def _check_finite(arr, what):
    if _VERIFY_MODE and not np.all(np.isfinite(arr)):
        raise GraphError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise GraphError("cannot wrap a Tensor in a Tensor")
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction of interior graph nodes -------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        _check_finite(data, "op output")
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- gradient plumbing ---------------------------------------------------

    def _accum(self, g):
        _check_finite(g, "gradient")
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data + b.data

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._node(out_data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data * b.data

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)

        return Tensor._node(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        inv = 1.0 / b.data
        out_data = a.data * inv

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * inv, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out_data * inv, b.data.shape))

        return Tensor._node(out_data, (a, b), bwd)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise GraphError("only scalar exponents are supported")
        a = self
        out_data = a.data ** p

        def bwd(g):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor._node(out_data, (a,), bwd)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        out_data = a.data.reshape(shape)

        def bwd(g):
            a._accum(g.reshape(old))

        return Tensor._node(out_data, (a,), bwd)

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = a.data.transpose(axes)

        def bwd(g):
            a._accum(g.transpose(inv))

        return Tensor._node(out_data, (a,), bwd)

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]
        if not isinstance(out_data, np.ndarray):
            out_data = np.asarray(out_data)

        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._node(out_data, (a,), bwd)

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        if not isinstance(out_data, np.ndarray):
            out_data = np.asarray(out_data)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape))

        return Tensor._node(out_data, (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _axis_size(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape of the operand it belongs to."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(value, dtype=np.float32):
    return Tensor(np.asarray(value, dtype=dtype))


# -- elementwise nonlinearities ----------------------------------------------


def exp(x):
    e = np.exp(x.data)

    def bwd(g):
        x._accum(g * e)

    return Tensor._node(e, (x,), bwd)


def log(x):
    def bwd(g):
        x._accum(g / x.data)

    return Tensor._node(np.log(x.data), (x,), bwd)


def log2(x):
    def bwd(g):
        x._accum(g * (_INV_LN2 / x.data))

    return Tensor._node(np.log2(x.data), (x,), bwd)


def sqrt(x):
    r = np.sqrt(x.data)

    def bwd(g):
        x._accum(g * (0.5 / r))

    return Tensor._node(r, (x,), bwd)


def absolute(x):
    def bwd(g):
        x._accum(g * np.sign(x.data))

    return Tensor._node(np.abs(x.data), (x,), bwd)


def clamp_min(x, lo):
    """Elementwise max(x, lo) for a scalar bound; subgradient 0 below the bound."""
    mask = x.data >= lo

    def bwd(g):
        x._accum(g * mask)

    return Tensor._node(np.maximum(x.data, lo), (x,), bwd)


def sigmoid(x):
    s = special.expit(x.data)

    def bwd(g):
        x._accum(g * s * (1.0 - s))

    return Tensor._node(s, (x,), bwd)


def tanh(x):
    t = np.tanh(x.data)

    def bwd(g):
        x._accum(g * (1.0 - t * t))

    return Tensor._node(t, (x,), bwd)


def softplus(x):
    # log1p(exp(-|x|)) + max(x, 0) is stable for both tails
    out = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)
    s = special.expit(x.data)

    def bwd(g):
        x._accum(g * s)

    return Tensor._node(out.astype(x.data.dtype), (x,), bwd)


def leaky_relu(x, slope=0.01):
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.data.dtype)

    def bwd(g):
        x._accum(g * scale)

    return Tensor._node(x.data * scale, (x,), bwd)


def erf(x):
    e = special.erf(x.data)

    def bwd(g):
        x._accum(g * (_TWO_OVER_SQRT_PI * np.exp(-x.data * x.data)))

    return Tensor._node(e.astype(x.data.dtype), (x,), bwd)


# -- reductions over structure -----------------------------------------------


def matmul(a, b):
    """2-D or batched 3-D matrix product; batch dims must match exactly."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.ndim != b.ndim:
        raise GraphError(f"matmul expects matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise GraphError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._node(out_data, (a, b), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)

    return Tensor._node(out_data, tuple(tensors), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accum(s * (g - dot))

    return Tensor._node(s, (x,), bwd)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bwd(g):
        x._accum(g - s * g.sum(axis=axis, keepdims=True))

    return Tensor._node(out, (x,), bwd)


def upsample_nearest(x, factor):
    """Nearest-neighbor upsampling of an (N, C, H, W) tensor by an integer factor."""
    f = int(factor)
    if f == 1:
        return x
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bwd(g):
        gsum = g.reshape(n, c, h, f, w, f).sum(axis=(3, 5))
        x._accum(gsum)

    return Tensor._node(out_data, (x,), bwd)


def avg_pool(x, factor):
    """Non-overlapping mean pooling of an (N, C, H, W) tensor by an integer factor."""
    f = int(factor)
    if f == 1:
        return x
    n, c, h, w = x.data.shape
    if h % f or w % f:
        raise GraphError(f"avg_pool: dims ({h},{w}) not divisible by {f}")
    out_data = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    inv = 1.0 / (f * f)

    def bwd(g):
        gg = np.repeat(np.repeat(g, f, axis=2), f, axis=3) * inv
        x._accum(gg)

    return Tensor._node(out_data, (x,), bwd)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (N, K) tensor, labels: (N,) integer array.
    """
    labels = np.asarray(labels)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(n), labels]
    out = np.asarray(-picked.mean())
    probs = np.exp(logp)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accum(grad * (float(g) / n))

    return Tensor._node(out, (logits,), bwd)


# -- convolutions --------------------------------------------------------------


def _im2col(x, kh, kw, sh, sw):
    """Extract conv patches from a padded (N, C, H, W) array as (N, C*kh*kw, L)."""
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    sn, sc, sh_, sw_ = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh_, sw_, sh * sh_, sw * sw_),
        writeable=False,
    )
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, x_shape, kh, kw, sh, sw):
    """Scatter-add (N, C*kh*kw, L) patch columns back onto an (N, C, H, W) grid."""
    n, c, h, w = x_shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros(x_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        hend = i + sh * ho
        for j in range(kw):
            wend = j + sw * wo
            out[:, :, i:hend:sh, j:wend:sw] += cols[:, :, i, j]
    return out


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution of (N, C_in, H, W) with weight (C_out, C_in, kh, kw)."""
    if x.ndim != 4:
        raise GraphError(f"conv2d expects a 4-D input, got shape {x.shape}")
    cout, cin, kh, kw = weight.data.shape
    if x.data.shape[1] != cin:
        raise GraphError(f"conv2d channel mismatch: input {x.data.shape[1]}, weight {cin}")
    s, p = int(stride), int(padding)
    xp = _pad_hw(x.data, p)
    cols, ho, wo = _im2col(xp, kh, kw, s, s)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = (wmat @ cols).reshape(x.data.shape[0], cout, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gflat = g.reshape(g.shape[0], cout, ho * wo)
        if weight.requires_grad:
            gw = np.einsum("nol,ncl->oc", gflat, cols, optimize=True)
            weight._accum(gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = wmat.T @ gflat
            gx = _col2im(gcols, xp.shape, kh, kw, s, s)
            if p:
                gx = gx[:, :, p:-p, p:-p]
            x._accum(gx)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._node(out_data, parents, bwd)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed 2-D convolution; weight is (C_in, C_out, kh, kw).

    Output spatial size is (H-1)*stride - 2*padding + k + output_padding.
    """
    if x.ndim != 4:
        raise GraphError(f"conv_transpose2d expects a 4-D input, got shape {x.shape}")
    cin, cout, kh, kw = weight.data.shape
    if x.data.shape[1] != cin:
        raise GraphError(f"conv_transpose2d channel mismatch: input {x.data.shape[1]}, weight {cin}")
    s, p, op = int(stride), int(padding), int(output_padding)
    n, _, h, w = x.data.shape
    hf = (h - 1) * s + kh
    wf = (w - 1) * s + kw
    ho = hf - 2 * p + op
    wo = wf - 2 * p + op

    wmat = weight.data.reshape(cin, cout * kh * kw)
    xflat = x.data.reshape(n, cin, h * w)
    cols = np.einsum("ck,nch->nkh", wmat, xflat, optimize=True)
    full = _col2im(cols, (n, cout, hf, wf), kh, kw, s, s)
    lo = p
    out_data = full[:, :, lo:lo + ho, lo:lo + wo]
    if out_data.shape[2] != ho or out_data.shape[3] != wo:
        raise GraphError("conv_transpose2d: output_padding exceeds available border")
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gfull = np.zeros((n, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, lo:lo + ho, lo:lo + wo] = g
        gcols, _, _ = _im2col(gfull, kh, kw, s, s)
        if x.requires_grad:
            gx = np.einsum("ck,nkh->nch", wmat, gcols, optimize=True)
            x._accum(gx.reshape(x.data.shape))
        if weight.requires_grad:
            gw = np.einsum("nch,nkh->ck", xflat, gcols, optimize=True)
            weight._accum(gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))

    return Tensor._node(out_data, parents, bwd)
