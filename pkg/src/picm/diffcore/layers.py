"""Parameter containers and the small layer zoo used by the codec and backbone."""

from __future__ import annotations

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Tensor, GraphError


class Parameter(Tensor):
    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = bool(trainable)

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def unfreeze(self):
        self.trainable = True
        self.requires_grad = True


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to +/- 2 std, drawn through the inverse CDF."""
    lo, hi = special.ndtr(-2.0), special.ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return (special.ndtri(u) * std).astype(np.float32)


def kaiming_conv(rng, shape):
    """Fan-in scaled init for conv weights, shape (C_out, C_in, kh, kw) or transposed."""
    fan_in = int(np.prod(shape[1:]))
    std = float(np.sqrt(2.0 / fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _named_items(name, value):
    """Walk parameters and modules through arbitrarily nested lists/tuples."""
    if isinstance(value, (Parameter, Module)):
        yield name, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _named_items(f"{name}.{i}", item)


class Module:
    """Minimal parameter-tree container.

    Child modules and parameters are discovered from instance attributes in
    definition order, which keeps parameter naming and iteration
    deterministic across runs.
    """

    kind = None

    def _children(self):
        for key, value in self.__dict__.items():
            yield from _named_items(key, value)

    def named_parameters(self, prefix=""):
        out = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out.append((name, value))
            else:
                out.extend(value.named_parameters(prefix=name + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def count_params(self, trainable_only=False):
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return sum(p.data.size for p in params)

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.unfreeze()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise GraphError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in mine.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise GraphError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *modules):
        self.items = list(modules)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


class Conv2d(Module):
    kind = "conv"

    def __init__(self, rng, cin, cout, k=3, stride=1, padding=None, bias=True):
        if padding is None:
            padding = k // 2
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_conv(rng, (cout, cin, k, k)))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    kind = "transposed-conv"

    def __init__(self, rng, cin, cout, k=3, stride=2, padding=1, output_padding=1, bias=True):
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.weight = Parameter(kaiming_conv(rng, (cin, cout, k, k)))
        self.bias = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(
            x, self.weight, self.bias,
            stride=self.stride, padding=self.padding, output_padding=self.output_padding,
        )


class Dense(Module):
    kind = "dense"

    def __init__(self, rng, din, dout, bias=True):
        self.weight = Parameter(trunc_normal(rng, (din, dout)))
        self.bias = Parameter(np.zeros(dout, dtype=np.float32)) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight) if x.ndim == 2 else _dense_nd(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


def _dense_nd(x, w):
    lead = x.shape[:-1]
    flat = x.reshape(int(np.prod(lead)), x.shape[-1])
    return T.matmul(flat, w).reshape(*lead, w.shape[1])


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        self.slope = slope

    def forward(self, x):
        return T.leaky_relu(x, self.slope)


def sft_modulate(feature, gamma, beta):
    """Spatial feature transform: elementwise gamma * feature + beta.

    All three operands share the (N, C, H, W) shape; the condition branch
    that produces (gamma, beta) is the only place the importance signal
    enters the transform stack.
    """
    if feature.shape != gamma.shape or feature.shape != beta.shape:
        raise GraphError(
            f"sft_modulate shape mismatch: feature {feature.shape}, "
            f"gamma {gamma.shape}, beta {beta.shape}"
        )
    return feature * gamma + beta


class SftResBlock(Module):
    """Residual block whose input is first modulated by an SFT pair."""

    kind = "resblock"

    def __init__(self, rng, channels):
        self.conv1 = Conv2d(rng, channels, channels, k=3)
        self.conv2 = Conv2d(rng, channels, channels, k=3)

    def forward(self, x, gamma, beta):
        h = sft_modulate(x, gamma, beta)
        h = self.conv2(T.leaky_relu(self.conv1(h), 0.01))
        return x + h


class LayerNorm(Module):
    """Layer norm over the trailing dimension of token tensors (N, T, C)."""

    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.shift = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gain + self.shift
