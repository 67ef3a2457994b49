"""Entropy models for the latent and hyper-latent.

The hyper-latent uses a learned factorized prior: a per-channel stack of
monotone 1-D transforms ending in a sigmoid models the cumulative
distribution, and the probability of an integer bin is the CDF difference
across the +/- 0.5 box (the density convolved with uniform noise).  The
latent uses a conditional Gaussian whose mean and scale come from the
hyper-synthesis path.

Both models expose a differentiable bits-per-element rate for training and
quantized cumulative-frequency tables for actual range coding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .diffcore import tensor as T
from .diffcore.tensor import Tensor, GraphError
from .diffcore.layers import Module, Parameter

SCALE_MIN = 0.11
TABLE_PRECISION = 16
TABLE_TOTAL = 1 << TABLE_PRECISION
TAIL_MASS = 1e-4
LIKELIHOOD_FLOOR = 1e-9

_SQRT2 = float(np.sqrt(2.0))


class EntropyError(ValueError):
    pass


# -- quantization --------------------------------------------------------------


def _round_away(arr):
    # ties round away from zero, unlike numpy's banker rounding
    return np.sign(arr) * np.floor(np.abs(arr) + 0.5)


def quantize(y, mode, means=None, rng=None, noise=None):
    """Quantize a tensor in 'noise' (training) or 'round' (inference) mode.

    In round mode quantization is centered on the means when given:
    round(y - mu) + mu, so the coded symbols are integers.  In noise mode
    the output is y + u with u drawn uniformly from [-0.5, 0.5); a fixed
    noise array can be supplied to make a graph repeatable.
    """
    if mode == "noise":
        if noise is None:
            if rng is None:
                raise EntropyError("noise mode needs an rng or a fixed noise array")
            noise = rng.uniform(-0.5, 0.5, size=y.shape)
        u = Tensor(np.asarray(noise, dtype=y.dtype))
        if u.shape != y.shape:
            raise EntropyError(f"noise shape {u.shape} != input shape {y.shape}")
        return y + u
    if mode == "round":
        if means is not None:
            centered = y.data - means.data
            return Tensor(_round_away(centered) + means.data)
        return Tensor(_round_away(y.data))
    raise EntropyError(f"unknown quantize mode {mode!r}")


# -- conditional Gaussian -------------------------------------------------------


@dataclass
class GaussianParams:
    """Mean and scale tensors for the conditional Gaussian, matching the latent shape."""

    mean: Tensor
    scale: Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise EntropyError(
                f"mean shape {self.mean.shape} != scale shape {self.scale.shape}"
            )

    def clamped_scale(self):
        return T.clamp_min(self.scale, SCALE_MIN)


def _std_cdf(x):
    """Standard normal CDF as a graph op, via erf."""
    return (T.erf(x * (1.0 / _SQRT2)) + 1.0) * 0.5


def gaussian_rate(y, params):
    """Differentiable bits per element of y under N(mean, scale^2) + U(-.5,.5).

    Evaluated on the negative side of the mean for numerical symmetry; the
    result is exactly symmetric in (y - mean).
    """
    if y.shape != params.mean.shape:
        raise EntropyError(f"value shape {y.shape} != param shape {params.mean.shape}")
    scale = params.clamped_scale()
    centered = y - params.mean
    neg = -T.absolute(centered)
    upper = _std_cdf((neg + 0.5) / scale)
    lower = _std_cdf((neg - 0.5) / scale)
    likelihood = T.clamp_min(upper - lower, LIKELIHOOD_FLOOR)
    return -T.log2(likelihood)


# -- learned factorized prior ---------------------------------------------------


class FactorizedModel(Module):
    """Per-channel monotone CDF network (the learned factorized prior).

    Each channel owns a 1 -> width -> width -> 1 stack; weights pass through
    softplus so every stage is strictly increasing, and interior stages add
    a tanh-gated bend.  The final logit goes through a sigmoid, giving a
    valid CDF with limits 0 and 1.
    """

    kind = "factorized-prior"

    def __init__(self, rng, channels, width=3, init_scale=10.0):
        self.channels = channels
        self.width = width
        dims = (1, width, width, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.mats = []
        self.biases = []
        self.gates = []
        for i in range(len(dims) - 1):
            din, dout = dims[i], dims[i + 1]
            init = float(np.log(np.expm1(1.0 / scale / dout)))
            self.mats.append(Parameter(np.full((channels, dout, din), init, dtype=np.float32)))
            self.biases.append(Parameter(
                rng.uniform(-0.5, 0.5, size=(channels, dout, 1)).astype(np.float32)))
            if i < len(dims) - 2:
                self.gates.append(Parameter(np.zeros((channels, dout, 1), dtype=np.float32)))
        self._tails = None

    def logits(self, x):
        """CDF logits for x of shape (C, 1, L); returns the same shape."""
        if x.ndim != 3 or x.shape[0] != self.channels or x.shape[1] != 1:
            raise EntropyError(f"factorized logits expect (C, 1, L), got {x.shape}")
        h = x
        for i, (m, b) in enumerate(zip(self.mats, self.biases)):
            h = T.matmul(T.softplus(m), h) + b
            if i < len(self.gates):
                h = h + T.tanh(self.gates[i]) * T.tanh(h)
        return h

    def bin_likelihood(self, x):
        """P(round = x-ish bin) for x of shape (C, 1, L), via the +/- 0.5 box."""
        lower = self.logits(x - 0.5)
        upper = self.logits(x + 0.5)
        sign = -np.sign(lower.data + upper.data)
        sign = Tensor(np.where(sign == 0, 1.0, sign).astype(x.dtype))
        like = T.absolute(T.sigmoid(upper * sign) - T.sigmoid(lower * sign))
        return T.clamp_min(like, LIKELIHOOD_FLOOR)

    def cdf_values(self, channel, points):
        """Float64 CDF evaluated outside the graph, for table building."""
        pts = np.asarray(points, dtype=np.float64).reshape(1, 1, -1)
        h = pts
        for i in range(len(self.mats)):
            m = np.logaddexp(0.0, self.mats[i].data[channel].astype(np.float64))
            b = self.biases[i].data[channel].astype(np.float64)
            h = m @ h + b
            if i < len(self.gates):
                g = np.tanh(self.gates[i].data[channel].astype(np.float64))
                h = h + g * np.tanh(h)
        return special.expit(h.reshape(-1))


def factorized_rate(z, model):
    """Differentiable bits per element of an (N, C, H, W) tensor under the prior."""
    if z.ndim != 4:
        raise EntropyError(f"factorized_rate expects (N, C, H, W), got {z.shape}")
    n, c, h, w = z.shape
    if c != model.channels:
        raise EntropyError(f"channel mismatch: input {c}, model {model.channels}")
    flat = z.transpose((1, 0, 2, 3)).reshape(c, 1, n * h * w)
    like = model.bin_likelihood(flat)
    bits = -T.log2(like)
    return bits.reshape(c, n, h, w).transpose((1, 0, 2, 3))


# -- quantized CDF tables -------------------------------------------------------


@dataclass
class CdfTable:
    """Range-coder table over [offset, offset + n_regular) plus two escapes.

    Symbol 0 is the low escape, symbols 1..n_regular map to integer values
    offset..offset+n_regular-1, and the last symbol is the high escape.
    ``cum`` has length n_symbols + 1 with cum[0] = 0, cum[-1] = 2^16, and
    every bin at least one frequency unit wide.
    """

    offset: int
    n_regular: int
    cum: np.ndarray = field(repr=False)

    @property
    def n_symbols(self):
        return self.n_regular + 2

    def symbol_of(self, value):
        v = int(value) - self.offset
        if 0 <= v < self.n_regular:
            return v + 1
        return 0 if v < 0 else self.n_regular + 1

    def value_of(self, symbol):
        """Integer value of a regular symbol; escapes have no table value."""
        if not 1 <= symbol <= self.n_regular:
            raise EntropyError(f"symbol {symbol} is an escape, not a regular value")
        return self.offset + symbol - 1

    def model_pmf(self):
        return np.diff(self.cum.astype(np.float64)) / TABLE_TOTAL


def _quantize_pmf(pmf_parts):
    """Turn [low_tail, p..., high_tail] masses into a valid cumfreq array."""
    pmf = np.asarray(pmf_parts, dtype=np.float64)
    pmf = np.clip(pmf, 0.0, None)
    total = pmf.sum()
    if not np.isfinite(total) or total <= 0:
        raise EntropyError("degenerate PMF: no probability mass")
    cdf = np.concatenate(([0.0], np.cumsum(pmf / total)))
    cum = np.rint(cdf * TABLE_TOTAL).astype(np.int64)
    cum[0] = 0
    cum[-1] = TABLE_TOTAL
    for i in range(1, len(cum) - 1):
        if cum[i] <= cum[i - 1]:
            cum[i] = cum[i - 1] + 1
    for i in range(len(cum) - 2, 0, -1):
        if cum[i] >= cum[i + 1]:
            cum[i] = cum[i + 1] - 1
    if np.any(np.diff(cum) < 1):
        raise EntropyError("PMF has too many bins for 16-bit table precision")
    return cum.astype(np.uint32)


_GAUSS_TABLE_CACHE = {}


def _gaussian_table(sigma, tail_mass):
    z = special.ndtri(1.0 - tail_mass)
    vmax = max(0, int(np.ceil(z * sigma - 0.5)))
    vmin = -vmax
    edges = np.arange(vmin, vmax + 2) - 0.5
    cdf = special.ndtr(edges / sigma)
    pmf = np.diff(cdf)
    low_tail = cdf[0]
    high_tail = 1.0 - cdf[-1]
    cum = _quantize_pmf(np.concatenate(([low_tail], pmf, [high_tail])))
    return CdfTable(offset=vmin, n_regular=vmax - vmin + 1, cum=cum)


# scale levels for the conditional Gaussian; sigmas snap up to the next level
SCALE_LEVELS = np.geomspace(SCALE_MIN, 64.0, 64)


def _level_index(sigma):
    s = np.clip(np.asarray(sigma, dtype=np.float64), SCALE_MIN, SCALE_LEVELS[-1])
    idx = np.searchsorted(SCALE_LEVELS, s, side="left")
    return np.minimum(idx, len(SCALE_LEVELS) - 1)


def _factorized_channel_table(model, channel, tail_mass):
    lo, hi = -(1 << 15), (1 << 15) - 1

    def cdf_at(v):
        return float(model.cdf_values(channel, [v - 0.5])[0])

    # largest v with CDF(v - 0.5) <= tail_mass
    a, b = lo, hi
    if cdf_at(lo) > tail_mass:
        vmin = lo
    else:
        while a < b:
            mid = (a + b + 1) // 2
            if cdf_at(mid) <= tail_mass:
                a = mid
            else:
                b = mid - 1
        vmin = a

    def upper_at(v):
        return 1.0 - float(model.cdf_values(channel, [v + 0.5])[0])

    a, b = lo, hi
    if upper_at(hi) > tail_mass:
        vmax = hi
    else:
        while a < b:
            mid = (a + b) // 2
            if upper_at(mid) <= tail_mass:
                b = mid
            else:
                a = mid + 1
        vmax = a

    if vmax < vmin:
        vmin = vmax = int(np.rint((vmin + vmax) / 2.0))
    edges = np.arange(vmin, vmax + 2) - 0.5
    cdf = model.cdf_values(channel, edges)
    pmf = np.diff(cdf)
    cum = _quantize_pmf(np.concatenate(([cdf[0]], pmf, [1.0 - cdf[-1]])))
    return CdfTable(offset=int(vmin), n_regular=int(vmax - vmin + 1), cum=cum)


def build_cdf_tables(model, tail_mass=TAIL_MASS):
    """Quantized coding tables for a model.

    FactorizedModel -> one CdfTable per channel.
    GaussianParams  -> one CdfTable per element (references shared across
    equal scale levels), in C-order of the parameter arrays; symbols are
    the mean-centered residuals round(y - mean).
    """
    if not 0 < tail_mass < 0.5:
        raise EntropyError(f"tail_mass {tail_mass} out of range")
    if isinstance(model, FactorizedModel):
        return [_factorized_channel_table(model, c, tail_mass) for c in range(model.channels)]
    if isinstance(model, GaussianParams):
        sigmas = model.clamped_scale().data
        idx = _level_index(sigmas).reshape(-1)
        tables = []
        for i in idx:
            key = (int(i), tail_mass)
            if key not in _GAUSS_TABLE_CACHE:
                _GAUSS_TABLE_CACHE[key] = _gaussian_table(float(SCALE_LEVELS[i]), tail_mass)
            tables.append(_GAUSS_TABLE_CACHE[key])
        return tables
    raise EntropyError(f"no table builder for {type(model).__name__}")


def tables_to_arrays(tables, prefix):
    """Flatten CdfTables into checkpoint entries under a reserved name prefix."""
    out = {}
    for i, t in enumerate(tables):
        out[f"{prefix}{i}.meta"] = np.array([t.offset, t.n_regular], dtype=np.float32)
        out[f"{prefix}{i}.cum"] = t.cum.astype(np.float32)
    return out


def tables_from_arrays(arrays, prefix):
    tables = []
    i = 0
    while f"{prefix}{i}.meta" in arrays:
        meta = arrays[f"{prefix}{i}.meta"]
        cum = arrays[f"{prefix}{i}.cum"].astype(np.uint32)
        tables.append(CdfTable(offset=int(meta[0]), n_regular=int(meta[1]), cum=cum))
        i += 1
    return tables
