"""Compression prompts and task prompts.

A compression prompt is an importance map on the codec's latent grid,
values in [0, 1], that steers spatial bit allocation: manually generated
maps drive codec training, and a small selector network generates them
from backbone features at transfer time.  Task prompts are the decoder-side
counterpart: learnable tokens (or zero-initialized residual adapters)
injected into the frozen backbone stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.layers import Module, Parameter, Conv2d, trunc_normal

LAMBDA_MIN = 0.5
LAMBDA_MAX = 32.0

MAP_KINDS = ("uniform", "corner", "gradation", "gmm", "grid")


class PromptError(ValueError):
    pass


def validate_map(m, shape=None):
    arr = np.asarray(m, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise PromptError(f"importance map shape {arr.shape} != expected {tuple(shape)}")
    if arr.size == 0:
        raise PromptError("empty importance map")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise PromptError(f"importance map values outside [0, 1]: "
                          f"min {arr.min():.4g}, max {arr.max():.4g}")
    return arr


def map_to_lambda(m):
    """Affine map from importance in [0, 1] to distortion weights in [0.5, 32]."""
    arr = validate_map(m)
    return (LAMBDA_MIN + (LAMBDA_MAX - LAMBDA_MIN) * arr).astype(np.float32)


# -- manual map generators -------------------------------------------------------


def uniform_map(value, h, w):
    if not 0.0 <= value <= 1.0:
        raise PromptError(f"uniform map value {value} outside [0, 1]")
    return np.full((h, w), value, dtype=np.float32)


def gradation_map(a, b, h, w, axis=1):
    """Linear ramp from a to b along the given axis (1 = across width)."""
    n = w if axis == 1 else h
    ramp = np.linspace(a, b, n, dtype=np.float32)
    if axis == 1:
        return np.broadcast_to(ramp, (h, w)).copy()
    return np.broadcast_to(ramp[:, None], (h, w)).copy()


def gmm_map(means, stds, weights, h, w):
    """Isotropic Gaussian mixture density on the grid, normalized to max 1."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
    stds = np.asarray(stds, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (len(means) == len(stds) == len(weights)):
        raise PromptError("gmm parameter lengths disagree")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dens = np.zeros((h, w))
    for (my, mx), s, wt in zip(means, stds, weights):
        d2 = (yy - my) ** 2 + (xx - mx) ** 2
        dens += wt * np.exp(-0.5 * d2 / (s * s)) / (2.0 * np.pi * s * s)
    peak = dens.max()
    if peak <= 0:
        raise PromptError("degenerate gmm density")
    return (dens / peak).astype(np.float32)


def grid_map(values, h, w):
    """Blockwise-constant map; values is a (bh, bw) array of block levels."""
    values = np.asarray(values, dtype=np.float32)
    bh, bw = values.shape
    rows = np.array_split(np.arange(h), bh)
    cols = np.array_split(np.arange(w), bw)
    out = np.empty((h, w), dtype=np.float32)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            out[np.ix_(r, c)] = values[i, j]
    return out


def gen_manual_map(kind, h, w, rng):
    """One random importance map of the requested kind on an h x w grid."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if h < 1 or w < 1:
        raise PromptError(f"bad map dims ({h}, {w})")
    if kind == "uniform":
        return uniform_map(float(rng.uniform(0.0, 1.0)), h, w)
    if kind == "corner":
        # endpoint of the importance range; oversampling the extremes keeps
        # the lowest and highest rate regimes sharply separated in training
        return uniform_map(float(rng.integers(0, 2)), h, w)
    if kind == "gradation":
        a, b = rng.uniform(0.0, 1.0, size=2)
        axis = int(rng.integers(0, 2))
        return gradation_map(float(a), float(b), h, w, axis=axis)
    if kind == "gmm":
        k = int(rng.integers(1, 5))
        means = np.column_stack([rng.uniform(0, h - 1 if h > 1 else 1, size=k),
                                 rng.uniform(0, w - 1 if w > 1 else 1, size=k)])
        stds = rng.uniform(0.1, 0.4, size=k) * max(min(h, w), 2)
        weights = rng.dirichlet(np.ones(k))
        return gmm_map(means, stds, weights, h, w)
    if kind == "grid":
        bh = int(rng.integers(2, 5))
        bw = int(rng.integers(2, 5))
        return grid_map(rng.uniform(0.0, 1.0, size=(bh, bw)), h, w)
    raise PromptError(f"unknown map kind {kind!r}; choose from {MAP_KINDS}")


# -- information selector --------------------------------------------------------


class SelectorModel(Module):
    """Predicts an importance map on the latent grid from backbone features.

    Each incoming feature scale is projected with a 1x1 conv, resampled to
    the latent grid (average pooling down, nearest neighbor up), and the
    concatenation is fused by a 3x3 conv before a 1x1 sigmoid head.  Kept
    deliberately small: the whole selector must stay under 5% of the
    backbone's parameter count.
    """

    def __init__(self, rng, stage_channels, latent_factor=4, proj_width=8, fuse_width=16):
        if not stage_channels:
            raise PromptError("selector needs at least one feature scale")
        self.stage_channels = tuple(stage_channels)
        self.latent_factor = latent_factor
        self.projs = [Conv2d(rng, c, proj_width, k=1, padding=0) for c in self.stage_channels]
        self.fuse = Conv2d(rng, proj_width * len(self.stage_channels), fuse_width, k=3)
        self.head = Conv2d(rng, fuse_width, 1, k=1, padding=0)
        self.head.weight = Parameter(trunc_normal(rng, self.head.weight.shape, std=0.02))

    def forward(self, features):
        if len(features) != len(self.projs):
            raise PromptError(
                f"selector got {len(features)} feature scales, expected {len(self.projs)}")
        base = features[0]
        if base.shape[2] % self.latent_factor or base.shape[3] % self.latent_factor:
            raise PromptError(
                f"stage-1 dims {base.shape[2:]} not divisible by latent factor "
                f"{self.latent_factor}")
        gh = base.shape[2] // self.latent_factor
        gw = base.shape[3] // self.latent_factor
        cols = []
        for feat, proj, c in zip(features, self.projs, self.stage_channels):
            if feat.shape[1] != c:
                raise PromptError(f"feature has {feat.shape[1]} channels, selector expects {c}")
            x = proj(feat)
            x = _resample(x, gh, gw)
            cols.append(x)
        fused = T.leaky_relu(self.fuse(T.concat(cols, axis=1)), 0.01)
        return T.sigmoid(self.head(fused))


def _resample(x, gh, gw):
    h, w = x.shape[2], x.shape[3]
    if h == gh and w == gw:
        return x
    if h % gh == 0 and w % gw == 0 and h // gh == w // gw:
        return T.avg_pool(x, h // gh)
    if gh % h == 0 and gw % w == 0 and gh // h == gw // w:
        return T.upsample_nearest(x, gh // h)
    raise PromptError(f"cannot resample ({h}, {w}) to latent grid ({gh}, {gw})")


def select_info(features, model):
    """Importance map from a list of per-stage feature tensors."""
    if not isinstance(features, (list, tuple)):
        features = [features]
    return model(list(features))


# -- task prompts ----------------------------------------------------------------


@dataclass
class PromptSpec:
    variant: str = "token"
    length: int = 4
    stages: tuple = (1, 2, 3)

    def __post_init__(self):
        if self.variant not in ("token", "block"):
            raise PromptError(f"unknown prompt variant {self.variant!r}")
        if self.variant == "token" and self.length < 1:
            raise PromptError("token prompts need length >= 1")


class ResidualAdapter(Module):
    """Zero-initialized residual bottleneck; exact identity until trained."""

    kind = "prompt"

    def __init__(self, rng, channels, hidden=None):
        hidden = hidden or max(channels // 4, 4)
        self.conv_in = Conv2d(rng, channels, hidden, k=1, padding=0)
        self.conv_out = Conv2d(rng, hidden, channels, k=1, padding=0)
        self.conv_out.weight = Parameter(np.zeros_like(self.conv_out.weight.data))

    def forward(self, x):
        return x + self.conv_out(T.leaky_relu(self.conv_in(x), 0.01))


class PromptedBackbone(Module):
    """A frozen staged backbone plus trainable per-stage prompt slots."""

    def __init__(self, rng, backbone, spec):
        for i in spec.stages:
            if not 1 <= i < backbone.n_stages:
                raise PromptError(f"stage index {i} out of range for prompting")
        self.backbone = backbone
        self.spec = spec
        self.tokens = []
        self.adapters = []
        if spec.variant == "token":
            for i in spec.stages:
                width = backbone.stage_width(i)
                self.tokens.append(Parameter(trunc_normal(rng, (spec.length, width))))
        else:
            for i in spec.stages:
                self.adapters.append(ResidualAdapter(rng, backbone.stage_width(i)))

    def prompt_parameters(self):
        named = []
        for i, p in enumerate(self.tokens):
            named.append((f"tokens.{i}", p))
        for i, a in enumerate(self.adapters):
            named.extend(a.named_parameters(prefix=f"adapters.{i}."))
        return named

    def run_stages(self, f):
        """Stages after the general extractor, with prompts attached."""
        slot = {s: j for j, s in enumerate(self.spec.stages)}
        x = f
        for i in range(1, self.backbone.n_stages):
            tokens = adapter = None
            if i in slot:
                if self.spec.variant == "token":
                    tokens = self.tokens[slot[i]]
                else:
                    adapter = self.adapters[slot[i]]
            x = self.backbone.run_stage(i, x, prompt_tokens=tokens)
            if adapter is not None:
                x = adapter(x)
        return x


def attach_task_prompts(backbone, spec, rng):
    """Wrap a backbone with trainable prompts; base weights are untouched."""
    return PromptedBackbone(rng, backbone, spec)


def prompt_param_count(spec, widths):
    """Parameter count of token prompts for given per-stage widths."""
    if spec.variant != "token":
        raise PromptError("count formula applies to token prompts")
    return spec.length * int(sum(widths))


# -- parameter partition ---------------------------------------------------------


@dataclass
class ParamPartition:
    trainable: list = field(default_factory=list)
    frozen: list = field(default_factory=list)

    @property
    def trainable_count(self):
        return sum(p.data.size for _, p in self.trainable)

    @property
    def frozen_count(self):
        return sum(p.data.size for _, p in self.frozen)

    @property
    def ratio(self):
        total = self.trainable_count + self.frozen_count
        return self.trainable_count / total if total else 0.0


def partition_params(pipeline):
    """Split a transfer pipeline's parameters into trainable and frozen sets.

    The pipeline must expose ``trainable_modules()`` and ``frozen_modules()``
    returning name -> module/param-list mappings.  The two sets must be
    disjoint and together cover every parameter the pipeline owns.
    """
    part = ParamPartition()
    seen = {}
    for role, named in pipeline.trainable_modules().items():
        for name, p in named:
            key = id(p)
            if key in seen:
                raise PromptError(f"parameter {role}.{name} appears twice in the partition")
            seen[key] = True
            part.trainable.append((f"{role}.{name}", p))
    for role, named in pipeline.frozen_modules().items():
        for name, p in named:
            key = id(p)
            if key in seen:
                raise PromptError(f"parameter {role}.{name} appears twice in the partition")
            seen[key] = False
            part.frozen.append((f"{role}.{name}", p))
    missing = [n for n, p in pipeline.all_parameters() if id(p) not in seen]
    if missing:
        raise PromptError(f"partition does not cover: {missing[:5]}")
    for name, p in part.trainable:
        if not p.trainable:
            raise PromptError(f"{name} is in the trainable set but flagged frozen")
    for name, p in part.frozen:
        if p.trainable:
            raise PromptError(f"{name} is in the frozen set but flagged trainable")
    return part
