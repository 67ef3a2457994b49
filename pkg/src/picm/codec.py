"""Content-weighted variable-rate feature codec.

The analysis transform is conditioned on an importance map m (values in
[0, 1] on the latent grid) through SFT sites whose (gamma, beta) pairs come
from a condition branch q_a(m); the synthesis transform is conditioned on
w = q_g(z_hat), which the decoder can recompute from the decoded
hyper-latent alone, so no side channel ever carries m.

Training weights the per-position squared feature error by
lambda = 0.5 + 31.5 m (expanded nearest-neighbor from the latent grid) and
adds the estimated bits of both quantized tensors; uniform-noise
quantization stands in for rounding so the whole loss is differentiable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.tensor import Tensor
from .diffcore.layers import Module, Parameter, Conv2d, ConvTranspose2d, SftResBlock, sft_modulate
from .diffcore.optim import Adam
from . import entropy
from .entropy import FactorizedModel, GaussianParams, quantize, gaussian_rate, factorized_rate
from .coder import rc_encode, rc_decode, Bitstream
from .prompts import MAP_KINDS, gen_manual_map, map_to_lambda, validate_map


class CodecError(ValueError):
    pass


@dataclass
class CodecConfig:
    in_channels: int = 32
    base: int = 32
    latent: int = 48
    hyper: int = 16
    cond_width: int = 16
    w_width: int = 24
    tail_mass: float = entropy.TAIL_MASS

    # two stride-2 convs in g_a plus one in h_a
    stride: int = 4
    hyper_stride: int = 2

    # quantization levels of the importance sketch carried in the first
    # hyper channel
    map_levels: int = 7

    def __post_init__(self):
        # checkpoints store scalars as float32; snap up front so a config
        # survives a save/load round trip unchanged
        self.tail_mass = float(np.float32(self.tail_mass))


class CondHead(Module):
    """Two-layer conv head mapping a conditioning map to an SFT (gamma, beta) pair.

    gamma is produced as 1 + residual so a freshly initialized site is close
    to the identity transform.  Heads that consume the importance map
    directly can additionally carry a trainable per-channel gain ramp,
    initialized so gamma scales roughly linearly from gain_ramp at m = 0 up
    to 1 at m = 1.  Starting with the gain already coupled to the map keeps
    rate control out of the flat local optimum where the conditioning is
    ignored and every map level codes the same latent.
    """

    def __init__(self, rng, cin, hidden, channels, upsample, gain_ramp=0.0):
        self.upsample = upsample
        self.channels = channels
        self.conv1 = Conv2d(rng, cin, hidden, k=3)
        self.conv2 = Conv2d(rng, hidden, 2 * channels, k=3)
        self.conv2.weight = Parameter(
            (rng.standard_normal(self.conv2.weight.shape) * 0.02).astype(np.float32))
        self.ramp = None
        if gain_ramp:
            self.ramp = Parameter(
                np.full((1, channels, 1, 1), 1.0 - gain_ramp, dtype=np.float32))

    def forward(self, x):
        if self.upsample > 1:
            x = T.upsample_nearest(x, self.upsample)
        h = self.conv2(T.leaky_relu(self.conv1(x), 0.01))
        c = self.channels
        gamma = h[:, :c] + 1.0
        if self.ramp is not None:
            gamma = gamma + self.ramp * (x - 1.0)
        beta = h[:, c:]
        return gamma, beta


class CodecModel(Module):
    def __init__(self, rng, cfg=None):
        cfg = cfg or CodecConfig()
        self.cfg = cfg
        cf, cb, cm, ch = cfg.in_channels, cfg.base, cfg.latent, cfg.hyper

        # analysis: conv s2 -> SFT resblock -> conv s2 -> SFT
        self.ga_conv1 = Conv2d(rng, cf, cb, k=3, stride=2)
        self.ga_res = SftResBlock(rng, cb)
        self.ga_conv2 = Conv2d(rng, cb, cm, k=3, stride=2)
        self.qa_in = CondHead(rng, 1, cfg.cond_width, cb, upsample=2, gain_ramp=0.15)
        self.qa_res = CondHead(rng, 1, cfg.cond_width, cb, upsample=2, gain_ramp=0.15)
        self.qa_out = CondHead(rng, 1, cfg.cond_width, cm, upsample=1, gain_ramp=0.15)

        # hyper path; the first hyper channel deterministically carries a
        # quantized sketch of the importance map, so the decoded stream tells
        # the entropy model and synthesis heads which rate regime each region
        # was coded in without the decoder ever seeing m itself
        self.ha_conv1 = Conv2d(rng, cm + 1, ch, k=3)
        self.ha_conv2 = Conv2d(rng, ch, ch - 1, k=3, stride=2)
        self.hs_up = ConvTranspose2d(rng, ch, 2 * ch, k=3, stride=2, padding=1, output_padding=1)
        self.hs_out = Conv2d(rng, 2 * ch, 2 * cm, k=3)
        self.qg_conv1 = Conv2d(rng, ch, cfg.w_width, k=3)
        self.qg_conv2 = Conv2d(rng, cfg.w_width, cfg.w_width, k=3)
        self.fm = FactorizedModel(rng, ch)

        # multiplicative coupling of the coding scale to the decoded sketch:
        # sigma shrinks by about exp(-ramp) as importance falls to zero,
        # matching the encoder-side gain ramp from step one of training
        self.sigma_ramp = Parameter(np.full((1, cm, 1, 1), 3.0, dtype=np.float32))

        # synthesis: SFT -> tconv s2 -> SFT resblock -> tconv s2 -> SFT; the
        # heads see w plus the decoded importance sketch
        self.qs_in = CondHead(rng, cfg.w_width + 1, cfg.cond_width, cm, upsample=2)
        self.qs_res = CondHead(rng, cfg.w_width + 1, cfg.cond_width, cb, upsample=4)
        self.qs_out = CondHead(rng, cfg.w_width + 1, cfg.cond_width, cf, upsample=8)
        self.gs_up1 = ConvTranspose2d(rng, cm, cb, k=3, stride=2, padding=1, output_padding=1)
        self.gs_res = SftResBlock(rng, cb)
        self.gs_up2 = ConvTranspose2d(rng, cb, cf, k=3, stride=2, padding=1, output_padding=1)

    # -- transforms -------------------------------------------------------------

    def latent_grid(self, feature_hw):
        h, w = feature_hw
        s = self.cfg.stride
        if h % s or w % s:
            raise CodecError(f"feature dims ({h}, {w}) not divisible by stride {s}")
        return h // s, w // s

    def analyze(self, f, m):
        """Latent y = g_a(f) conditioned on the importance map m.

        f: (N, C_in, H, W); m: (N, 1, H/s, W/s) with values in [0, 1].
        """
        if f.ndim != 4 or f.shape[1] != self.cfg.in_channels:
            raise CodecError(f"feature shape {f.shape} does not match config "
                             f"(in_channels={self.cfg.in_channels})")
        gh, gw = self.latent_grid(f.shape[2:])
        if not isinstance(m, Tensor):
            m = Tensor(validate_map(m).astype(np.float32).reshape(1, 1, gh, gw))
        if m.shape != (f.shape[0], 1, gh, gw):
            raise CodecError(f"importance map shape {m.shape} != {(f.shape[0], 1, gh, gw)}")
        g0, b0 = self.qa_in(m)
        g1, b1 = self.qa_res(m)
        g2, b2 = self.qa_out(m)
        x = T.leaky_relu(self.ga_conv1(f), 0.01)
        x = sft_modulate(x, g0, b0)
        x = self.ga_res(x, g1, b1)
        x = self.ga_conv2(x)
        return sft_modulate(x, g2, b2)

    def assemble_hyper(self, y, m):
        """Pre-quantization hyper-latent: importance sketch plus learned channels."""
        sketch = T.avg_pool(m, self.cfg.hyper_stride) * float(self.cfg.map_levels)
        feat = self.ha_conv2(T.leaky_relu(self.ha_conv1(T.concat([y, m], axis=1)), 0.01))
        return T.concat([sketch, feat], axis=1)

    def hyper_path(self, y, m, mode, rng=None, noise=None):
        """Quantized hyper-latent, Gaussian params, and the decoder-side w.

        The hyper-encoder consumes the importance map next to y, but w and
        the Gaussian params depend only on the quantized hyper-latent, so the
        decoder reproduces them exactly from the decoded stream.
        """
        z_hat = quantize(self.assemble_hyper(y, m), mode, rng=rng, noise=noise)
        return _hyper_from_zhat(self, z_hat)

    def synthesize(self, y_hat, w):
        """Reconstructed features from the quantized latent and w = q_g(z_hat)."""
        ga, ba = self.qs_in(w)
        gb, bb = self.qs_res(w)
        gc, bc = self.qs_out(w)
        x = sft_modulate(y_hat, ga, ba)
        x = T.leaky_relu(self.gs_up1(x), 0.01)
        x = self.gs_res(x, gb, bb)
        return sft_modulate(self.gs_up2(x), gc, bc)

    def forward_train(self, f, m, rng):
        """Noise-relaxed end-to-end pass; returns everything rd_loss needs."""
        y = self.analyze(f, m)
        z_hat, params, w = self.hyper_path(y, m, "noise", rng=rng)
        y_hat = quantize(y, "noise", rng=rng)
        bits_y = gaussian_rate(y_hat, params)
        bits_z = factorized_rate(z_hat, self.fm)
        f_hat = self.synthesize(y_hat, w)
        return f_hat, bits_y, bits_z

    # -- coding tables ------------------------------------------------------------

    def z_tables(self):
        key = tuple(id(p.data) for p in self.fm.parameters())
        if getattr(self, "_zt_key", None) != key:
            self._zt = entropy.build_cdf_tables(self.fm, self.cfg.tail_mass)
            self._zt_key = key
        return self._zt


# -- loss -----------------------------------------------------------------------


@dataclass
class RdLoss:
    total: Tensor
    rate_bits: float
    distortion: float
    mse: float


def rd_loss(f, f_hat, bits_y, bits_z, lam):
    """Rate-distortion objective with per-position importance weights.

    Both terms are normalized per feature position: the rate term is total
    bits / (H*W) and the distortion term weights each position's squared
    channel-vector error by its lambda, averaged over positions.  The shared
    normalization keeps the exchange rate between a bit and a unit of error
    independent of feature size.  lam lives on the latent grid; each latent
    cell weights the feature positions mapping to it.  With a uniform map
    the loss reduces to R_total / (H*W) + lam * C * MSE(f, f_hat).
    """
    n, c, h, w = f.shape
    if f_hat.shape != f.shape:
        raise CodecError(f"feature shape {f.shape} != reconstruction {f_hat.shape}")
    lam_arr = np.asarray(lam.data if isinstance(lam, Tensor) else lam, dtype=np.float64)
    if lam_arr.ndim == 2:
        lam_arr = np.broadcast_to(lam_arr, (n, 1) + lam_arr.shape)
    if lam_arr.ndim != 4 or lam_arr.shape[0] != n or lam_arr.shape[1] != 1:
        raise CodecError(f"lambda map shape {lam_arr.shape} incompatible with batch {n}")
    if lam_arr.min() <= 0:
        raise CodecError("lambda weights must be positive")
    gh, gw = lam_arr.shape[2:]
    if h % gh or w % gw or h // gh != w // gw:
        raise CodecError(f"feature dims ({h}, {w}) not an integer multiple of "
                         f"lambda grid ({gh}, {gw})")
    factor = h // gh
    lam_t = Tensor(np.ascontiguousarray(lam_arr, dtype=np.float32).astype(f.dtype))

    rate = (bits_y.sum() + bits_z.sum()) * (1.0 / (n * h * w))
    err = f - f_hat
    sq = (err * err).sum(axis=1, keepdims=True)
    cell = T.avg_pool(sq, factor) if factor > 1 else sq
    dist = (lam_t * cell).mean()
    total = rate + dist
    return RdLoss(
        total=total,
        rate_bits=float(rate.data) * h * w,
        distortion=float(dist.data),
        mse=float(sq.data.mean() / c),
    )


# -- real coding ------------------------------------------------------------------


def _expand_channel_tables(tables, shape):
    n, c, h, w = shape
    if n != 1:
        raise CodecError("coding works on single tensors, not batches")
    per_elem = []
    for ci in range(c):
        per_elem.extend([tables[ci]] * (h * w))
    return per_elem


def encode_parts(f, m, model):
    """Everything the encoder derives from one (C, H, W) feature tensor.

    Returned dict carries the integer symbol arrays, the parallel table
    sequences, the quantized latent, Gaussian params and w, so callers can
    audit estimated against actual rates or reuse the encoder-side
    reconstruction path.
    """
    arr = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float32)
    if arr.ndim != 3:
        raise CodecError(f"compress expects a (C, H, W) feature tensor, got {arr.shape}")
    ft = Tensor(arr[None])
    gh, gw = model.latent_grid(arr.shape[1:])
    m_arr = validate_map(m, shape=(gh, gw)).astype(np.float32)
    mt = Tensor(m_arr.reshape(1, 1, gh, gw))
    y = model.analyze(ft, mt)

    z_hat = quantize(model.assemble_hyper(y, mt), "round")
    z_syms = z_hat.data.reshape(-1).astype(np.int64)
    _, params, w = _hyper_from_zhat(model, z_hat)

    centered = y.data - params.mean.data
    y_syms = entropy._round_away(centered).reshape(-1).astype(np.int64)
    y_hat = Tensor(y_syms.reshape(params.mean.shape).astype(np.float32) + params.mean.data)

    return {
        "feature_dims": tuple(arr.shape),
        "y_dims": tuple(y.shape[1:]),
        "z_dims": tuple(z_hat.shape[1:]),
        "y": y,
        "y_hat": y_hat,
        "z_hat": z_hat,
        "params": params,
        "w": w,
        "z_syms": z_syms,
        "y_syms": y_syms,
        "z_tables": _expand_channel_tables(model.z_tables(), z_hat.shape),
        "y_tables": entropy.build_cdf_tables(params, model.cfg.tail_mass),
    }


def compress(f, m, model):
    """Code one feature tensor (C, H, W) under importance map m into a Bitstream."""
    parts = encode_parts(f, m, model)
    z_bytes = rc_encode(parts["z_syms"], parts["z_tables"])
    y_bytes = rc_encode(parts["y_syms"], parts["y_tables"])
    return Bitstream(
        feature_dims=parts["feature_dims"],
        y_dims=parts["y_dims"],
        z_dims=parts["z_dims"],
        lambda_tag=model.cfg.stride,
        z_bytes=z_bytes,
        y_bytes=y_bytes,
        crc=Bitstream.symbol_crc(parts["z_syms"], parts["y_syms"]),
    )


def _hyper_from_zhat(model, z_hat):
    # the sketch channel is a pure function of the encoder's input map, so
    # reading it through .data cuts no parameter gradients
    levels = float(model.cfg.map_levels)
    m_rec = Tensor(np.clip(np.asarray(z_hat.data)[:, :1] / levels, 0.0, 1.0).astype(np.float32))
    m_up = T.upsample_nearest(m_rec, model.cfg.hyper_stride)
    h = T.leaky_relu(model.hs_up(z_hat), 0.01)
    h = model.hs_out(h)
    cm = model.cfg.latent
    mean = h[:, :cm]
    scale = entropy.SCALE_MIN + T.softplus(h[:, cm:]) * T.exp(model.sigma_ramp * (m_up - 1.0))
    w = model.qg_conv2(T.leaky_relu(model.qg_conv1(z_hat), 0.01))
    return z_hat, GaussianParams(mean, scale), T.concat([w, m_rec], axis=1)


def decompress(stream, model):
    """Reconstruct features from a Bitstream; needs only the model, never m."""
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.frombytes(bytes(stream))
    cf = model.cfg.in_channels
    if stream.feature_dims[0] != cf:
        raise CodecError(f"stream carries {stream.feature_dims[0]} feature channels, "
                         f"model expects {cf}")
    zc, zh, zw = stream.z_dims
    z_tables = _expand_channel_tables(model.z_tables(), (1, zc, zh, zw))
    z_syms = rc_decode(stream.z_bytes, z_tables)
    z_hat = Tensor(z_syms.reshape(1, zc, zh, zw).astype(np.float32))

    _, params, w = _hyper_from_zhat(model, z_hat)
    if tuple(params.mean.shape[1:]) != tuple(stream.y_dims):
        raise CodecError(f"stream latent dims {stream.y_dims} do not match model "
                         f"output {tuple(params.mean.shape[1:])}")
    y_tables = entropy.build_cdf_tables(params, model.cfg.tail_mass)
    y_syms = rc_decode(stream.y_bytes, y_tables)
    stream.verify_symbols(z_syms, y_syms)
    y_hat = Tensor(y_syms.reshape(params.mean.shape).astype(np.float32) + params.mean.data)
    f_hat = model.synthesize(y_hat, w)
    return f_hat.data[0]


def estimated_round_bits(f, m, model):
    """Round-mode per-element rate estimates (bits for y and z) under the model."""
    parts = encode_parts(f, m, model)
    bits_y = gaussian_rate(parts["y_hat"], parts["params"])
    bits_z = factorized_rate(parts["z_hat"], model.fm)
    return bits_y.data[0], bits_z.data[0], parts


# -- training ---------------------------------------------------------------------


@dataclass
class TrainCodecConfig:
    steps: int = 8000
    batch_size: int = 8
    lr: float = 1e-3
    lr_drop_at: float = 0.85
    lr_drop: float = 0.1
    seed: int = 0
    # oversample uniform and endpoint maps: whole-image rate control is the
    # behavior the spatial kinds build on
    map_kinds: tuple = ("uniform", "uniform", "corner", "corner",
                        "gradation", "gmm", "grid")
    grad_clip: float = 10.0
    snapshot_every: int = 200


@dataclass
class TrainResult:
    model: CodecModel
    log: list = field(repr=False)
    aborted: bool = False


def _clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_codec(features, cfg, model=None):
    """Train (or continue training) a codec on a bank of feature tensors.

    features: (N, C, H, W) float array.  Every step draws a fresh batch and
    an independent random manual importance map per sample.  A non-finite
    loss aborts and restores the last snapshot.
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 4:
        raise CodecError(f"features must be (N, C, H, W), got {feats.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0DEC]))
    if model is None:
        model = CodecModel(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x11717])),
                           CodecConfig(in_channels=feats.shape[1]))
    gh, gw = model.latent_grid(feats.shape[2:])
    params = model.trainable_parameters()
    opt = Adam(params, lr=cfg.lr)
    log = []
    snapshot = model.state_dict()
    t0 = time.time()
    for step in range(cfg.steps):
        if step == int(cfg.steps * cfg.lr_drop_at):
            opt.lr = cfg.lr * cfg.lr_drop
        idx = rng.integers(0, len(feats), size=cfg.batch_size)
        batch = Tensor(feats[idx])
        maps = np.stack([
            gen_manual_map(cfg.map_kinds[int(rng.integers(0, len(cfg.map_kinds)))], gh, gw, rng)
            for _ in range(cfg.batch_size)
        ])[:, None]
        lam = np.stack([map_to_lambda(mi[0]) for mi in maps])[:, None]
        f_hat, bits_y, bits_z = model.forward_train(batch, Tensor(maps), rng)
        out = rd_loss(batch, f_hat, bits_y, bits_z, lam)
        if not np.isfinite(out.total.data):
            model.load_state_dict(snapshot)
            log.append({"step": step, "event": "non-finite loss, restored snapshot"})
            return TrainResult(model=model, log=log, aborted=True)
        model.zero_grad()
        out.total.backward()
        _clip_gradients(params, cfg.grad_clip)
        opt.step()
        log.append({
            "step": step,
            "loss": float(out.total.data),
            "rate_bits": out.rate_bits,
            "mse": out.mse,
        })
        if (step + 1) % cfg.snapshot_every == 0:
            snapshot = model.state_dict()
    log.append({"step": cfg.steps, "event": f"done in {time.time() - t0:.1f}s"})
    return TrainResult(model=model, log=log)
