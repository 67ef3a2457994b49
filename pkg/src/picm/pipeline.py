"""Downstream transfer orchestration.

Ties a frozen feature extractor and a frozen codec to the trainable
transfer-time additions (information selector, task prompts, task head),
trains them against coded-rate-plus-task-loss, and evaluates with real
entropy coding so reported bitrates are on-disk byte counts, never the
differentiable estimates used during training.
"""

from __future__ import annotations

import json
import os
import subprocess
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from hashlib import sha256
from pathlib import Path

import numpy as np

from .diffcore.tensor import Tensor
from .diffcore.optim import Adam, AdamW
from .diffcore.checkpoint import save_pick, load_pick
from .entropy import quantize, gaussian_rate, factorized_rate
from .coder import Bitstream
from .codec import CodecModel, CodecConfig, compress, decompress
from .prompts import (PromptSpec, SelectorModel, attach_task_prompts,
                      partition_params, validate_map)
from .tasks import (BackboneConfig, StagedBackbone, ClassifierHead,
                    cross_entropy, run_stages)


class PipelineError(RuntimeError):
    """A run failed at execution time (training blew up, artifacts missing)."""


class UsageError(ValueError):
    """The caller asked for something malformed; maps to CLI exit code 2."""


SELECTOR_VARIANTS = ("multi", "single", "manual")


@dataclass
class TransferConfig:
    """Everything a transfer run needs; serialized whole into the manifest."""

    alpha: float = 4.0
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    prompt: PromptSpec = field(default_factory=PromptSpec)
    selector: str = "multi"
    manual_level: float = 0.5
    classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise UsageError(f"alpha must be positive, got {self.alpha}")
        if self.selector not in SELECTOR_VARIANTS:
            raise UsageError(f"selector must be one of {SELECTOR_VARIANTS}, "
                             f"got {self.selector!r}")
        if not 0.0 <= self.manual_level <= 1.0:
            raise UsageError(f"manual_level must lie in [0, 1], got {self.manual_level}")
        if self.steps < 1 or self.batch_size < 1:
            raise UsageError("steps and batch_size must be at least 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        prompt = d.pop("prompt", None)
        if prompt is not None:
            prompt = dict(prompt)
            if "stages" in prompt:
                prompt["stages"] = tuple(prompt["stages"])
            d["prompt"] = PromptSpec(**prompt)
        return cls(**d)


def config_hash(cfg):
    """Short stable digest of a config (dataclass or plain dict)."""
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class RdPoint:
    mode: str
    level: float
    bpp: float
    metric: float
    config_hash: str
    seed: int

    def __post_init__(self):
        if self.bpp < 0:
            raise PipelineError(f"negative bpp {self.bpp}")
        if not 0.0 <= self.metric <= 1.0:
            raise PipelineError(f"metric {self.metric} outside [0, 1]")


# -- the assembled pipeline --------------------------------------------------------


class TransferPipeline:
    """Frozen extractor + codec with the trainable transfer-time modules.

    Not a Module on purpose: the prompted backbone wraps the same object as
    the frozen extractor, so parameter enumeration must be role-based
    rather than attribute-tree based.  The three role methods feed
    ``partition_params``.
    """

    def __init__(self, backbone, codec, prompted, head, selector=None,
                 variant="manual", manual_level=0.5):
        self.backbone = backbone
        self.codec = codec
        self.prompted = prompted
        self.head = head
        self.selector = selector
        self.variant = variant
        self.manual_level = manual_level

    def extract(self, images):
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float32))
        return self.backbone.extract_general(images)

    def selector_features(self, f):
        """Promptless frozen-stage features for the selector, shallowest first."""
        feats = [f]
        if self.variant == "multi":
            x = f
            for i in range(1, min(3, self.backbone.n_stages)):
                x = self.backbone.run_stage(i, x)
                feats.append(x)
        return feats

    def importance_map(self, f, manual_level=None):
        """Encoder-side map on the latent grid, (N, 1, gh, gw) in [0, 1]."""
        gh, gw = self.codec.latent_grid(f.shape[2:])
        if manual_level is None and self.variant == "manual":
            manual_level = self.manual_level
        if manual_level is not None:
            data = np.full((f.shape[0], 1, gh, gw), float(manual_level), dtype=np.float32)
            return Tensor(data)
        return self.selector(self.selector_features(f))

    def task_logits(self, f_hat):
        return run_stages(f_hat, self.prompted, self.head)

    # -- role partition -----------------------------------------------------------

    def trainable_modules(self):
        roles = {}
        if self.selector is not None:
            roles["selector"] = self.selector.named_parameters()
        roles["prompts"] = self.prompted.prompt_parameters()
        roles["head"] = self.head.named_parameters()
        return roles

    def frozen_modules(self):
        return {
            "backbone": self.backbone.named_parameters(),
            "codec": self.codec.named_parameters(),
        }

    def all_parameters(self):
        out = []
        for role, named in list(self.frozen_modules().items()) + list(self.trainable_modules().items()):
            out.extend((f"{role}.{n}", p) for n, p in named)
        return out


def build_pipeline(cfg, backbone, codec, rng):
    """Assemble a TransferPipeline; freezes the backbone and codec in place."""
    backbone.freeze()
    codec.freeze()
    prompted = attach_task_prompts(backbone, cfg.prompt, rng)
    head = ClassifierHead(rng, backbone.cfg.widths[-1], cfg.classes)
    selector = None
    if cfg.selector != "manual":
        n_scales = 1 if cfg.selector == "single" else min(3, backbone.n_stages)
        selector = SelectorModel(rng, backbone.cfg.widths[:n_scales],
                                 latent_factor=codec.cfg.stride)
    return TransferPipeline(backbone, codec, prompted, head, selector=selector,
                            variant=cfg.selector, manual_level=cfg.manual_level)


# -- objective ---------------------------------------------------------------------


@dataclass
class TransferStep:
    total: Tensor
    rate_bits: float
    task_loss: float
    batch_accuracy: float
    map_mean: float


def transfer_objective(pipeline, images, labels, alpha, rng=None, noise=None):
    """Noise-relaxed training objective on one batch: coded rates + alpha * task loss.

    There is no distortion term; reconstruction quality only matters through
    the task head.  The rate is normalized per feature position, matching the
    codec objective, so alpha trades task loss against the same rate scale.
    ``noise`` optionally fixes the (y, z) dither for finite-difference checks.
    """
    f = pipeline.extract(images)
    m = pipeline.importance_map(f)
    codec = pipeline.codec
    y = codec.analyze(f, m)
    noise_y, noise_z = noise if noise is not None else (None, None)
    z_hat, params, w = codec.hyper_path(y, m, "noise", rng=rng, noise=noise_z)
    y_hat = quantize(y, "noise", rng=rng, noise=noise_y)
    bits_y = gaussian_rate(y_hat, params)
    bits_z = factorized_rate(z_hat, codec.fm)
    f_hat = codec.synthesize(y_hat, w)
    logits = pipeline.task_logits(f_hat)
    ce = cross_entropy(logits, labels)
    positions = f.shape[0] * f.shape[2] * f.shape[3]
    rate = (bits_y.sum() + bits_z.sum()) * (1.0 / positions)
    total = rate + ce * alpha
    pred = np.argmax(logits.data, axis=-1)
    return TransferStep(
        total=total,
        rate_bits=float(rate.data) * f.shape[2] * f.shape[3],
        task_loss=float(ce.data),
        batch_accuracy=float((pred == np.asarray(labels)).mean()),
        map_mean=float(m.data.mean()),
    )


# -- training ----------------------------------------------------------------------


@dataclass
class TransferResult:
    pipeline: TransferPipeline
    config: TransferConfig
    partition: object
    log: list = field(repr=False)
    eval: object = None
    manifest: dict = None


def _batch_stream(images, labels, batch_size, rng):
    n = len(images)
    if n < batch_size:
        raise UsageError(f"batch size {batch_size} exceeds dataset size {n}")
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield Tensor(images[idx]), labels[idx]


def _assert_frozen_unchanged(before, backbone, codec):
    for tag, module in (("backbone", backbone), ("codec", codec)):
        now = module.state_dict()
        for name, arr in before[tag].items():
            if not np.array_equal(arr, now[name]):
                raise PipelineError(f"frozen parameter {tag}.{name} changed during transfer")


def transfer_train(cfg, codec, backbone, dataset, out_dir=None):
    """Train selector + prompts + head against the frozen codec and backbone.

    Returns a TransferResult whose eval field holds real-coded val bpp and
    accuracy.  The frozen set is snapshotted up front and re-checked
    bit-for-bit at the end; any drift is a hard failure.
    """
    t0 = time.time()
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E17]))
    pipeline = build_pipeline(cfg, backbone, codec, init_rng)
    frozen_before = {"backbone": backbone.state_dict(), "codec": codec.state_dict()}
    partition = partition_params(pipeline)
    trainables = [p for _, p in partition.trainable]
    opt = AdamW(trainables, lr=cfg.lr, weight_decay=cfg.weight_decay)

    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0157]))
    tr_images, tr_labels = dataset.subset("train")
    batches = _batch_stream(tr_images, tr_labels, cfg.batch_size, data_rng)

    log = []
    for step in range(cfg.steps):
        xb, yb = next(batches)
        out = transfer_objective(pipeline, xb, yb, cfg.alpha, rng=noise_rng)
        if not np.isfinite(out.total.data):
            raise PipelineError(
                f"non-finite transfer loss at step {step}; trailing log: {log[-3:]}")
        for p in trainables:
            p.grad = None
        out.total.backward()
        opt.step()
        log.append({
            "step": step,
            "loss": float(out.total.data),
            "rate_bits": out.rate_bits,
            "task_loss": out.task_loss,
            "batch_accuracy": out.batch_accuracy,
            "map_mean": out.map_mean,
        })

    _assert_frozen_unchanged(frozen_before, backbone, codec)
    va_images, va_labels = dataset.subset("val")
    ev = evaluate(pipeline, va_images, va_labels)
    manifest = run_manifest("transfer", cfg.to_dict(), cfg.seed)
    manifest["quantization_grad"] = "noise"
    manifest["wall_time_s"] = round(time.time() - t0, 3)
    manifest["trainable_ratio"] = partition.ratio
    manifest["eval"] = {"bpp": ev.bpp, "accuracy": ev.accuracy, "n": ev.n}
    result = TransferResult(pipeline=pipeline, config=cfg, partition=partition,
                            log=log, eval=ev, manifest=manifest)
    if out_dir is not None:
        save_transfer_run(out_dir, result)
    return result


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    bpp: float
    accuracy: float
    n: int
    total_bits: int


def evaluate(pipeline, images, labels, manual_level=None, batch_size=16,
             collect_streams=False):
    """Code every sample for real and classify the decoded features.

    bpp is 8 * on-disk stream bytes per source pixel, headers included.
    ``manual_level`` overrides the pipeline's map (used to walk a trained
    model along the uniform-map axis).
    """
    imgs = np.asarray(images, dtype=np.float32)
    labs = np.asarray(labels)
    if imgs.ndim != 4 or len(imgs) == 0:
        raise UsageError(f"evaluation set must be (N, 3, H, W) and non-empty, "
                         f"got shape {imgs.shape}")
    h, w = imgs.shape[2:]
    total_bits = 0
    correct = 0
    streams = []
    for start in range(0, len(imgs), batch_size):
        chunk = imgs[start:start + batch_size]
        f = pipeline.extract(Tensor(chunk))
        m = pipeline.importance_map(f, manual_level=manual_level)
        decoded = []
        for i in range(len(chunk)):
            stream = compress(f.data[i], m.data[i, 0], pipeline.codec)
            blob = stream.tobytes()
            total_bits += 8 * len(blob)
            if collect_streams:
                streams.append(stream)
            decoded.append(decompress(blob, pipeline.codec))
        logits = pipeline.task_logits(Tensor(np.stack(decoded)))
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == labs[start:start + batch_size]).sum())
    result = EvalResult(
        bpp=total_bits / (len(imgs) * h * w),
        accuracy=correct / len(imgs),
        n=len(imgs),
        total_bits=total_bits,
    )
    return (result, streams) if collect_streams else result


def eval_bpp(streams, image_dims):
    """Mean bits per source pixel over a set of coded streams.

    ``image_dims`` are the source image dims, not feature dims; header
    bytes count toward the numerator.
    """
    h, w = image_dims
    if h <= 0 or w <= 0:
        raise UsageError(f"source image area must be positive, got {h}x{w}")
    blobs = [s.tobytes() if isinstance(s, Bitstream) else bytes(s) for s in streams]
    if not blobs:
        raise UsageError("no streams to evaluate")
    return sum(8 * len(b) for b in blobs) / (len(blobs) * h * w)


# -- rate-distortion sweeps ----------------------------------------------------------


RD_CSV_HEADER = "mode,level,bpp,metric,config_hash,seed"


def worker_count(default=1):
    """Sweep parallelism cap; the PICM_THREADS env var overrides the default."""
    raw = os.environ.get("PICM_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"PICM_THREADS must be an integer, got {raw!r}") from None


def rd_sweep(mode, levels, images, labels, runs, csv_path=None):
    """One real-coded rate point per level.

    mode "manual-uniform": ``runs`` is a single trained run; each level is a
    uniform map value the trained model is evaluated at.  mode "selector":
    ``runs`` maps each level (an alpha) to its trained run.  Levels without
    a run are skipped with a warning; a sweep where everything was skipped
    is an error.
    """
    if mode not in ("manual-uniform", "selector"):
        raise UsageError(f"unknown sweep mode {mode!r}")
    if len(np.asarray(images)) == 0:
        raise UsageError("empty evaluation set")

    jobs = []
    for level in levels:
        level = float(level)
        if mode == "manual-uniform":
            run = runs
            if run is None:
                warnings.warn(f"no trained run for manual level {level}, skipping")
                continue
            jobs.append((level, run, level))
        else:
            run = runs.get(level) if hasattr(runs, "get") else None
            if run is None:
                warnings.warn(f"no trained run for alpha {level}, skipping")
                continue
            jobs.append((level, run, None))

    def one(job):
        level, run, manual = job
        res = evaluate(run.pipeline, images, labels, manual_level=manual)
        return RdPoint(mode=mode, level=level, bpp=res.bpp, metric=res.accuracy,
                       config_hash=config_hash(run.config), seed=run.config.seed)

    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        for _, run, _ in jobs:
            run.pipeline.codec.z_tables()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(one, jobs))
    else:
        points = [one(job) for job in jobs]

    if not points:
        raise PipelineError("every sweep level was skipped; nothing evaluated")
    if csv_path is not None:
        write_rd_csv(csv_path, points)
    return points


def write_rd_csv(path, points):
    lines = [RD_CSV_HEADER]
    for p in points:
        lines.append(f"{p.mode},{p.level:g},{p.bpp:.6f},{p.metric:.6f},"
                     f"{p.config_hash},{p.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_rd_csv(path):
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != RD_CSV_HEADER:
        raise PipelineError(f"bad sweep CSV header in {path}")
    points = []
    for line in text[1:]:
        mode, level, bpp, metric, chash, seed = line.split(",")
        points.append(RdPoint(mode=mode, level=float(level), bpp=float(bpp),
                              metric=float(metric), config_hash=chash, seed=int(seed)))
    return points


# -- manifests and artifacts -----------------------------------------------------------


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def run_manifest(kind, config_dict, seed):
    return {
        "manifest_version": 1,
        "kind": kind,
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "seed": seed,
        "git_describe": _git_describe(),
    }


def save_transfer_run(out_dir, result):
    """Write checkpoint, manifest and per-step log for one transfer run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pick(out / "transfer.pick",
              {name: p.data for name, p in result.partition.trainable})
    (out / "manifest.json").write_text(
        json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "log.jsonl", "w") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_transfer_run(run_dir, backbone, codec):
    """Rebuild a trained pipeline from a run directory written by transfer_train."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    ckpt_path = run_dir / "transfer.pick"
    if not manifest_path.exists() or not ckpt_path.exists():
        raise PipelineError(f"incomplete run directory {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    cfg = TransferConfig.from_dict(manifest["config"])
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E17]))
    pipeline = build_pipeline(cfg, backbone, codec, init_rng)
    partition = partition_params(pipeline)
    arrays = load_pick(ckpt_path)
    named = dict(partition.trainable)
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise PipelineError(f"checkpoint mismatch: missing={sorted(missing)[:4]}, "
                            f"unexpected={sorted(extra)[:4]}")
    for name, p in named.items():
        if arrays[name].shape != p.data.shape:
            raise PipelineError(f"checkpoint shape mismatch for {name}")
        p.data = arrays[name].astype(p.data.dtype)
    return TransferResult(pipeline=pipeline, config=cfg, partition=partition,
                          log=[], eval=None, manifest=manifest)


_BACKBONE_CFG_FIELDS = ("heads", "mlp_ratio", "patch")
_CODEC_CFG_FIELDS = ("in_channels", "base", "latent", "hyper", "cond_width",
                     "w_width", "stride", "hyper_stride", "map_levels")


def save_backbone(path, backbone):
    arrays = dict(backbone.state_dict())
    cfg = backbone.cfg
    arrays["cfg/widths"] = np.asarray(cfg.widths, dtype=np.float32)
    arrays["cfg/blocks"] = np.asarray(cfg.blocks, dtype=np.float32)
    arrays["cfg/feature_gain"] = np.asarray([cfg.feature_gain], dtype=np.float32)
    for name in _BACKBONE_CFG_FIELDS:
        arrays[f"cfg/{name}"] = np.asarray([getattr(cfg, name)], dtype=np.float32)
    save_pick(path, arrays)


def load_backbone(path):
    arrays = load_pick(path)
    cfg = BackboneConfig(
        widths=tuple(int(v) for v in arrays.pop("cfg/widths")),
        blocks=tuple(int(v) for v in arrays.pop("cfg/blocks")),
        feature_gain=float(arrays.pop("cfg/feature_gain")[0]),
        **{name: int(arrays.pop(f"cfg/{name}")[0]) for name in _BACKBONE_CFG_FIELDS},
    )
    backbone = StagedBackbone(np.random.default_rng(0), cfg)
    backbone.load_state_dict(arrays)
    return backbone


def save_codec(path, codec):
    arrays = dict(codec.state_dict())
    for name in _CODEC_CFG_FIELDS:
        arrays[f"cfg/{name}"] = np.asarray([getattr(codec.cfg, name)], dtype=np.float32)
    arrays["cfg/tail_mass"] = np.asarray([codec.cfg.tail_mass], dtype=np.float32)
    save_pick(path, arrays)


def load_codec(path):
    arrays = load_pick(path)
    kwargs = {name: int(arrays.pop(f"cfg/{name}")[0]) for name in _CODEC_CFG_FIELDS}
    kwargs["tail_mass"] = float(arrays.pop("cfg/tail_mass")[0])
    codec = CodecModel(np.random.default_rng(0), CodecConfig(**kwargs))
    codec.load_state_dict(arrays)
    return codec


# -- backbone pretraining ---------------------------------------------------------------


def pretrain_backbone(dataset, seed=0, steps=800, lr=1e-3, batch_size=16,
                      target_acc=0.95, eval_every=50):
    """Supervised pretraining of the staged backbone on a labeled dataset.

    Trains backbone and a throwaway head jointly with plain Adam, stopping
    early once validation accuracy reaches ``target_acc``.  Returns
    (backbone, head, log); only the backbone is meant to survive.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B]))
    backbone = StagedBackbone(rng)
    head = ClassifierHead(rng, backbone.cfg.widths[-1], dataset.classes)
    params = backbone.trainable_parameters() + head.trainable_parameters()
    opt = Adam(params, lr=lr)
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    tr_images, tr_labels = dataset.subset("train")
    va_images, va_labels = dataset.subset("val")
    batches = _batch_stream(tr_images, tr_labels, batch_size, data_rng)
    log = []
    for step in range(steps):
        xb, yb = next(batches)
        f = backbone.extract_general(xb)
        logits = run_stages(f, backbone, head)
        loss = cross_entropy(logits, yb)
        if not np.isfinite(loss.data):
            raise PipelineError(f"non-finite pretraining loss at step {step}")
        backbone.zero_grad()
        head.zero_grad()
        loss.backward()
        opt.step()
        entry = {"step": step, "loss": float(loss.data)}
        if (step + 1) % eval_every == 0 or step == steps - 1:
            acc = classify_accuracy(backbone, head, va_images, va_labels)
            entry["val_accuracy"] = acc
            log.append(entry)
            if acc >= target_acc:
                break
        else:
            log.append(entry)
    return backbone, head, log


def classify_accuracy(backbone, head, images, labels, batch_size=32):
    """Plain (uncoded) classification accuracy of backbone + head."""
    imgs = np.asarray(images, dtype=np.float32)
    correct = 0
    for start in range(0, len(imgs), batch_size):
        chunk = Tensor(imgs[start:start + batch_size])
        logits = run_stages(backbone.extract_general(chunk), backbone, head)
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / len(imgs)
