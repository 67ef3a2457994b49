"""Downstream task machinery: a small staged vision backbone, a synthetic
shape-classification dataset, and on-disk dataset loading.

The backbone is a four-stage token mixer.  A 4x patch embed produces the
stage-1 token grid whose output doubles as the "general feature" handed to
the codec; later stages halve the grid and widen channels.  Attention runs
over the full 2-D token grid per stage, which is plenty at 32x32 inputs.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import tensor as T
from .diffcore.tensor import Tensor
from .diffcore.layers import Module, Parameter, Conv2d, Dense, LayerNorm, trunc_normal


class TaskError(ValueError):
    pass


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 64, 96)
    blocks: tuple = (1, 1, 1, 1)
    heads: int = 4
    mlp_ratio: int = 2
    patch: int = 4

    # fixed output gain on the general feature, so its dynamic range sits
    # well above the codec's unit quantization bin
    feature_gain: float = 4.0

    def __post_init__(self):
        if len(self.widths) != len(self.blocks):
            raise TaskError("widths and blocks must align")


class TokenBlock(Module):
    """Pre-norm attention + MLP over (N, T, C) token tensors."""

    def __init__(self, rng, width, heads, mlp_ratio):
        if width % heads:
            raise TaskError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(width)
        self.qkv = Dense(rng, width, 3 * width)
        self.proj = Dense(rng, width, width)
        self.norm2 = LayerNorm(width)
        self.fc1 = Dense(rng, width, mlp_ratio * width)
        self.fc2 = Dense(rng, mlp_ratio * width, width)

    def _attention(self, x):
        n, t, c = x.shape
        h = self.heads
        d = c // h
        qkv = self.qkv(self.norm1(x))
        q = _split_heads(qkv[:, :, 0 * c:1 * c], n, t, h, d)
        k = _split_heads(qkv[:, :, 1 * c:2 * c], n, t, h, d)
        v = _split_heads(qkv[:, :, 2 * c:3 * c], n, t, h, d)
        att = T.matmul(q, k.transpose((0, 2, 1))) * (1.0 / np.sqrt(d))
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v)
        out = out.reshape(n, h, t, d).transpose((0, 2, 1, 3)).reshape(n, t, c)
        return self.proj(out)

    def forward(self, x):
        x = x + self._attention(x)
        h = self.fc2(T.leaky_relu(self.fc1(self.norm2(x)), 0.01))
        return x + h


def _split_heads(x, n, t, h, d):
    return x.reshape(n, t, h, d).transpose((0, 2, 1, 3)).reshape(n * h, t, d)


class StagedBackbone(Module):
    """Patch embed plus a pyramid of token-mixing stages.

    Stage 0 runs right after the patch embed and its output is the general
    feature; stages 1..n-1 each halve the grid and may accept prompt tokens
    that are prepended for the stage's blocks and stripped on exit.
    """

    def __init__(self, rng, cfg=None):
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        self.embed = Conv2d(rng, 3, cfg.widths[0], k=cfg.patch, stride=cfg.patch, padding=0)
        self.downsamples = []
        self.stage_blocks = []
        for i, (w, nb) in enumerate(zip(cfg.widths, cfg.blocks)):
            if i > 0:
                self.downsamples.append(Conv2d(rng, cfg.widths[i - 1], w, k=2, stride=2, padding=0))
            self.stage_blocks.append(
                [TokenBlock(rng, w, cfg.heads, cfg.mlp_ratio) for _ in range(nb)])

    @property
    def n_stages(self):
        return len(self.cfg.widths)

    def stage_width(self, i):
        return self.cfg.widths[i]

    def run_stage(self, i, x, prompt_tokens=None):
        """Run stage i on an (N, C, H, W) grid, optionally with prompt tokens."""
        if i > 0:
            x = self.downsamples[i - 1](x)
        n, c, h, w = x.shape
        tokens = x.reshape(n, c, h * w).transpose((0, 2, 1))
        npt = 0
        if prompt_tokens is not None:
            npt = prompt_tokens.shape[0]
            ones = Tensor(np.ones((n, 1, 1), dtype=prompt_tokens.dtype))
            tiled = prompt_tokens.reshape(1, npt, c) * ones
            tokens = T.concat([tiled, tokens], axis=1)
        for blk in self.stage_blocks[i]:
            tokens = blk(tokens)
        if npt:
            tokens = tokens[:, npt:, :]
        return tokens.transpose((0, 2, 1)).reshape(n, c, h, w)

    def extract_general(self, x):
        """Stage-1 features of an (N, 3, H, W) image batch, 4x downsampled."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise TaskError(f"expected (N, 3, H, W) images, got {x.shape}")
        if x.shape[2] % self.cfg.patch or x.shape[3] % self.cfg.patch:
            raise TaskError(f"image dims {x.shape[2:]} not divisible by patch {self.cfg.patch}")
        return self.run_stage(0, self.embed(x)) * self.cfg.feature_gain

    def run_tail(self, f, start=1):
        x = f
        for i in range(start, self.n_stages):
            x = self.run_stage(i, x)
        return x


class ClassifierHead(Module):
    def __init__(self, rng, width, classes):
        self.fc = Dense(rng, width, classes)

    def forward(self, x):
        pooled = x.mean(axis=(2, 3))
        return self.fc(pooled)


def run_stages(f, backbone, head):
    """Logits from general features through the remaining stages and a head.

    ``backbone`` may be a bare StagedBackbone or a PromptedBackbone wrapper;
    both expose the stages after the extraction point.
    """
    if hasattr(backbone, "run_stages"):
        x = backbone.run_stages(f)
    else:
        x = backbone.run_tail(f)
    return head(x)


def cross_entropy(logits, labels):
    return T.cross_entropy(logits, labels)


def softmax_probs(logits):
    return T.softmax(logits, axis=-1)


# -- synthetic dataset -----------------------------------------------------------

_SHAPES = ("solid", "hstripes", "vstripes", "checker")
_COLORS = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.15],
], dtype=np.float64)

# color bin -1: the fill color is drawn per sample instead of per class, so
# with up to four classes the label is carried only by the fine interior
# pattern and never by coarse color statistics
_FREE_COLOR = -1


def class_attributes(label, classes):
    """Map a class id to a (shape, color bin) pair.

    The first four classes share one unconstrained color bin and differ
    only in shape (the disk's interior pattern); larger class counts add
    fixed color bins on top.
    """
    if not 0 <= label < classes:
        raise TaskError(f"label {label} out of range for {classes} classes")
    a, b = divmod(label, 4)
    if classes <= 4:
        return b, _FREE_COLOR
    return b, (a + b) % 4


@dataclass
class SynthDataset:
    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    classes: int
    seed: int

    def subset(self, split):
        mask = self.split == split
        return self.images[mask], self.labels[mask]


def _render_sample(rng, shape_id, color_id, size=32):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = 0.35 + 0.2 * rng.uniform()
    img = np.full((3, size, size), base)
    # ground texture: independent patches at two scales that cannot be
    # synthesized from context, plus a fine noise floor.  The strong 8px
    # patches stay worth coding at any importance; the faint 4px detail only
    # pays for itself at high importance.
    patch = rng.uniform(-1, 1, size=(3, size // 8, size // 8))
    img += 0.20 * np.repeat(np.repeat(patch, 8, axis=1), 8, axis=2)
    detail = rng.uniform(-1, 1, size=(3, size // 4, size // 4))
    img += 0.07 * np.repeat(np.repeat(detail, 4, axis=1), 4, axis=2)
    img += 0.02 * rng.uniform(-1, 1, size=(3, size, size))
    # jitter in 4px steps keeps the interior pattern phase-locked to the
    # 4px cell grid
    steps = size // 32
    cy = size / 2 + 4.0 * rng.integers(-steps, steps + 1)
    cx = size / 2 + 4.0 * rng.integers(-steps, steps + 1)
    r = size * rng.uniform(0.22, 0.34)
    if color_id == _FREE_COLOR:
        color = rng.uniform(0.25, 1.0, size=3)
    else:
        color = _COLORS[color_id] + rng.uniform(-0.08, 0.08, size=3)
    # every class uses the same disk envelope; the class is carried by the
    # interior pattern at an 8px period, so coarse statistics (occupancy,
    # mean color) say nothing about the label
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    img[:, mask] = color[:, None]
    rows = ((yy - cy) // 4) % 2 == 1
    cols = ((xx - cx) // 4) % 2 == 1
    if shape_id == 1:
        dark = mask & rows
    elif shape_id == 2:
        dark = mask & cols
    elif shape_id == 3:
        dark = mask & (rows ^ cols)
    else:
        dark = np.zeros_like(mask)
    img[:, dark] = (0.5 * color)[:, None]
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8 bits so disk round trips are exact
    return np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def synth_dataset(seed, n, classes, size=32):
    """Deterministic balanced dataset of colored shapes on textured ground."""
    if not 2 <= classes <= 16:
        raise TaskError(f"classes must be in [2, 16], got {classes}")
    if n < classes:
        raise TaskError(f"need at least one sample per class, got n={n}")
    if size % 16:
        raise TaskError(f"image size must be a multiple of 16, got {size}")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype="<U5")
    for i in range(n):
        label = i % classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        shape_id, color_id = class_attributes(label, classes)
        images[i] = _render_sample(rng, shape_id, color_id, size=size)
        labels[i] = label
        split[i] = "val" if zlib.crc32(f"{seed}:{i}".encode()) % 5 == 0 else "train"
    return SynthDataset(images=images, labels=labels, split=split, classes=classes, seed=seed)


def iter_batches(images, labels, batch_size, rng, shuffle=True):
    """Deterministic batch stream; order is a seeded permutation per epoch."""
    n = len(images)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(images[idx]), labels[idx]


# -- image and dataset files -----------------------------------------------------


def write_pnm(path, img):
    """Write a (3, H, W) float image as binary PPM, or (H, W) as PGM."""
    arr = np.asarray(img)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    if data.ndim == 3 and data.shape[0] == 3:
        head = f"P6\n{data.shape[2]} {data.shape[1]}\n255\n".encode()
        body = data.transpose(1, 2, 0).tobytes()
    elif data.ndim == 2:
        head = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode()
        body = data.tobytes()
    else:
        raise TaskError(f"cannot write image of shape {arr.shape}")
    path.write_bytes(head + body)


def read_pnm(path):
    """Read a binary PPM/PGM into float32 (3, H, W) or (H, W) in [0, 1]."""
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if len(fields) < 4:
        raise TaskError(f"malformed PNM header: {path}")
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    if maxval != 255:
        raise TaskError(f"only maxval 255 supported, got {maxval}: {path}")
    if magic == b"P6":
        need = w * h * 3
        raw = np.frombuffer(blob, dtype=np.uint8, offset=pos)
        if raw.size < need:
            raise TaskError(f"truncated PPM payload: {path}")
        return raw[:need].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
    if magic == b"P5":
        need = w * h
        raw = np.frombuffer(blob, dtype=np.uint8, offset=pos)
        if raw.size < need:
            raise TaskError(f"truncated PGM payload: {path}")
        return raw[:need].reshape(h, w).astype(np.float32) / 255.0
    raise TaskError(f"unsupported PNM magic {magic!r}: {path}")


def export_dataset(ds, root):
    """Write a SynthDataset as PPM files plus a labels.csv manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for i in range(len(ds.images)):
            name = f"{ds.split[i]}_{i:05d}.ppm"
            write_pnm(root / name, ds.images[i])
            writer.writerow([name, int(ds.labels[i])])


def load_dataset(root):
    """Load an exported dataset directory back into memory.

    A missing or unreadable image file is a per-file error naming the file;
    a malformed manifest aborts the load.
    """
    root = Path(root)
    manifest = root / "labels.csv"
    if not manifest.exists():
        raise TaskError(f"missing manifest: {manifest}")
    images, labels, names = [], [], []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise TaskError(f"malformed manifest header in {manifest}: {header}")
        for row in reader:
            if len(row) != 2:
                raise TaskError(f"malformed manifest row in {manifest}: {row}")
            fname, label = row
            fpath = root / fname
            if not fpath.exists():
                raise TaskError(f"manifest entry has no file: {fpath}")
            try:
                img = read_pnm(fpath)
            except OSError as exc:
                raise TaskError(f"unreadable image {fpath}: {exc}") from exc
            try:
                labels.append(int(label))
            except ValueError:
                raise TaskError(f"non-integer label {label!r} for {fname}") from None
            images.append(img)
            names.append(fname)
    if not images:
        raise TaskError(f"empty dataset at {root}")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise TaskError(f"inconsistent image shapes in {root}: {shapes}")
    split = np.array(["val" if n.startswith("val") else "train" for n in names])
    return (np.stack(images).astype(np.float32),
            np.asarray(labels, dtype=np.int64),
            split)
