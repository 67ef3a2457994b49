"""Shared fixtures and the on-disk artifact cache.

Pretraining the backbone and training the codecs takes minutes, so every
expensive artifact is built once under tests/_cache, keyed by a digest of
its build recipe, and later sessions just load it.  Each artifact carries a
sidecar meta file recording the wall time of the original build; the
acceptance tests count that time against their budgets even on cache hits.
Delete tests/_cache to force a full rebuild.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from picm.codec import TrainCodecConfig, train_codec
from picm.diffcore.tensor import Tensor
from picm.pipeline import (
    TransferConfig,
    load_backbone,
    load_codec,
    load_transfer_run,
    pretrain_backbone,
    save_backbone,
    save_codec,
    transfer_train,
)
from picm.tasks import synth_dataset

CACHE_DIR = Path(__file__).resolve().parent / "_cache"

# one dataset, one backbone and one codec shared by the whole suite
DATASET64 = dict(seed=3, n=1200, classes=4, size=64)
HOLDOUT64 = dict(seed=77, n=24, classes=4, size=64)
PRETRAIN64 = dict(dataset=DATASET64, seed=0, steps=4000, lr=1e-3,
                  batch_size=16, target_acc=0.96, eval_every=100)
CODEC64 = dict(pretrain=PRETRAIN64, steps=16000, batch_size=8, seed=0)

# synthetic gaussian bank whose per-channel variances ladder across the
# price-in window of the lambda range, for the rate-control criteria
LADDER = dict(n=256, channels=3, size=24, var_lo=0.05, var_hi=1.0,
              feature_seed=(11, 0xFEA7), steps=12000, batch_size=8, train_seed=0)

SELECTOR_ALPHAS = (1.0, 4.0, 16.0)
MANUAL_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


def cache_path(name, recipe, suffix=""):
    digest = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:10]
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / f"{name}-{digest}{suffix}"


def cache_meta(path):
    """Build metadata (wall time, run stats) recorded next to an artifact."""
    return json.loads(Path(f"{path}.meta.json").read_text())


def _write_meta(path, meta):
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")


@pytest.fixture(scope="session")
def dataset64():
    return synth_dataset(**DATASET64)


@pytest.fixture(scope="session")
def holdout64():
    return synth_dataset(**HOLDOUT64)


@pytest.fixture(scope="session")
def backbone64(dataset64):
    path = cache_path("backbone64", PRETRAIN64, ".pick")
    if not path.exists():
        t0 = time.time()
        kwargs = {k: v for k, v in PRETRAIN64.items() if k != "dataset"}
        backbone, _, log = pretrain_backbone(dataset64, **kwargs)
        save_backbone(path, backbone)
        _write_meta(path, {
            "wall_time_s": round(time.time() - t0, 3),
            "val_accuracy": log[-1].get("val_accuracy"),
            "steps_run": log[-1]["step"] + 1,
        })
    return load_backbone(path)


@pytest.fixture(scope="session")
def features64(backbone64, dataset64):
    path = cache_path("features64", PRETRAIN64, ".npy")
    if not path.exists():
        images, _ = dataset64.subset("train")
        chunks = []
        for start in range(0, len(images), 16):
            f = backbone64.extract_general(Tensor(images[start:start + 16]))
            chunks.append(np.asarray(f.data, dtype=np.float32))
        np.save(path, np.concatenate(chunks))
    return np.load(path)


@pytest.fixture(scope="session")
def codec64(features64):
    path = cache_path("codec64", CODEC64, ".pick")
    if not path.exists():
        t0 = time.time()
        cfg = TrainCodecConfig(steps=CODEC64["steps"],
                               batch_size=CODEC64["batch_size"],
                               seed=CODEC64["seed"])
        result = train_codec(features64, cfg)
        if result.aborted:
            raise RuntimeError(f"codec training aborted: {result.log[-1]}")
        save_codec(path, result.model)
        _write_meta(path, {"wall_time_s": round(time.time() - t0, 3)})
    return load_codec(path)


def ladder_bank(n, stream=0):
    """iid gaussian features with per-channel variances spanning the ladder.

    stream 0 is the training bank; higher streams give disjoint eval banks.
    """
    base, salt = LADDER["feature_seed"]
    rng = np.random.default_rng(np.random.SeedSequence([base, salt + stream]))
    v = np.geomspace(LADDER["var_lo"], LADDER["var_hi"], LADDER["channels"]).astype(np.float32)
    x = rng.standard_normal((n, LADDER["channels"], LADDER["size"], LADDER["size"]))
    return x.astype(np.float32) * np.sqrt(v)[None, :, None, None]


@pytest.fixture(scope="session")
def ladder_codec():
    path = cache_path("ladder_codec", LADDER, ".pick")
    if not path.exists():
        t0 = time.time()
        cfg = TrainCodecConfig(steps=LADDER["steps"],
                               batch_size=LADDER["batch_size"],
                               seed=LADDER["train_seed"])
        result = train_codec(ladder_bank(LADDER["n"]), cfg)
        if result.aborted:
            raise RuntimeError(f"ladder codec training aborted: {result.log[-1]}")
        save_codec(path, result.model)
        _write_meta(path, {"wall_time_s": round(time.time() - t0, 3)})
    return load_codec(path)


def _build_or_load_run(name, recipe, cfg, codec, backbone, dataset):
    run_dir = cache_path(name, recipe, ".run")
    if not (run_dir / "manifest.json").exists():
        t0 = time.time()
        transfer_train(cfg, codec, backbone, dataset, out_dir=run_dir)
        _write_meta(run_dir, {"wall_time_s": round(time.time() - t0, 3)})
    return load_transfer_run(run_dir, backbone, codec)


@pytest.fixture(scope="session")
def selector_runs(backbone64, codec64, dataset64):
    """One trained selector run per rate weight, keyed by alpha."""
    runs = {}
    for alpha in SELECTOR_ALPHAS:
        recipe = dict(codec=CODEC64, kind="selector", alpha=alpha, steps=400, seed=0)
        cfg = TransferConfig(alpha=alpha, selector="multi", seed=0)
        runs[alpha] = _build_or_load_run(f"selector-a{alpha:g}", recipe, cfg,
                                         codec64, backbone64, dataset64)
    return runs


@pytest.fixture(scope="session")
def manual_run(backbone64, codec64, dataset64):
    """One trained manual-map run; sweeps walk it along the uniform levels."""
    recipe = dict(codec=CODEC64, kind="manual", alpha=4.0, steps=400, seed=0)
    cfg = TransferConfig(alpha=4.0, selector="manual", manual_level=0.5, seed=0)
    return _build_or_load_run("manual", recipe, cfg, codec64, backbone64, dataset64)


def run_wall_time(name, recipe):
    """Recorded build time of a cached run, for acceptance-budget accounting."""
    return cache_meta(cache_path(name, recipe, ".run"))["wall_time_s"]
