"""Command-line front end.

Every subcommand is thin plumbing around a library call: validate flags,
load artifacts, run, write `--out`, and drop a JSON run manifest next to
the output.  Exit code 2 means the invocation was malformed, 1 means the
run itself failed.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .coder import Bitstream, CoderError, StreamError
from .codec import CodecError, TrainCodecConfig, compress, decompress, train_codec
from .diffcore.checkpoint import CheckpointError, load_pick
from .pipeline import (
    PipelineError,
    TransferConfig,
    UsageError,
    load_backbone,
    load_codec,
    load_transfer_run,
    pretrain_backbone,
    rd_sweep,
    read_rd_csv,
    run_manifest,
    save_backbone,
    save_codec,
    transfer_train,
)
from .prompts import MAP_KINDS, PromptError, PromptSpec, gen_manual_map, uniform_map
from .ptns import TensorFileError, load_ptns, save_ptns
from .tasks import TaskError, load_dataset, synth_dataset

# argparse failures and these exception types are the caller's fault
_USAGE_EXC = (UsageError, PromptError, TaskError, CodecError, CoderError)


def _write_manifest(out_path, kind, config, seed, t0, extra=None):
    manifest = run_manifest(kind, config, seed)
    manifest["wall_time_s"] = round(time.time() - t0, 3)
    if extra:
        manifest.update(extra)
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _add_data_flags(sub):
    sub.add_argument("--data", help="exported dataset directory; omit to synthesize")
    sub.add_argument("--data-seed", type=int, default=0, help="synthetic dataset seed")
    sub.add_argument("--samples", type=int, default=256, help="synthetic sample count")
    sub.add_argument("--classes", type=int, default=4, help="synthetic class count")
    sub.add_argument("--image-size", type=int, default=64, help="synthetic image size")


def _resolve_dataset(args):
    if args.data:
        return load_dataset(args.data)
    return synth_dataset(seed=args.data_seed, n=args.samples,
                         classes=args.classes, size=args.image_size)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_map(args):
    t0 = time.time()
    if args.kind == "uniform" and args.level is not None:
        m = uniform_map(args.level, args.h, args.w)
    else:
        rng = np.random.default_rng(args.seed)
        m = gen_manual_map(args.kind, args.h, args.w, rng)
    save_ptns(args.out, m)
    _write_manifest(args.out, "gen-map",
                    {"kind": args.kind, "h": args.h, "w": args.w, "level": args.level},
                    args.seed, t0)
    print(args.out)
    return 0


def cmd_pretrain_backbone(args):
    t0 = time.time()
    ds = _resolve_dataset(args)
    backbone, head, log = pretrain_backbone(
        ds, seed=args.seed, steps=args.steps, lr=args.lr,
        batch_size=args.batch_size, target_acc=args.target_acc)
    save_backbone(args.out, backbone)
    accs = [e["val_accuracy"] for e in log if "val_accuracy" in e]
    _write_manifest(args.out, "pretrain-backbone", {
        "steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
        "target_acc": args.target_acc, "dataset_seed": ds.seed,
    }, args.seed, t0, extra={"steps_run": len(log),
                             "val_accuracy": accs[-1] if accs else None})
    print(json.dumps({"out": args.out, "steps_run": len(log),
                      "val_accuracy": accs[-1] if accs else None}))
    return 0


def _extract_features(backbone, images, batch_size=16):
    chunks = []
    for start in range(0, len(images), batch_size):
        f = backbone.extract_general(images[start:start + batch_size])
        chunks.append(np.asarray(f.data, dtype=np.float32))
    return np.concatenate(chunks, axis=0)


def cmd_train_codec(args):
    t0 = time.time()
    backbone = load_backbone(args.backbone)
    ds = _resolve_dataset(args)
    features = _extract_features(backbone, ds.subset("train")[0])
    cfg = TrainCodecConfig(steps=args.steps, batch_size=args.batch_size,
                           lr=args.lr, seed=args.seed)
    result = train_codec(features, cfg)
    if result.aborted:
        raise PipelineError("codec training aborted on non-finite loss; "
                            f"trailing log: {result.log[-3:]}")
    save_codec(args.out, result.model)
    tail = [e for e in result.log if "loss" in e][-200:]
    summary = {
        "rate_bits": round(float(np.mean([e["rate_bits"] for e in tail])), 2),
        "mse": round(float(np.mean([e["mse"] for e in tail])), 6),
    }
    _write_manifest(args.out, "train-codec", {
        "steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
        "dataset_seed": ds.seed, "feature_shape": list(features.shape),
    }, args.seed, t0, extra={"tail": summary})
    print(json.dumps({"out": args.out, **summary}))
    return 0


def cmd_transfer(args):
    ds = _resolve_dataset(args)
    backbone = load_backbone(args.backbone)
    codec = load_codec(args.codec)
    cfg = TransferConfig(
        alpha=args.alpha, steps=args.steps, batch_size=args.batch_size,
        lr=args.lr, weight_decay=args.weight_decay,
        prompt=PromptSpec(variant=args.prompt_variant, length=args.prompt_length),
        selector=args.selector, manual_level=args.manual_level,
        classes=ds.classes, seed=args.seed)
    result = transfer_train(cfg, codec, backbone, ds, out_dir=args.out)
    print(json.dumps({"out": args.out, "bpp": result.eval.bpp,
                      "accuracy": result.eval.accuracy,
                      "trainable_ratio": result.partition.ratio}))
    return 0


def _compress_map(args, codec, feature):
    gh, gw = codec.latent_grid(feature.shape[1:])
    sources = [s for s in ("map_file", "map_kind", "selector") if getattr(args, s)]
    if len(sources) != 1:
        raise UsageError("need exactly one of --map-file, --map-kind, --selector")
    if args.map_file:
        m = load_ptns(args.map_file)
        return np.asarray(m, dtype=np.float32)
    if args.map_kind:
        if args.map_kind == "uniform":
            return uniform_map(args.map_level, gh, gw)
        rng = np.random.default_rng(args.map_seed)
        return gen_manual_map(args.map_kind, gh, gw, rng)
    if not args.backbone:
        raise UsageError("--selector needs --backbone to rebuild the run")
    backbone = load_backbone(args.backbone)
    run = load_transfer_run(args.selector, backbone, codec)
    from .diffcore.tensor import Tensor
    m = run.pipeline.importance_map(Tensor(feature[None]))
    return np.asarray(m.data[0, 0], dtype=np.float32)


def cmd_compress(args):
    t0 = time.time()
    codec = load_codec(args.ckpt)
    feature = np.asarray(load_ptns(args.input), dtype=np.float32)
    if feature.ndim != 3:
        raise UsageError(f"feature tensor must be (C, H, W), got {feature.shape}")
    m = _compress_map(args, codec, feature)
    stream = compress(feature, m, codec)
    blob = stream.tobytes()
    Path(args.out).write_bytes(blob)
    _write_manifest(args.out, "compress", {
        "ckpt": args.ckpt, "input": args.input, "map_kind": args.map_kind,
        "map_level": args.map_level, "map_file": args.map_file,
        "selector": args.selector,
    }, args.map_seed, t0, extra={"bytes": len(blob), "bits": 8 * len(blob)})
    print(json.dumps({"out": args.out, "bytes": len(blob)}))
    return 0


def cmd_decompress(args):
    t0 = time.time()
    codec = load_codec(args.ckpt)
    blob = Path(args.in_).read_bytes()
    f_hat = decompress(blob, codec)
    save_ptns(args.out, f_hat)
    _write_manifest(args.out, "decompress", {"ckpt": args.ckpt, "in": args.in_},
                    0, t0, extra={"feature_shape": list(f_hat.shape)})
    print(args.out)
    return 0


def _parse_levels(raw):
    try:
        levels = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"levels must be comma-separated numbers, got {raw!r}") from None
    if not levels:
        raise UsageError("no levels given")
    return levels


def cmd_eval_rd(args):
    t0 = time.time()
    levels = _parse_levels(args.levels)
    backbone = load_backbone(args.backbone)
    codec = load_codec(args.codec)
    ds = _resolve_dataset(args)
    images, labels = ds.subset("val")
    if args.mode == "manual-uniform":
        if len(args.run) != 1 or "=" in args.run[0]:
            raise UsageError("manual-uniform mode takes exactly one --run DIR")
        runs = load_transfer_run(args.run[0], backbone, codec)
    else:
        runs = {}
        for spec in args.run:
            alpha, sep, path = spec.partition("=")
            if not sep:
                raise UsageError(f"selector mode runs are ALPHA=DIR, got {spec!r}")
            runs[float(alpha)] = load_transfer_run(path, backbone, codec)
    points = rd_sweep(args.mode, levels, images, labels, runs, csv_path=args.csv)
    _write_manifest(args.csv, "eval-rd", {
        "mode": args.mode, "levels": levels, "runs": list(args.run),
    }, ds.seed, t0, extra={"points": len(points)})
    for p in points:
        print(f"{p.mode} level={p.level:g} bpp={p.bpp:.4f} metric={p.metric:.4f}")
    return 0


def _inspect_payload(path):
    path = Path(path)
    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.exists():
            raise UsageError(f"{path} is not a run directory (no manifest.json)")
        return json.loads(manifest.read_text())
    suffix = path.suffix.lower()
    if suffix == ".picm":
        s = Bitstream.frombytes(path.read_bytes())
        return {
            "format": "picm", "feature_dims": list(s.feature_dims),
            "y_dims": list(s.y_dims), "z_dims": list(s.z_dims),
            "lambda_tag": s.lambda_tag, "z_bytes": len(s.z_bytes),
            "y_bytes": len(s.y_bytes), "crc": s.crc,
        }
    if suffix == ".ptns":
        arr = load_ptns(path)
        return {
            "format": "ptns", "shape": list(arr.shape), "dtype": str(arr.dtype),
            "min": float(arr.min()), "max": float(arr.max()),
            "mean": float(arr.mean()),
        }
    if suffix == ".pick":
        arrays = load_pick(path)
        return {
            "format": "pick", "arrays": len(arrays),
            "parameters": int(sum(int(np.prod(a.shape)) for a in arrays.values())),
            "keys": sorted(arrays)[:12],
        }
    if suffix == ".csv":
        points = read_rd_csv(path)
        return {"format": "rd-csv", "rows": len(points),
                "bpp": [round(p.bpp, 6) for p in points],
                "metric": [round(p.metric, 6) for p in points]}
    if suffix == ".json":
        return json.loads(path.read_text())
    raise UsageError(f"don't know how to inspect {path.name!r}")


def cmd_inspect(args):
    print(json.dumps(_inspect_payload(args.path), indent=2, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="picm",
        description="content-weighted variable-rate feature compression "
                    "with prompt-driven bit allocation")
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("gen-map", help="write a manual importance map as PTNS")
    p.add_argument("--kind", required=True, choices=MAP_KINDS)
    p.add_argument("--h", type=int, required=True, help="map height (latent grid)")
    p.add_argument("--w", type=int, required=True, help="map width (latent grid)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, help="fixed value for --kind uniform")
    p.add_argument("--out", default="map.ptns")
    p.set_defaults(func=cmd_gen_map)

    p = subs.add_parser("pretrain-backbone", help="supervised backbone pretraining")
    _add_data_flags(p)
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--target-acc", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="backbone.pick")
    p.set_defaults(func=cmd_pretrain_backbone)

    p = subs.add_parser("train-codec", help="rate-distortion training of the codec")
    _add_data_flags(p)
    p.add_argument("--backbone", required=True, help="frozen feature extractor")
    p.add_argument("--steps", type=int, default=8000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="codec.pick")
    p.set_defaults(func=cmd_train_codec)

    p = subs.add_parser("transfer", help="train selector + prompts + head")
    _add_data_flags(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--selector", default="multi",
                   choices=("multi", "single", "manual"))
    p.add_argument("--manual-level", type=float, default=0.5)
    p.add_argument("--prompt-variant", default="token", choices=("token", "block"))
    p.add_argument("--prompt-length", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_transfer)

    p = subs.add_parser("compress", help="code one PTNS feature tensor to PICM")
    p.add_argument("--ckpt", required=True, help="codec checkpoint")
    p.add_argument("--input", required=True, help="feature tensor (PTNS)")
    p.add_argument("--map-file", help="importance map as PTNS")
    p.add_argument("--map-kind", choices=MAP_KINDS)
    p.add_argument("--map-level", type=float, default=0.5,
                   help="value for --map-kind uniform")
    p.add_argument("--map-seed", type=int, default=0)
    p.add_argument("--selector", help="transfer run directory with a trained selector")
    p.add_argument("--backbone", help="backbone checkpoint (with --selector)")
    p.add_argument("--out", default="stream.picm")
    p.set_defaults(func=cmd_compress)

    p = subs.add_parser("decompress", help="decode a PICM stream to PTNS")
    p.add_argument("--ckpt", required=True, help="codec checkpoint")
    p.add_argument("--in", "--input", dest="in_", required=True, help="PICM stream")
    p.add_argument("--out", default="feature.ptns")
    p.set_defaults(func=cmd_decompress)

    p = subs.add_parser("eval-rd", help="rate-distortion sweep over trained runs")
    _add_data_flags(p)
    p.add_argument("--mode", required=True, choices=("manual-uniform", "selector"))
    p.add_argument("--levels", required=True,
                   help="comma-separated map values or alphas")
    p.add_argument("--backbone", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--run", action="append", default=[],
                   help="run DIR (manual-uniform) or ALPHA=DIR (selector), repeatable")
    p.add_argument("--csv", default="rd.csv")
    p.set_defaults(func=cmd_eval_rd)

    p = subs.add_parser("inspect", help="summarize an artifact as JSON")
    p.add_argument("path", help="PICM/PTNS/pick/CSV file or run directory")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except _USAGE_EXC as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StreamError, TensorFileError, CheckpointError, PipelineError,
            OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
