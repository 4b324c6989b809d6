"""Command-line interface: phantom generation, dictionary and classifier
training, classification, evaluation, and filter export.

Configuration is layered (built-in defaults <- config file <- flags) with
unknown keys rejected, and the fully resolved configuration is echoed into
every produced checkpoint and report. Exit codes: 0 success, 1 runtime
error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import classifier as clf_mod
from . import dictionary as dict_mod
from . import io_formats, phantom, pipeline
from .errors import ConfigError, PlcaError
from .lca import LcaConfig

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    # phantom generation
    "phantom.frames": 60,
    "phantom.height": 256,
    "phantom.width": 384,
    "phantom.band_sigma": 3.0,
    "phantom.speckle_density": 0.10,
    "phantom.noise_sigma": 0.015,
    # sparse-coding profile used for training encodes
    "lca.lambda": 0.05,
    "lca.inner_steps": 300,
    "lca.membrane_lr": 0.01,
    "lca.optimizer": "adam",
    "lca.threshold_mode": "soft",
    "lca.stride_t": 1,
    "lca.stride_h": 1,
    "lca.stride_w": 1,
    # faster profile used at inference time
    "infer.lambda": 0.05,
    "infer.inner_steps": 150,
    "infer.membrane_lr": 0.01,
    "infer.optimizer": "adam",
    "infer.threshold_mode": "soft",
    "infer.stride_t": 1,
    "infer.stride_h": 2,
    "infer.stride_w": 2,
    # dictionary learning
    "dict.filters": 48,
    "dict.depth": 5,
    "dict.height": 15,
    "dict.width": 15,
    "dict.filter_lr": 3e-3,
    "dict.epochs": 100,
    "dict.batch_size": 32,
    "dict.clips_per_video": 4,
    # classifier training
    "clf.lr": 5e-4,
    "clf.epochs": 25,
    "clf.batch_size": 32,
    "clf.dropout_rate": 0.5,
    "clf.augment": True,
    "clf.augment_copies": 2,
    "clf.clips_per_video": 4,
    # video pipeline
    "pipeline.num_clips": 4,
    "pipeline.crop_h": 100,
    "pipeline.crop_w": 200,
    "pipeline.roi_band_height": 12,
    "pipeline.roi_box_height": 40,
    "pipeline.roi_smooth": 5,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None
    return raw


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            out[key] = _coerce(key, value.strip())
    return out


def resolve_config(args) -> dict:
    """defaults <- config file <- repeated --set flags <- dedicated flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(_read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value.strip())
    for flag, key in getattr(args, "_flag_map", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    elif os.environ.get("PLCA_THREADS"):
        try:
            cfg["threads"] = int(os.environ["PLCA_THREADS"])
        except ValueError:
            raise ConfigError(
                f"PLCA_THREADS must be an int, got "
                f"{os.environ['PLCA_THREADS']!r}") from None
    return cfg


def _echo(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(cfg)}


def _lca_config(cfg: dict, prefix: str) -> LcaConfig:
    return LcaConfig(
        lam=cfg[f"{prefix}.lambda"],
        inner_steps=cfg[f"{prefix}.inner_steps"],
        membrane_lr=cfg[f"{prefix}.membrane_lr"],
        optimizer=cfg[f"{prefix}.optimizer"],
        threshold_mode=cfg[f"{prefix}.threshold_mode"],
        strides=(cfg[f"{prefix}.stride_t"], cfg[f"{prefix}.stride_h"],
                 cfg[f"{prefix}.stride_w"]),
    )


def _pipeline_config(cfg: dict, lca_profile: str = "infer") -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        num_clips=cfg["pipeline.num_clips"],
        crop_h=cfg["pipeline.crop_h"],
        crop_w=cfg["pipeline.crop_w"],
        roi_band_height=cfg["pipeline.roi_band_height"],
        roi_box_height=cfg["pipeline.roi_box_height"],
        roi_smooth=cfg["pipeline.roi_smooth"],
        lca=_lca_config(cfg, lca_profile),
        threads=cfg["threads"],
    )


def _phantom_base(cfg: dict) -> phantom.PhantomSpec:
    return phantom.PhantomSpec(
        T=cfg["phantom.frames"], H=cfg["phantom.height"], W=cfg["phantom.width"],
        band_sigma=cfg["phantom.band_sigma"],
        speckle_density=cfg["phantom.speckle_density"],
        noise_sigma=cfg["phantom.noise_sigma"])


def _load_video(manifest: io_formats.DatasetManifest,
                entry: io_formats.ManifestEntry) -> pipeline.VideoTensor:
    path = os.path.join(manifest.base_dir, entry.path)
    frames = io_formats.read_tensor(path)
    stem = os.path.splitext(os.path.basename(entry.path))[0]
    return pipeline.VideoTensor(frames=frames, source_id=stem)


def _entry_boxes(entry: io_formats.ManifestEntry):
    if not entry.boxes:
        return None
    return {f: pipeline.BoundingBox(*xywh) for f, xywh in entry.boxes.items()}


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_phantom(args) -> int:
    cfg = resolve_config(args)
    if args.pos < 1 or args.neg < 1:
        raise ConfigError(f"--pos and --neg must be >= 1, got {args.pos}, {args.neg}")
    base = _phantom_base(cfg)
    manifests = [phantom.generate_dataset(
        args.pos, args.neg, args.out, seed=cfg["seed"], base=base,
        split=args.split, emit_boxes=args.emit_boxes,
        box_height=cfg["pipeline.roi_box_height"], write_manifest_file=False)]
    if args.eval_pos or args.eval_neg:
        if args.eval_pos < 1 or args.eval_neg < 1:
            raise ConfigError("--eval-pos and --eval-neg must both be >= 1 "
                              "when either is given")
        manifests.append(phantom.generate_dataset(
            args.eval_pos, args.eval_neg, args.out, seed=cfg["seed"] + 1,
            base=base, split="eval", emit_boxes=args.emit_boxes,
            box_height=cfg["pipeline.roi_box_height"], write_manifest_file=False))
    entries = [e for m in manifests for e in m.entries]
    comments = [f"config {k}={v}" for k, v in _echo(cfg).items()]
    io_formats.write_manifest(os.path.join(args.out, "manifest.txt"),
                              io_formats.DatasetManifest(entries, args.out),
                              header_comments=comments)
    n_pos = sum(1 for e in entries if e.label == 0)
    n_neg = len(entries) - n_pos
    print(f"wrote {len(entries)} videos ({n_pos} positive / {n_neg} negative) "
          f"to {args.out}")
    return 0


def _train_clips(manifest, entries, pcfg, clips_per_video):
    clips = []
    labels = []
    for entry in entries:
        video = _load_video(manifest, entry)
        for clip in pipeline.prepare_clips(video, pcfg, clips_per_video,
                                           external_boxes=_entry_boxes(entry)):
            clips.append(clip.astype(np.float32))
            labels.append(entry.label)
    return clips, labels


def cmd_train_dict(args) -> int:
    cfg = resolve_config(args)
    manifest = io_formats.read_manifest(args.data)
    entries = manifest.for_split("train")
    if not entries:
        raise PlcaError(f"{args.data}: no train-split entries")
    pcfg = _pipeline_config(cfg, lca_profile="lca")
    clips, _ = _train_clips(manifest, entries, pcfg, cfg["dict.clips_per_video"])

    init = dict_mod.init_dictionary(
        cfg["dict.filters"], cfg["dict.depth"], cfg["dict.height"],
        cfg["dict.width"], seed=cfg["seed"], dtype=np.float32)
    dcfg = dict_mod.DictLearnConfig(
        filter_lr=cfg["dict.filter_lr"], epochs=cfg["dict.epochs"],
        batch_size=cfg["dict.batch_size"], lca=_lca_config(cfg, "lca"),
        seed=cfg["seed"])
    learned, metrics = dict_mod.learn(clips, init, dcfg, threads=cfg["threads"])
    learned.config_echo = _echo(cfg)
    io_formats.save_checkpoint(args.out, learned)

    log_path = args.metrics_log or (args.out + ".metrics.txt")
    with open(log_path, "w", newline="\n") as fh:
        for m in metrics:
            fh.write(f"epoch={m['epoch']} mse={m['mse']:.8f} "
                     f"sparsity={m['sparsity']:.6f}\n")
    print(f"trained dictionary on {len(clips)} clips for {dcfg.epochs} epochs "
          f"-> {args.out}")
    return 0


def cmd_train_clf(args) -> int:
    cfg = resolve_config(args)
    manifest = io_formats.read_manifest(args.data)
    entries = manifest.for_split("train")
    if not entries:
        raise PlcaError(f"{args.data}: no train-split entries")

    if args.max_pos is not None:
        pos = [e for e in entries if e.label == 0]
        neg = [e for e in entries if e.label != 0]
        if args.max_pos < len(pos):
            rng = np.random.default_rng(cfg["seed"])
            keep = set(rng.choice(len(pos), size=args.max_pos, replace=False))
            pos = [e for i, e in enumerate(pos) if i in keep]
        else:
            print(f"warning: --max-pos {args.max_pos} >= available positives "
                  f"({len(pos)}); using all", file=sys.stderr)
        entries = pos + neg
        if not pos or not neg:
            raise PlcaError("training split is single-class after --max-pos cap")

    dictionary = io_formats.load_checkpoint(args.dict)
    if not isinstance(dictionary, dict_mod.Dictionary):
        raise PlcaError(f"{args.dict}: not a dictionary checkpoint")
    pcfg = _pipeline_config(cfg, lca_profile="lca")
    clips, labels = _train_clips(manifest, entries, pcfg,
                                 cfg["clf.clips_per_video"])
    ccfg = clf_mod.ClfTrainConfig(
        lr=cfg["clf.lr"], epochs=cfg["clf.epochs"],
        batch_size=cfg["clf.batch_size"], dropout_rate=cfg["clf.dropout_rate"],
        seed=cfg["seed"], augment=cfg["clf.augment"],
        augment_copies=cfg["clf.augment_copies"])
    maps = pipeline.prepare_labeled_maps(
        list(zip(clips, labels)), dictionary, _lca_config(cfg, "lca"),
        augment=ccfg.augment, augment_copies=ccfg.augment_copies,
        seed=cfg["seed"], threads=cfg["threads"])
    params, metrics = clf_mod.train_classifier(maps, ccfg)
    io_formats.save_checkpoint(args.out, params, extra_meta=_echo(cfg))
    final = metrics[-1]
    print(f"trained classifier on {len(maps)} maps for {ccfg.epochs} epochs "
          f"(final loss {final['loss']:.4f}, accuracy {final['accuracy']:.3f}) "
          f"-> {args.out}")
    return 0


def _load_models(args):
    dictionary = io_formats.load_checkpoint(args.dict)
    if not isinstance(dictionary, dict_mod.Dictionary):
        raise PlcaError(f"{args.dict}: not a dictionary checkpoint")
    params = io_formats.load_checkpoint(args.clf)
    if not isinstance(params, clf_mod.ClassifierParams):
        raise PlcaError(f"{args.clf}: not a classifier checkpoint")
    return dictionary, params


def _read_boxes_file(path) -> dict:
    boxes = {}
    with open(path, "r") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise PlcaError(f"{path}:{line_no}: expected 'frame x y w h'")
            f, x, y, w, h = (int(p) for p in parts)
            boxes[f] = pipeline.BoundingBox(x=x, y=y, w=w, h=h)
    return boxes


def cmd_classify(args) -> int:
    cfg = resolve_config(args)
    dictionary, params = _load_models(args)
    pcfg = _pipeline_config(cfg)
    preds = []
    if args.video:
        frames = io_formats.read_tensor(args.video)
        stem = os.path.splitext(os.path.basename(args.video))[0]
        video = pipeline.VideoTensor(frames=frames, source_id=stem)
        boxes = _read_boxes_file(args.boxes) if args.boxes else None
        preds.append(pipeline.classify_video(video, dictionary, params, pcfg,
                                             external_boxes=boxes))
    else:
        manifest = io_formats.read_manifest(args.data)
        for entry in manifest.entries:
            video = _load_video(manifest, entry)
            preds.append(pipeline.classify_video(
                video, dictionary, params, pcfg,
                external_boxes=_entry_boxes(entry)))
    io_formats.write_results_csv(preds, args.out)
    print(f"classified {len(preds)} video(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    dictionary, params = _load_models(args)
    manifest = io_formats.read_manifest(args.data)
    train_groups = {e.group_id for e in manifest.for_split("train")}
    eval_entries = manifest.for_split("eval")
    if not eval_entries:
        raise PlcaError(f"{args.data}: no eval-split entries")
    overlap = train_groups & {e.group_id for e in eval_entries}
    if overlap:
        raise PlcaError(f"group(s) {sorted(overlap)} appear in both train and "
                        "eval splits")
    pcfg = _pipeline_config(cfg)
    report = pipeline.evaluate(eval_entries, dictionary, params, pcfg,
                               load_video=lambda e: _load_video(manifest, e))
    lines = ["# plca evaluation report"]
    lines += [f"# config {k}={v}" for k, v in _echo(cfg).items()]
    lines.append(f"accuracy {report.accuracy:.6f}")
    lines.append(f"macro_f1 {report.macro_f1:.6f}")
    for true_cls in (0, 1):
        for pred_cls in (0, 1):
            lines.append(f"confusion_{true_cls}{pred_cls} "
                         f"{int(report.confusion[true_cls, pred_cls])}")
    for r in report.records:
        lines.append(
            f"video {r['source_id']} group={r['group_id']} true={r['label']} "
            f"pred={r['predicted']} mean_probability="
            f"{r['mean_probability']:.6f} tie_broken="
            f"{'true' if r['tie_broken'] else 'false'}")
    with open(args.out, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"accuracy {report.accuracy:.4f}  macro_f1 {report.macro_f1:.4f} "
          f"-> {args.out}")
    return 0


def cmd_export_filters(args) -> int:
    dictionary = io_formats.load_checkpoint(args.dict)
    if not isinstance(dictionary, dict_mod.Dictionary):
        raise PlcaError(f"{args.dict}: not a dictionary checkpoint")
    paths = io_formats.export_filter_grid(dictionary, args.out)
    print(f"wrote {len(paths)} filter image(s): {', '.join(paths)}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p):
    p.add_argument("--config", help="layered config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default 1; PLCA_THREADS as fallback)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plca",
        description="Sparse-coding pleural-line video classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate a labeled phantom dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pos", type=int, required=True,
                   help="number of no-movement (label 0) videos")
    p.add_argument("--neg", type=int, required=True,
                   help="number of movement (label 1) videos")
    p.add_argument("--split", default="train")
    p.add_argument("--eval-pos", type=int, default=0)
    p.add_argument("--eval-neg", type=int, default=0)
    p.add_argument("--emit-boxes", action="store_true",
                   help="write ground-truth band boxes into the manifest")
    p.set_defaults(func=cmd_gen_phantom, _flag_map={})

    p = sub.add_parser("train-dict", help="learn a sparse-coding dictionary")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--filter-lr", type=float, default=None, dest="filter_lr")
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--inner-steps", type=int, default=None, dest="inner_steps")
    p.add_argument("--metrics-log", default=None)
    p.set_defaults(func=cmd_train_dict, _flag_map={
        "epochs": "dict.epochs", "filter_lr": "dict.filter_lr",
        "lam": "lca.lambda", "inner_steps": "lca.inner_steps"})

    p = sub.add_parser("train-clf", help="train the clip classifier")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--dict", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--max-pos", type=int, default=None,
                   help="cap the number of labeled positive (label 0) videos")
    p.set_defaults(func=cmd_train_clf, _flag_map={})

    p = sub.add_parser("classify", help="classify videos into a results CSV")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--video", metavar="FILE")
    src.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--dict", required=True, metavar="CKPT")
    p.add_argument("--clf", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--boxes", metavar="FILE",
                   help="override ROI detection (lines: frame x y w h)")
    p.set_defaults(func=cmd_classify, _flag_map={})

    p = sub.add_parser("eval", help="evaluate on the manifest's eval split")
    _add_common(p)
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--dict", required=True, metavar="CKPT")
    p.add_argument("--clf", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="REPORT")
    p.set_defaults(func=cmd_eval, _flag_map={})

    p = sub.add_parser("export-filters", help="export filter grids as PGM images")
    _add_common(p)
    p.add_argument("--dict", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="PREFIX")
    p.set_defaults(func=cmd_export_filters, _flag_map={})

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except PlcaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
