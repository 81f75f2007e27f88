"""Command line pipeline: generate -> train-mtfe -> extract -> train-tcm ->
infer -> eval -> ribbon.

Every command resolves paths against --workdir, merges configuration as
defaults < --config file < --set overrides (< --seed/--mode shorthands),
writes its artifacts, and drops a manifest JSON recording the merged
config, the seed, and sha256 hashes of its inputs. Exit codes: 0 success,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import tensor as tz
from .backbone import BackboneConfig
from .config import build_config, parse_config_file, parse_set_args
from .data import (
    DirectoryFrameStore,
    EmbeddingStore,
    EmbeddingStoreWriter,
    PyramidSampleDataset,
    SyntheticSpec,
    WindowSampleDataset,
    extract_embeddings,
    generate_synthetic,
    load_annotations,
    save_annotations,
    save_frames,
    split_videos,
)
from .errors import ConfigError, DataError, NumericalError
from .metrics import evaluate_timelines
from .mtam import MtamConfig, MultiTermEncoder
from .ribbon import render_ribbon
from .sampler import ONLINE, PyramidSpec, build_pyramid, gather_frames
from .tcm import (
    ConsistencyEncoder,
    PhaseTimeline,
    TcmConfig,
    predict_offline,
    predict_online,
)
from .train import TrainConfig, fit_mtfe, fit_tcm, write_history_csv

MTFE_CKPT = "checkpoints/mtfe.ckpt"
TCM_CKPT = "checkpoints/tcm.ckpt"


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve(workdir, path):
    return os.path.normpath(path if os.path.isabs(path)
                            else os.path.join(workdir, path))


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _load_config(args):
    maps = []
    if args.config:
        maps.append(parse_config_file(_resolve(args.workdir, args.config)))
    maps.append(parse_set_args(args.set))
    shorthand = {}
    if args.seed is not None:
        shorthand["seed"] = str(args.seed)
    if args.mode is not None:
        shorthand["mode"] = args.mode
    maps.append(shorthand)
    return build_config(*maps)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, cfg, command, inputs, outputs):
    hashes = {}
    for path in inputs:
        if not os.path.exists(path):
            raise DataError(f"{command}: missing expected input {path}")
        hashes[os.path.relpath(path, args.workdir)] = _sha256(path)
    manifest = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "inputs": hashes,
        "outputs": sorted(os.path.relpath(p, args.workdir) for p in outputs),
    }
    path = _resolve(args.workdir, f"manifests/{command}.json")
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _pyramid_spec(cfg):
    return PyramidSpec.default(
        cfg.mode, fps=cfg.fps, stride_seconds=cfg.stride_seconds,
        frames_per_seq=cfg.resolved_frames_per_seq(),
    )


def _backbone_cfg(cfg):
    return BackboneConfig(
        embed_dim=cfg.embed_dim, depth=cfg.depth, heads=cfg.heads,
        temporal_pool=cfg.temporal_pool, patch_size=cfg.patch_size,
        frame_size=(cfg.frame_height, cfg.frame_width),
    )


def _require(path, what):
    if not os.path.exists(path):
        raise DataError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# checkpoint sidecars


def _save_mtfe(path, model, cfg, num_classes):
    _ensure_parent(path)
    tz.save_checkpoint(path, model.state())
    meta = {
        "kind": "mtfe",
        "mode": cfg.mode,
        "fps": cfg.fps,
        "num_scales": cfg.num_scales,
        "stride_seconds": list(cfg.stride_seconds),
        "frames_per_seq": model.frames_per_seq,
        "embed_dim": cfg.embed_dim,
        "depth": cfg.depth,
        "heads": cfg.heads,
        "temporal_pool": cfg.temporal_pool,
        "patch_size": cfg.patch_size,
        "frame_size": [cfg.frame_height, cfg.frame_width],
        "num_classes": num_classes,
    }
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_mtfe(path):
    """Rebuild a stage-one encoder from a checkpoint and its sidecar."""
    _require(path, "encoder checkpoint")
    try:
        with open(path + ".json") as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint sidecar: {path}.json") from None
    spec = PyramidSpec.default(
        meta["mode"], fps=meta["fps"], stride_seconds=tuple(meta["stride_seconds"]),
        frames_per_seq=meta["frames_per_seq"],
    )
    backbone_cfg = BackboneConfig(
        embed_dim=meta["embed_dim"], depth=meta["depth"], heads=meta["heads"],
        temporal_pool=meta["temporal_pool"], patch_size=meta["patch_size"],
        frame_size=tuple(meta["frame_size"]),
    )
    mtam_cfg = MtamConfig(
        num_scales=meta["num_scales"], embed_dim=meta["embed_dim"],
        num_classes=meta["num_classes"],
    )
    model = MultiTermEncoder(backbone_cfg, mtam_cfg, meta["frames_per_seq"])
    model.load_state(tz.load_checkpoint(path))
    return model, spec, meta


def _save_tcm(path, encoder, window_length, overlap, cfg):
    _ensure_parent(path)
    tz.save_checkpoint(path, encoder.state())
    meta = {
        "kind": "tcm",
        "mode": cfg.mode,
        "fps": cfg.fps,
        "model_dim": encoder.cfg.model_dim,
        "num_classes": encoder.cfg.num_classes,
        "depth": encoder.cfg.depth,
        "heads": encoder.cfg.heads,
        "ff_mult": encoder.cfg.ff_mult,
        "window_length": window_length,
        "overlap": overlap,
    }
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_tcm(path):
    """Rebuild a consistency encoder from a checkpoint and its sidecar."""
    _require(path, "consistency checkpoint")
    try:
        with open(path + ".json") as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint sidecar: {path}.json") from None
    cfg = TcmConfig(
        model_dim=meta["model_dim"], num_classes=meta["num_classes"],
        depth=meta["depth"], heads=meta["heads"], ff_mult=meta["ff_mult"],
    )
    encoder = ConsistencyEncoder(cfg)
    encoder.load_state(tz.load_checkpoint(path))
    return encoder, meta


# ---------------------------------------------------------------------------
# split helpers


def _select_videos(args, labels):
    ids = sorted(labels)
    if getattr(args, "videos", None):
        chosen = [v for v in args.videos.split(",") if v]
        for vid in chosen:
            if vid not in labels:
                raise DataError(f"video {vid!r} not in annotations")
        return chosen
    split = getattr(args, "split", "all")
    if split == "all":
        return ids
    train, heldout = split_videos(ids, args_num_heldout(args))
    return train if split == "train" else heldout


def args_num_heldout(args):
    return args.cfg.num_heldout


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    cfg = args.cfg
    spec = SyntheticSpec(
        num_videos=cfg.num_videos, frames_per_video=cfg.frames_per_video,
        num_phases=cfg.num_phases, min_segment=cfg.min_segment,
        max_segment=cfg.max_segment, noise_std=cfg.noise_std,
        frame_size=(cfg.frame_height, cfg.frame_width), fps=cfg.fps,
        seed=cfg.seed,
    )
    videos, labels = generate_synthetic(spec)
    out_root = _resolve(args.workdir, args.out)
    frames_dir = os.path.join(out_root, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    save_frames(videos, frames_dir)
    ann_path = os.path.join(out_root, "annotations.csv")
    save_annotations(ann_path, labels)
    print(f"wrote {len(videos)} videos under {frames_dir} and {ann_path}")
    _write_manifest(args, cfg, "generate", [], [frames_dir, ann_path])
    return 0


def cmd_train_mtfe(args):
    cfg = args.cfg
    frames_dir = _require(_resolve(args.workdir, args.frames), "frames directory")
    ann_path = _require(_resolve(args.workdir, args.annotations), "annotations")
    labels = load_annotations(ann_path, cfg.num_phases)
    store = DirectoryFrameStore(frames_dir)
    train_ids, _ = split_videos(sorted(labels), cfg.num_heldout)
    spec = _pyramid_spec(cfg)
    dataset = PyramidSampleDataset(store, labels, spec,
                                   keyframe_stride=cfg.keyframe_stride,
                                   video_ids=train_ids)
    model = MultiTermEncoder(
        _backbone_cfg(cfg),
        MtamConfig(num_scales=cfg.num_scales, embed_dim=cfg.embed_dim,
                   num_classes=cfg.num_phases),
        spec.frames_per_seq, seed=cfg.seed,
    )
    train_cfg = TrainConfig(
        lr0=cfg.lr0, weight_decay=cfg.weight_decay, epochs=cfg.mtfe_epochs,
        batch_size=cfg.batch_size, seed=cfg.seed, mode=cfg.mode,
        dropout=cfg.dropout,
    )
    history = fit_mtfe(dataset, train_cfg, model)
    ckpt = _resolve(args.workdir, args.checkpoint)
    _save_mtfe(ckpt, model, cfg, cfg.num_phases)
    hist_path = _resolve(args.workdir, args.history)
    _ensure_parent(hist_path)
    write_history_csv(history, hist_path)
    if history:
        print(f"trained encoder on {len(dataset)} samples from "
              f"{len(train_ids)} videos; final loss {history[-1].loss:.6f}")
    print(f"checkpoint {ckpt}")
    _write_manifest(args, cfg, "train-mtfe", [ann_path],
                    [ckpt, ckpt + ".json", hist_path])
    return 0


def cmd_extract(args):
    cfg = args.cfg
    frames_dir = _require(_resolve(args.workdir, args.frames), "frames directory")
    ckpt = _resolve(args.workdir, args.checkpoint)
    model, spec, _ = load_mtfe(ckpt)
    store = DirectoryFrameStore(frames_dir)
    ids = None
    if args.videos:
        ids = [v for v in args.videos.split(",") if v]
    embeddings = extract_embeddings(model, store, spec, video_ids=ids)
    out_path = _resolve(args.workdir, args.out)
    _ensure_parent(out_path)
    with EmbeddingStoreWriter(out_path, model.mtam_cfg.fused_dim) as writer:
        for vid in sorted(embeddings):
            writer.add_video(vid, embeddings[vid])
    total = sum(e.shape[0] for e in embeddings.values())
    print(f"extracted {total} embeddings for {len(embeddings)} videos -> {out_path}")
    _write_manifest(args, cfg, "extract", [ckpt, ckpt + ".json"],
                    [out_path, out_path + ".index.json"])
    return 0


def cmd_train_tcm(args):
    cfg = args.cfg
    emb_path = _require(_resolve(args.workdir, args.embeddings), "embedding store")
    ann_path = _require(_resolve(args.workdir, args.annotations), "annotations")
    labels = load_annotations(ann_path, cfg.num_phases)
    store = EmbeddingStore(emb_path)
    train_ids, _ = split_videos(sorted(labels), cfg.num_heldout)
    embeddings = {vid: store.get(vid) for vid in train_ids}
    mean_len = float(np.mean([e.shape[0] for e in embeddings.values()]))
    window = max(2, int(np.ceil(cfg.resolved_coverage() * mean_len)))
    overlap = min(int(cfg.overlap_frac * window), window - 1)
    encoder = ConsistencyEncoder(
        TcmConfig(model_dim=store.width, num_classes=cfg.num_phases,
                  depth=cfg.tcm_depth, heads=cfg.tcm_heads,
                  ff_mult=cfg.tcm_ff_mult),
        seed=cfg.seed,
    )
    dataset = WindowSampleDataset(embeddings, labels, window, overlap)
    train_cfg = TrainConfig(
        lr0=cfg.lr0, weight_decay=cfg.weight_decay, epochs=cfg.tcm_epochs,
        batch_size=cfg.batch_size, seed=cfg.seed, mode=cfg.mode,
        dropout=cfg.dropout,
    )
    history = fit_tcm(dataset, train_cfg, encoder)
    ckpt = _resolve(args.workdir, args.checkpoint)
    _save_tcm(ckpt, encoder, window, overlap, cfg)
    hist_path = _resolve(args.workdir, args.history)
    _ensure_parent(hist_path)
    write_history_csv(history, hist_path)
    print(f"trained consistency module on {len(dataset)} windows "
          f"(length {window}, overlap {overlap}); checkpoint {ckpt}")
    _write_manifest(args, cfg, "train-tcm", [emb_path, ann_path],
                    [ckpt, ckpt + ".json", hist_path])
    return 0


def _timelines_from_tcm(args, cfg, video_ids):
    emb_path = _require(_resolve(args.workdir, args.embeddings), "embedding store")
    ckpt = _resolve(args.workdir, args.checkpoint or TCM_CKPT)
    encoder, meta = load_tcm(ckpt)
    store = EmbeddingStore(emb_path)
    timelines = []
    for vid in video_ids:
        emb = store.get(vid)
        if meta["mode"] == ONLINE:
            tl = predict_online(encoder, emb, meta["window_length"],
                                video_id=vid, fps=meta["fps"])
        else:
            tl = predict_offline(encoder, emb, meta["window_length"],
                                 meta["overlap"], video_id=vid, fps=meta["fps"])
        timelines.append(tl)
    return timelines, [emb_path, ckpt, ckpt + ".json"]


def _timelines_from_mtfe(args, cfg, video_ids):
    frames_dir = _require(_resolve(args.workdir, args.frames), "frames directory")
    ckpt = _resolve(args.workdir, args.checkpoint or MTFE_CKPT)
    model, spec, meta = load_mtfe(ckpt)
    store = DirectoryFrameStore(frames_dir)
    timelines = []
    with tz.no_grad():
        for vid in video_ids:
            n = store.num_frames(vid)
            probs = np.empty((n, meta["num_classes"]))
            for t in range(n):
                idx = build_pyramid(n, t, spec)
                _, logits = model.forward(gather_frames(store, vid, idx))
                probs[t] = tz.softmax_rows(logits).data[0]
            timelines.append(PhaseTimeline(probs, video_id=vid, fps=meta["fps"]))
    return timelines, [ckpt, ckpt + ".json"]


def cmd_infer(args):
    cfg = args.cfg
    ann_path = _require(_resolve(args.workdir, args.annotations), "annotations")
    labels = load_annotations(ann_path, cfg.num_phases)
    video_ids = _select_videos(args, labels)
    if args.source == "mtfe":
        timelines, inputs = _timelines_from_mtfe(args, cfg, video_ids)
    else:
        timelines, inputs = _timelines_from_tcm(args, cfg, video_ids)
    out_path = _resolve(args.workdir, args.out)
    _ensure_parent(out_path)
    with open(out_path, "w") as f:
        for tl in timelines:
            preds = tl.predictions
            for t in range(tl.probs.shape[0]):
                row = {
                    "video": tl.video_id,
                    "frame": t,
                    "probs": [float(p) for p in tl.probs[t]],
                    "pred": int(preds[t]),
                }
                f.write(json.dumps(row) + "\n")
    total = sum(tl.probs.shape[0] for tl in timelines)
    print(f"wrote {total} predictions for {len(timelines)} videos -> {out_path}")
    _write_manifest(args, cfg, "infer", inputs, [out_path])
    return 0


def load_predictions(path):
    """Read a predictions JSONL back into {video_id: (probs, preds)}."""
    probs = {}
    preds = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                vid, frame = row["video"], int(row["frame"])
                p = [float(x) for x in row["probs"]]
                pred = int(row["pred"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed prediction row") from None
            probs.setdefault(vid, []).append((frame, p))
            preds.setdefault(vid, []).append((frame, pred))
    if not probs:
        raise DataError(f"no predictions in {path}")
    out = {}
    for vid, rows in probs.items():
        rows.sort()
        frames = [r[0] for r in rows]
        if frames != list(range(len(rows))):
            raise DataError(f"predictions for {vid!r} do not cover 0..F-1")
        out[vid] = (
            np.array([r[1] for r in rows], dtype=np.float64),
            np.array([p for _, p in sorted(preds[vid])], dtype=np.int64),
        )
    return out


def cmd_eval(args):
    cfg = args.cfg
    pred_path = _require(_resolve(args.workdir, args.predictions), "predictions")
    ann_path = _require(_resolve(args.workdir, args.annotations), "annotations")
    labels = load_annotations(ann_path, cfg.num_phases)
    predictions = load_predictions(pred_path)
    timelines = []
    for vid in sorted(predictions):
        if vid not in labels:
            raise DataError(f"predictions for unknown video {vid!r}")
        probs, _ = predictions[vid]
        if probs.shape[0] != len(labels[vid]):
            raise DataError(
                f"video {vid!r}: {probs.shape[0]} predictions vs "
                f"{len(labels[vid])} labels"
            )
        timelines.append(
            PhaseTimeline(probs, labels=labels[vid], video_id=vid, fps=cfg.fps)
        )
    report = evaluate_timelines(timelines, cfg.num_phases, fps=cfg.fps)
    out_path = _resolve(args.workdir, args.out)
    _ensure_parent(out_path)
    with open(out_path, "w") as f:
        f.write(report.to_json() + "\n")
    print(report.format_table())
    _write_manifest(args, cfg, "eval", [pred_path, ann_path], [out_path])
    return 0


def cmd_ribbon(args):
    cfg = args.cfg
    pred_path = _require(_resolve(args.workdir, args.predictions), "predictions")
    predictions = load_predictions(pred_path)
    labels = {}
    ann_path = _resolve(args.workdir, args.annotations)
    if os.path.exists(ann_path):
        labels = load_annotations(ann_path, cfg.num_phases)
    if args.video == "all":
        video_ids = sorted(predictions)
    else:
        if args.video not in predictions:
            raise DataError(f"no predictions for video {args.video!r}")
        video_ids = [args.video]
    out_dir = _resolve(args.workdir, args.out)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for vid in video_ids:
        _, preds = predictions[vid]
        svg = render_ribbon(preds, labels.get(vid), video_id=vid)
        path = os.path.join(out_dir, f"{vid}.svg")
        with open(path, "w") as f:
            f.write(svg + "\n")
        outputs.append(path)
    print(f"wrote {len(outputs)} ribbon(s) under {out_dir}")
    _write_manifest(args, cfg, "ribbon", [pred_path], outputs)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser):
    parser.add_argument("--workdir", default=".", help="artifact root directory")
    parser.add_argument("--config", default=None,
                        help="key=value config file (relative to workdir)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--mode", choices=["offline", "online"], default=None,
                        help="override inference regime")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="must",
        description="Multi-scale temporal transformer for phase recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic video corpus")
    _common(p)
    p.add_argument("--out", default=".", help="output root (relative to workdir)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-mtfe", help="train the stage-one frame encoder")
    _common(p)
    p.add_argument("--frames", default="frames")
    p.add_argument("--annotations", default="annotations.csv")
    p.add_argument("--checkpoint", default=MTFE_CKPT)
    p.add_argument("--history", default="logs/mtfe_history.csv")
    p.set_defaults(func=cmd_train_mtfe)

    p = sub.add_parser("extract", help="write per-frame fused embeddings")
    _common(p)
    p.add_argument("--frames", default="frames")
    p.add_argument("--checkpoint", default=MTFE_CKPT)
    p.add_argument("--videos", default=None,
                   help="comma-separated video ids (default: all)")
    p.add_argument("--out", default="embeddings.bin")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-tcm", help="train the consistency module")
    _common(p)
    p.add_argument("--embeddings", default="embeddings.bin")
    p.add_argument("--annotations", default="annotations.csv")
    p.add_argument("--checkpoint", default=TCM_CKPT)
    p.add_argument("--history", default="logs/tcm_history.csv")
    p.set_defaults(func=cmd_train_tcm)

    p = sub.add_parser("infer", help="predict phase timelines")
    _common(p)
    p.add_argument("--source", choices=["tcm", "mtfe"], default="tcm",
                   help="smoothed predictions or raw encoder argmax")
    p.add_argument("--embeddings", default="embeddings.bin")
    p.add_argument("--frames", default="frames")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint path (default depends on --source)")
    p.add_argument("--annotations", default="annotations.csv")
    p.add_argument("--videos", default=None,
                   help="comma-separated video ids (overrides --split)")
    p.add_argument("--split", choices=["train", "heldout", "all"],
                   default="heldout")
    p.add_argument("--out", default="predictions.jsonl")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against annotations")
    _common(p)
    p.add_argument("--predictions", default="predictions.jsonl")
    p.add_argument("--annotations", default="annotations.csv")
    p.add_argument("--out", default="metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ribbon", help="render phase ribbons as SVG")
    _common(p)
    p.add_argument("--predictions", default="predictions.jsonl")
    p.add_argument("--annotations", default="annotations.csv")
    p.add_argument("--video", required=True,
                   help="video id, or 'all' for every predicted video")
    p.add_argument("--out", default="ribbons")
    p.set_defaults(func=cmd_ribbon)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.cfg = _load_config(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
