"""Data plumbing: synthetic videos, frame stores, annotations, embeddings.

Synthetic videos are built from per-phase base patterns (disjoint colored
bands, so the patterns are mutually orthogonal) plus zero-mean noise that
lives mostly in the span of those patterns. Noise along the pattern
directions is what actually confuses a per-frame classifier; plain pixel
noise would average out over thousands of pixels and leave every frame
trivially separable no matter the nominal noise level.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DataError
from .sampler import PyramidSpec, build_pyramid, gather_frames

EMBED_MAGIC = b"EMBS"
EMBED_VERSION = 1


# ---------------------------------------------------------------------------
# synthetic videos


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 20
    frames_per_video: int = 300
    num_phases: int = 4
    min_segment: int = 30
    max_segment: int = 90
    noise_std: float = 0.1
    frame_size: tuple = (32, 32)
    fps: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.num_videos < 1 or self.frames_per_video < 1:
            raise ConfigError("need at least one video and one frame")
        if self.num_phases < 2:
            raise ConfigError(f"num_phases must be >= 2, got {self.num_phases}")
        if not 1 <= self.min_segment <= self.max_segment:
            raise ConfigError(
                f"segment bounds must satisfy 1 <= min <= max, got "
                f"[{self.min_segment}, {self.max_segment}]"
            )
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.frame_size[0] < self.num_phases:
            raise ConfigError("frame height must be >= num_phases")


def phase_patterns(num_phases, frame_size):
    """One base image per phase: a bright band in a phase-specific position
    and channel on a dim background. Bands are disjoint, so the centered
    patterns are orthogonal."""
    h, w = frame_size
    base = np.full((num_phases, h, w, 3), 0.15, dtype=np.float64)
    band = h // num_phases
    for k in range(num_phases):
        r0 = k * band
        r1 = h if k == num_phases - 1 else r0 + band
        base[k, r0:r1, :, k % 3] = 0.9
    return base


def _segment_labels(rng, spec):
    labels = np.empty(spec.frames_per_video, dtype=np.int64)
    pos = 0
    phase = int(rng.integers(spec.num_phases))
    while pos < spec.frames_per_video:
        seg = int(rng.integers(spec.min_segment, spec.max_segment + 1))
        end = min(pos + seg, spec.frames_per_video)
        labels[pos:end] = phase
        phase = (phase + 1) % spec.num_phases
        pos = end
    return labels


def generate_synthetic(spec: SyntheticSpec):
    """Deterministic synthetic corpus: (videos, labels) keyed by video id.

    Each video walks cyclically through the phases with random segment
    lengths. Every frame is its phase pattern plus structured noise: a
    small isotropic pixel term and a larger term along the centered
    pattern directions, clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    base = phase_patterns(spec.num_phases, spec.frame_size)
    centered = base - base.mean(axis=0, keepdims=True)
    videos = {}
    labels = {}
    for v in range(spec.num_videos):
        vid = f"video{v:03d}"
        lab = _segment_labels(rng, spec)
        h, w = spec.frame_size
        frames = base[lab].copy()
        if spec.noise_std > 0:
            pixel = rng.standard_normal((spec.frames_per_video, h, w, 3))
            coeff = rng.standard_normal((spec.frames_per_video, spec.num_phases))
            frames += spec.noise_std * (
                0.25 * pixel + np.einsum("fp,phwc->fhwc", coeff, centered)
            )
        np.clip(frames, 0.0, 1.0, out=frames)
        videos[vid] = frames
        labels[vid] = lab
    return videos, labels


# ---------------------------------------------------------------------------
# frame stores


class InMemoryFrameStore:
    """Frame access over a dict of (F, H, W, 3) float arrays in [0, 1]."""

    def __init__(self, videos):
        self._videos = {k: np.asarray(v, dtype=np.float64) for k, v in videos.items()}

    def video_ids(self):
        return sorted(self._videos)

    def num_frames(self, video_id):
        try:
            return self._videos[video_id].shape[0]
        except KeyError:
            raise DataError(f"unknown video {video_id!r}") from None

    def frame(self, video_id, idx):
        arr = self._videos.get(video_id)
        if arr is None:
            raise DataError(f"unknown video {video_id!r}")
        return arr[idx]


class DirectoryFrameStore:
    """Frames laid out as <root>/<video_id>/<frame_idx:08d>.png.

    Whole videos are decoded once and cached; pyramid sampling revisits
    frames far too often for per-access decoding.
    """

    def __init__(self, root):
        self.root = root
        if not os.path.isdir(root):
            raise DataError(f"frame root {root!r} is not a directory")
        self._counts = {}
        for vid in sorted(os.listdir(root)):
            vdir = os.path.join(root, vid)
            if os.path.isdir(vdir):
                n = len([f for f in os.listdir(vdir) if f.endswith(".png")])
                if n:
                    self._counts[vid] = n
        self._cache = {}

    def video_ids(self):
        return sorted(self._counts)

    def num_frames(self, video_id):
        try:
            return self._counts[video_id]
        except KeyError:
            raise DataError(f"unknown video {video_id!r}") from None

    def _load(self, video_id):
        from PIL import Image

        n = self.num_frames(video_id)
        rows = []
        for i in range(n):
            path = os.path.join(self.root, video_id, f"{i:08d}.png")
            try:
                with Image.open(path) as im:
                    rows.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
            except FileNotFoundError:
                raise DataError(f"missing frame file {path!r}") from None
        frames = np.stack(rows)
        self._cache[video_id] = frames
        return frames

    def frame(self, video_id, idx):
        frames = self._cache.get(video_id)
        if frames is None:
            frames = self._load(video_id)
        return frames[idx]


def save_frames(videos, root):
    """Write each video's frames as 8-bit PNGs under <root>/<video_id>/."""
    from PIL import Image

    for vid, frames in videos.items():
        vdir = os.path.join(root, vid)
        os.makedirs(vdir, exist_ok=True)
        arr = np.asarray(frames)
        data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
        for i in range(data.shape[0]):
            Image.fromarray(data[i]).save(os.path.join(vdir, f"{i:08d}.png"))


# ---------------------------------------------------------------------------
# annotations


def save_annotations(path, labels_by_video):
    """CSV with header video_id,frame_idx,phase_id, one row per frame."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["video_id", "frame_idx", "phase_id"])
        for vid in sorted(labels_by_video):
            for i, phase in enumerate(labels_by_video[vid]):
                writer.writerow([vid, i, int(phase)])


def load_annotations(path, num_classes=None):
    """Read an annotation CSV back into {video_id: labels array}.

    Frames of each video must cover 0..F-1 exactly once; gaps, duplicates
    and out-of-range phases are data errors naming the offending row.
    """
    rows = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["video_id", "frame_idx", "phase_id"]:
            raise DataError(f"bad annotation header in {path!r}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            vid = row[0]
            try:
                frame = int(row[1])
                phase = int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer frame or phase") from None
            if frame < 0:
                raise DataError(f"{path}:{lineno}: negative frame index {frame}")
            if phase < 0 or (num_classes is not None and phase >= num_classes):
                raise DataError(f"{path}:{lineno}: phase {phase} out of range")
            rows.setdefault(vid, []).append((frame, phase, lineno))
    labels = {}
    for vid, entries in rows.items():
        entries.sort()
        frames = [e[0] for e in entries]
        if frames != list(range(len(entries))):
            for want, (got, _, lineno) in enumerate(entries):
                if got != want:
                    raise DataError(
                        f"{path}:{lineno}: video {vid!r} frames must cover "
                        f"0..F-1 contiguously, expected {want} got {got}"
                    )
        labels[vid] = np.array([e[1] for e in entries], dtype=np.int64)
    if not labels:
        raise DataError(f"no annotation rows in {path!r}")
    return labels


# ---------------------------------------------------------------------------
# embedding store


class EmbeddingStoreWriter:
    """Streams f64 embedding rows to disk with a JSON sidecar index.

    Layout: magic, version u32, width u32, count u64 header, then rows in
    insertion order, all little-endian. The sidecar maps video ids to
    (start, count) row spans.
    """

    def __init__(self, path, width):
        if width < 1:
            raise ConfigError(f"embedding width must be >= 1, got {width}")
        self.path = path
        self.width = int(width)
        self._file = open(path, "wb")
        self._file.write(EMBED_MAGIC)
        self._file.write(struct.pack("<IIQ", EMBED_VERSION, self.width, 0))
        self._count = 0
        self._index = {}
        self._order = []

    def add_video(self, video_id, rows):
        arr = np.ascontiguousarray(rows, dtype="<f8")
        if arr.ndim != 2 or arr.shape[1] != self.width:
            raise DataError(
                f"embedding rows for {video_id!r} have shape {arr.shape}, "
                f"want (F, {self.width})"
            )
        if video_id in self._index:
            raise DataError(f"duplicate video {video_id!r} in embedding store")
        self._index[video_id] = {"start": self._count, "count": arr.shape[0]}
        self._order.append(video_id)
        self._file.write(arr.tobytes())
        self._count += arr.shape[0]

    def close(self):
        self._file.seek(len(EMBED_MAGIC) + 8)
        self._file.write(struct.pack("<Q", self._count))
        self._file.close()
        sidecar = {
            "width": self.width,
            "count": self._count,
            "videos": self._index,
            "order": self._order,
        }
        with open(index_path(self.path), "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def index_path(store_path):
    return str(store_path) + ".index.json"


class EmbeddingStore:
    """Read access to a store written by :class:`EmbeddingStoreWriter`."""

    def __init__(self, path):
        self.path = path
        try:
            with open(index_path(path)) as f:
                self._index = json.load(f)
        except FileNotFoundError:
            raise DataError(f"missing embedding index for {path!r}") from None
        header_len = len(EMBED_MAGIC) + struct.calcsize("<IIQ")
        with open(path, "rb") as f:
            header = f.read(header_len)
            if len(header) < header_len:
                raise DataError(f"truncated embedding store {path!r}")
            if header[: len(EMBED_MAGIC)] != EMBED_MAGIC:
                raise DataError(f"bad magic in embedding store {path!r}")
            version, width, count = struct.unpack("<IIQ", header[len(EMBED_MAGIC):])
            if version != EMBED_VERSION:
                raise DataError(f"unsupported embedding store version {version}")
            if width != self._index["width"] or count != self._index["count"]:
                raise DataError(
                    f"embedding index disagrees with header in {path!r}: "
                    f"header ({width}, {count}) vs index "
                    f"({self._index['width']}, {self._index['count']})"
                )
            payload = np.frombuffer(f.read(), dtype="<f8")
        if payload.size != count * width:
            raise DataError(
                f"embedding store {path!r} holds {payload.size} values, "
                f"expected {count * width}"
            )
        self.width = width
        self._rows = payload.reshape(count, width)

    def video_ids(self):
        return list(self._index["order"])

    def get(self, video_id):
        span = self._index["videos"].get(video_id)
        if span is None:
            raise DataError(f"video {video_id!r} not in embedding store")
        return self._rows[span["start"] : span["start"] + span["count"]]

    def as_dict(self):
        return {vid: self.get(vid) for vid in self.video_ids()}


def extract_embeddings(encoder, store, spec: PyramidSpec, video_ids=None):
    """One fused embedding per frame per video, gradients off.

    Every frame of each video serves as the keyframe of its own pyramid;
    the result maps video id to an (F, width) array.
    """
    ids = list(video_ids) if video_ids is not None else store.video_ids()
    out = {}
    with tz.no_grad():
        for vid in ids:
            n = store.num_frames(vid)
            rows = np.empty((n, encoder.mtam_cfg.fused_dim), dtype=np.float64)
            for t in range(n):
                idx = build_pyramid(n, t, spec)
                frames = gather_frames(store, vid, idx)
                rows[t] = encoder.embed(frames)
            out[vid] = rows
    return out


# ---------------------------------------------------------------------------
# training-facing datasets


class PyramidSampleDataset:
    """Keyframe samples for stage-one training.

    Item i is (list of per-scale frame stacks, keyframe phase label).
    ``keyframe_stride`` thins the keyframe grid to cut epoch cost; labels
    still come from the exact keyframe.
    """

    def __init__(self, store, labels_by_video, spec: PyramidSpec,
                 keyframe_stride: int = 1, video_ids=None):
        if keyframe_stride < 1:
            raise ConfigError(f"keyframe_stride must be >= 1, got {keyframe_stride}")
        self.store = store
        self.labels = labels_by_video
        self.spec = spec
        ids = sorted(video_ids) if video_ids is not None else sorted(labels_by_video)
        self.samples = []
        for vid in ids:
            if vid not in labels_by_video:
                raise DataError(f"video {vid!r} has no annotations")
            n = store.num_frames(vid)
            if n != len(labels_by_video[vid]):
                raise DataError(
                    f"video {vid!r}: {n} frames but {len(labels_by_video[vid])} labels"
                )
            for t in range(0, n, keyframe_stride):
                self.samples.append((vid, t))

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        vid, t = self.samples[i]
        idx = build_pyramid(self.store.num_frames(vid), t, self.spec)
        frames = gather_frames(self.store, vid, idx)
        return frames, int(self.labels[vid][t])


class WindowSampleDataset:
    """Embedding windows with per-position labels for stage-two training."""

    def __init__(self, embeddings, labels_by_video, window_length, overlap):
        from .tcm import effective_window, schedule_windows

        self.samples = []
        self._embeddings = embeddings
        self._labels = labels_by_video
        for vid in sorted(embeddings):
            if vid not in labels_by_video:
                raise DataError(f"video {vid!r} has no annotations")
            emb = np.asarray(embeddings[vid], dtype=np.float64)
            f = emb.shape[0]
            if f != len(labels_by_video[vid]):
                raise DataError(
                    f"video {vid!r}: {f} embeddings but "
                    f"{len(labels_by_video[vid])} labels"
                )
            fp = effective_window(f, window_length)
            ov = int(overlap) if fp == window_length else 0
            sched = schedule_windows(f, fp, ov)
            for start in sched.starts:
                self.samples.append((vid, start, fp))

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        vid, start, fp = self.samples[i]
        emb = np.asarray(self._embeddings[vid], dtype=np.float64)
        window = emb[start : start + fp]
        labels = np.asarray(self._labels[vid], dtype=np.int64)[start : start + fp]
        return window, labels


def split_videos(video_ids, num_heldout):
    """Deterministic split: last ``num_heldout`` ids (sorted) are held out."""
    ids = sorted(video_ids)
    if not 0 < num_heldout < len(ids):
        raise ConfigError(
            f"num_heldout must lie in (0, {len(ids)}), got {num_heldout}"
        )
    return ids[:-num_heldout], ids[-num_heldout:]
