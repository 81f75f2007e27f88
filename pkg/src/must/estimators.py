"""Estimator layer: fit/transform/predict wrappers over the two stages.

MultiTermFrameEncoder is the stage-one transformer (videos in, per-frame
fused embeddings out), TemporalConsistencyClassifier the stage-two
smoother (embeddings in, phase probabilities out), and PhaseRecognizer
chains them. All three follow scikit-learn conventions: constructor args
are stored verbatim, fitted state lives in trailing-underscore
attributes, and get_params/set_params come from BaseEstimator.

Videos have variable length, so X is a {video_id: array} dict (or a
sequence, which gets positional ids) rather than a single 2-D matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import tensor as tz
from ._validation import (
    as_label_dict,
    as_video_dict,
    check_is_fitted,
    infer_num_classes,
)
from .backbone import BackboneConfig
from .data import PyramidSampleDataset, WindowSampleDataset, InMemoryFrameStore
from .errors import ConfigError
from .mtam import MtamConfig, MultiTermEncoder
from .sampler import (
    DEFAULT_FRAMES_OFFLINE,
    DEFAULT_FRAMES_ONLINE,
    DEFAULT_STRIDE_SECONDS,
    OFFLINE,
    PyramidSpec,
    build_pyramid,
    gather_frames,
)
from .tcm import (
    ConsistencyEncoder,
    TcmConfig,
    effective_window,
    predict_offline,
    predict_online,
)
from .train import TrainConfig, fit_mtfe, fit_tcm

WINDOW_COVERAGE = {"offline": 0.10, "online": 0.05}


def _train_config(est, epochs_default):
    return TrainConfig(
        lr0=est.lr0,
        weight_decay=est.weight_decay,
        epochs=epochs_default if est.epochs is None else est.epochs,
        batch_size=est.batch_size,
        seed=est.seed,
        mode=est.mode,
        dropout=est.dropout,
    )


class MultiTermFrameEncoder(BaseEstimator):
    """Stage one: pyramid sampling plus the shared-backbone attention encoder.

    fit trains on keyframe phase labels; transform maps each video to an
    (F, num_scales * embed_dim) embedding matrix; predict gives the
    encoder head's per-frame argmax phase.
    """

    def __init__(self, mode=OFFLINE, fps=1.0, num_scales=4,
                 stride_seconds=DEFAULT_STRIDE_SECONDS, frames_per_seq=None,
                 embed_dim=64, depth=2, heads=4, temporal_pool=2, patch_size=8,
                 frame_size=(32, 32), num_classes=None, lr0=1e-4,
                 weight_decay=1e-4, epochs=None, batch_size=8,
                 keyframe_stride=1, dropout=0.0, seed=0):
        self.mode = mode
        self.fps = fps
        self.num_scales = num_scales
        self.stride_seconds = stride_seconds
        self.frames_per_seq = frames_per_seq
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.temporal_pool = temporal_pool
        self.patch_size = patch_size
        self.frame_size = frame_size
        self.num_classes = num_classes
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.keyframe_stride = keyframe_stride
        self.dropout = dropout
        self.seed = seed

    def _pyramid_spec(self):
        frames = self.frames_per_seq
        if frames is None:
            frames = (DEFAULT_FRAMES_OFFLINE if self.mode == OFFLINE
                      else DEFAULT_FRAMES_ONLINE)
        strides = self.stride_seconds
        if len(strides) != self.num_scales:
            raise ConfigError(
                f"{self.num_scales} scales but {len(strides)} stride values"
            )
        return PyramidSpec.default(self.mode, fps=self.fps,
                                   stride_seconds=strides,
                                   frames_per_seq=frames)

    def _build_model(self, num_classes):
        spec = self._pyramid_spec()
        backbone_cfg = BackboneConfig(
            embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
            temporal_pool=self.temporal_pool, patch_size=self.patch_size,
            frame_size=tuple(self.frame_size),
        )
        mtam_cfg = MtamConfig(
            num_scales=self.num_scales, embed_dim=self.embed_dim,
            num_classes=num_classes,
        )
        model = MultiTermEncoder(backbone_cfg, mtam_cfg,
                                 spec.frames_per_seq, seed=self.seed)
        return spec, model

    def fit(self, X, y):
        videos = as_video_dict(X, 4, "video")
        labels = as_label_dict(y, videos, self.num_classes)
        n_classes = self.num_classes or infer_num_classes(labels)
        spec, model = self._build_model(n_classes)
        store = InMemoryFrameStore(videos)
        dataset = PyramidSampleDataset(store, labels, spec,
                                       keyframe_stride=self.keyframe_stride)
        cfg = _train_config(self, epochs_default=5)
        history = fit_mtfe(dataset, cfg, model)
        self.model_ = model
        self.pyramid_spec_ = spec
        self.classes_ = np.arange(n_classes)
        self.history_ = history
        self.n_features_out_ = model.mtam_cfg.fused_dim
        return self

    def transform(self, X):
        """Per-frame fused embeddings: {video_id: (F, fused_dim) array}."""
        check_is_fitted(self, ["model_", "pyramid_spec_"])
        videos = as_video_dict(X, 4, "video")
        store = InMemoryFrameStore(videos)
        out = {}
        with tz.no_grad():
            for vid in store.video_ids():
                n = store.num_frames(vid)
                rows = np.empty((n, self.n_features_out_))
                for t in range(n):
                    idx = build_pyramid(n, t, self.pyramid_spec_)
                    rows[t] = self.model_.embed(gather_frames(store, vid, idx))
                out[vid] = rows
        return out

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def predict_proba(self, X):
        """Head softmax per frame, no temporal smoothing: {id: (F, C)}."""
        check_is_fitted(self, ["model_", "pyramid_spec_"])
        videos = as_video_dict(X, 4, "video")
        store = InMemoryFrameStore(videos)
        out = {}
        with tz.no_grad():
            for vid in store.video_ids():
                n = store.num_frames(vid)
                probs = np.empty((n, len(self.classes_)))
                for t in range(n):
                    idx = build_pyramid(n, t, self.pyramid_spec_)
                    _, logits = self.model_.forward(
                        gather_frames(store, vid, idx))
                    probs[t] = tz.softmax_rows(logits).data[0]
                out[vid] = probs
        return out

    def predict(self, X):
        """Per-frame argmax phase from the encoder head: {id: (F,) array}."""
        return {vid: p.argmax(axis=1) for vid, p in self.predict_proba(X).items()}


class TemporalConsistencyClassifier(BaseEstimator):
    """Stage two: transformer smoother over per-frame embedding windows.

    The window length comes from ``window_coverage`` times the mean
    training video length; offline inference averages overlapping window
    softmaxes, online inference is causal per frame.
    """

    def __init__(self, mode=OFFLINE, window_coverage=None, overlap_frac=0.9,
                 depth=2, heads=4, ff_mult=4, num_classes=None, lr0=1e-4,
                 weight_decay=1e-4, epochs=None, batch_size=8, dropout=0.0,
                 fps=1.0, seed=0):
        self.mode = mode
        self.window_coverage = window_coverage
        self.overlap_frac = overlap_frac
        self.depth = depth
        self.heads = heads
        self.ff_mult = ff_mult
        self.num_classes = num_classes
        self.lr0 = lr0
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.dropout = dropout
        self.fps = fps
        self.seed = seed

    def _window_plan(self, embeddings):
        if self.mode not in WINDOW_COVERAGE:
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        coverage = self.window_coverage
        if coverage is None:
            coverage = WINDOW_COVERAGE[self.mode]
        if not 0 < coverage <= 1:
            raise ConfigError(f"window_coverage must lie in (0, 1], got {coverage}")
        if not 0 <= self.overlap_frac < 1:
            raise ConfigError(
                f"overlap_frac must lie in [0, 1), got {self.overlap_frac}"
            )
        mean_len = float(np.mean([e.shape[0] for e in embeddings.values()]))
        window = max(2, int(np.ceil(coverage * mean_len)))
        overlap = min(int(self.overlap_frac * window), window - 1)
        return window, overlap

    def fit(self, X, y):
        embeddings = as_video_dict(X, 2, "embedding sequence")
        labels = as_label_dict(y, embeddings, self.num_classes)
        n_classes = self.num_classes or infer_num_classes(labels)
        widths = {e.shape[1] for e in embeddings.values()}
        if len(widths) != 1:
            raise ConfigError(f"mixed embedding widths {sorted(widths)}")
        width = widths.pop()
        window, overlap = self._window_plan(embeddings)
        cfg = TcmConfig(model_dim=width, num_classes=n_classes,
                        depth=self.depth, heads=self.heads, ff_mult=self.ff_mult)
        encoder = ConsistencyEncoder(cfg, seed=self.seed)
        dataset = WindowSampleDataset(embeddings, labels, window, overlap)
        history = fit_tcm(dataset, _train_config(self, epochs_default=20), encoder)
        self.encoder_ = encoder
        self.window_length_ = window
        self.overlap_ = overlap
        self.classes_ = np.arange(n_classes)
        self.history_ = history
        return self

    def _timeline(self, vid, emb):
        if self.mode == OFFLINE:
            return predict_offline(self.encoder_, emb, self.window_length_,
                                   self.overlap_, video_id=vid, fps=self.fps)
        return predict_online(self.encoder_, emb, self.window_length_,
                              video_id=vid, fps=self.fps)

    def predict_proba(self, X):
        """Smoothed per-frame distributions: {video_id: (F, C) array}."""
        check_is_fitted(self, ["encoder_", "window_length_"])
        embeddings = as_video_dict(X, 2, "embedding sequence")
        return {vid: self._timeline(vid, emb).probs
                for vid, emb in embeddings.items()}

    def predict_timelines(self, X, y=None):
        """Full PhaseTimeline objects, with labels attached when given."""
        check_is_fitted(self, ["encoder_", "window_length_"])
        embeddings = as_video_dict(X, 2, "embedding sequence")
        labels = as_label_dict(y, embeddings) if y is not None else {}
        out = []
        for vid, emb in embeddings.items():
            tl = self._timeline(vid, emb)
            if vid in labels:
                tl = tl.with_labels(labels[vid])
            out.append(tl)
        return out

    def predict(self, X):
        """Smoothed per-frame phase ids: {video_id: (F,) array}."""
        return {vid: p.argmax(axis=1) for vid, p in self.predict_proba(X).items()}


class PhaseRecognizer(BaseEstimator):
    """Both stages chained: raw videos in, smoothed phase timelines out."""

    def __init__(self, encoder=None, smoother=None):
        self.encoder = encoder
        self.smoother = smoother

    def fit(self, X, y):
        from sklearn.base import clone

        self.encoder_ = clone(self.encoder) if self.encoder is not None \
            else MultiTermFrameEncoder()
        self.smoother_ = clone(self.smoother) if self.smoother is not None \
            else TemporalConsistencyClassifier(mode=self.encoder_.mode)
        embeddings = self.encoder_.fit_transform(X, y)
        videos = as_video_dict(X, 4, "video")
        labels = as_label_dict(y, videos)
        self.smoother_.fit(embeddings, labels)
        self.classes_ = self.smoother_.classes_
        return self

    def predict_proba(self, X):
        check_is_fitted(self, ["encoder_", "smoother_"])
        return self.smoother_.predict_proba(self.encoder_.transform(X))

    def predict(self, X):
        check_is_fitted(self, ["encoder_", "smoother_"])
        return self.smoother_.predict(self.encoder_.transform(X))
