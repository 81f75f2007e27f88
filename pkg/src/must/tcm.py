"""Long-term temporal consistency over fused frame embeddings.

A video's per-frame embeddings are cut into overlapping windows; each
window gets a sinusoidal positional embedding, runs through a small
pre-norm transformer encoder, and every position is projected to phase
logits. Offline, a frame's final distribution is the arithmetic mean over
all windows that cover it; online, each frame takes the prediction of the
window that ends on it, so no future embedding is ever consulted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .backbone import _trunc_normal
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class WindowSchedule:
    """Start offsets of the overlapping windows laid over one video."""

    window_length: int
    overlap: int
    starts: tuple
    video_length: int

    @property
    def stride(self):
        return self.window_length - self.overlap

    def validate(self):
        f, fp = self.video_length, self.window_length
        if not self.starts or self.starts[0] != 0:
            raise ConfigError(f"schedule must start at 0, got {self.starts[:3]}")
        covered = np.zeros(f, dtype=bool)
        prev = None
        for s in self.starts:
            if s + fp > f or s < 0:
                raise ConfigError(f"window at {s} overruns video of length {f}")
            if prev is not None and not 0 < s - prev <= self.stride:
                raise ConfigError(
                    f"start gap {s - prev} invalid for stride {self.stride}"
                )
            covered[s : s + fp] = True
            prev = s
        if not covered.all():
            raise ConfigError("schedule leaves frames uncovered")


def schedule_windows(video_length, window_length, overlap):
    """Lay overlapping windows over [0, video_length).

    Regular starts advance by window_length - overlap; when the final
    regular window stops short of the video end, one tail window pinned to
    end exactly at the last frame is appended so coverage always holds.
    """
    f, fp = int(video_length), int(window_length)
    overlap = int(overlap)
    if not 0 <= overlap < fp:
        raise ConfigError(f"overlap {overlap} must satisfy 0 <= overlap < {fp}")
    if fp > f:
        raise ConfigError(f"window length {fp} exceeds video length {f}")
    stride = fp - overlap
    starts = list(range(0, f - fp + 1, stride))
    if starts[-1] != f - fp:
        starts.append(f - fp)
    sched = WindowSchedule(
        window_length=fp, overlap=overlap, starts=tuple(starts), video_length=f
    )
    sched.validate()
    return sched


def sinusoidal_pe(length, dim):
    """Interleaved sin/cos positional embedding, shape (length, dim)."""
    if dim % 2 != 0:
        raise ConfigError(f"positional embedding dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * freqs[None, :])
    pe[:, 1::2] = np.cos(pos * freqs[None, :])
    return pe


@dataclass
class PhaseTimeline:
    """Whole-video per-frame class distributions plus optional ground truth."""

    probs: np.ndarray  # (F, num_classes), rows sum to 1
    labels: np.ndarray = None  # (F,) ints, optional
    video_id: str = ""
    fps: float = 1.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ConfigError(f"timeline probs must be 2-D, got {self.probs.shape}")
        sums = self.probs.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ConfigError("timeline probability rows must sum to 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.probs.shape[0],):
                raise ConfigError(
                    f"labels shape {self.labels.shape} vs {self.probs.shape[0]} frames"
                )

    @property
    def predictions(self):
        return self.probs.argmax(axis=1)

    def with_labels(self, labels):
        return PhaseTimeline(self.probs, labels, self.video_id, self.fps)


@dataclass(frozen=True)
class TcmConfig:
    model_dim: int  # width of the fused embeddings
    num_classes: int
    depth: int = 2
    heads: int = 4
    ff_mult: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.model_dim % 2 != 0:
            raise ConfigError("model_dim must be even for the positional embedding")
        for name in ("model_dim", "num_classes", "depth", "heads", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


class ConsistencyEncoder:
    """Lightweight transformer encoder plus per-position phase head."""

    def __init__(self, cfg: TcmConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d, hidden = cfg.model_dim, cfg.ff_mult * cfg.model_dim
        p = {}
        for i in range(cfg.depth):
            b = f"block{i}"
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{b}.attn.{w}"] = tz.parameter(_trunc_normal(rng, (d, d)))
                p[f"{b}.attn.b{w[-1]}"] = tz.parameter(np.zeros(d))
            p[f"{b}.ln1.g"] = tz.parameter(np.ones(d))
            p[f"{b}.ln1.b"] = tz.parameter(np.zeros(d))
            p[f"{b}.ln2.g"] = tz.parameter(np.ones(d))
            p[f"{b}.ln2.b"] = tz.parameter(np.zeros(d))
            p[f"{b}.ffn.w1"] = tz.parameter(_trunc_normal(rng, (d, hidden)))
            p[f"{b}.ffn.b1"] = tz.parameter(np.zeros(hidden))
            p[f"{b}.ffn.w2"] = tz.parameter(_trunc_normal(rng, (hidden, d)))
            p[f"{b}.ffn.b2"] = tz.parameter(np.zeros(d))
        p["head.w"] = tz.parameter(_trunc_normal(rng, (d, cfg.num_classes)))
        p["head.b"] = tz.parameter(np.zeros(cfg.num_classes))
        self.params = p
        self._pe_cache = {}

    def _pe(self, length):
        if length not in self._pe_cache:
            self._pe_cache[length] = Tensor(sinusoidal_pe(length, self.cfg.model_dim))
        return self._pe_cache[length]

    def _block(self, x, i, dropout_rate=0.0, rng=None):
        p = self.params
        b = f"block{i}"
        dh = self.cfg.model_dim // self.cfg.heads
        h = tz.layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
        q = tz.add_rowvec(tz.matmul(h, p[f"{b}.attn.wq"]), p[f"{b}.attn.bq"])
        k = tz.add_rowvec(tz.matmul(h, p[f"{b}.attn.wk"]), p[f"{b}.attn.bk"])
        v = tz.add_rowvec(tz.matmul(h, p[f"{b}.attn.wv"]), p[f"{b}.attn.bv"])
        heads = []
        for j in range(self.cfg.heads):
            lo, hi = j * dh, (j + 1) * dh
            qh, kh, vh = (tz.slice_cols(t, lo, hi) for t in (q, k, v))
            scores = tz.scale(tz.matmul(qh, tz.transpose(kh)), 1.0 / math.sqrt(dh))
            heads.append(tz.matmul(tz.softmax_rows(scores), vh))
        attn = tz.add_rowvec(
            tz.matmul(tz.concat_cols(heads), p[f"{b}.attn.wo"]), p[f"{b}.attn.bo"]
        )
        if dropout_rate and rng is not None:
            attn = tz.dropout(attn, dropout_rate, rng)
        x = tz.add(x, attn)
        h2 = tz.layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        hidden = tz.gelu(
            tz.add_rowvec(tz.matmul(h2, p[f"{b}.ffn.w1"]), p[f"{b}.ffn.b1"])
        )
        out = tz.add_rowvec(tz.matmul(hidden, p[f"{b}.ffn.w2"]), p[f"{b}.ffn.b2"])
        if dropout_rate and rng is not None:
            out = tz.dropout(out, dropout_rate, rng)
        return tz.add(x, out)

    def encode_window(self, window, dropout_rate=0.0, rng=None):
        """Window of embeddings (rows) -> per-position phase logits."""
        x = window if isinstance(window, Tensor) else Tensor(window)
        if x.data.ndim != 2 or x.shape[1] != self.cfg.model_dim:
            raise ConfigError(
                f"encode_window: expected (*, {self.cfg.model_dim}), got {tuple(x.shape)}"
            )
        x = tz.add(x, self._pe(x.shape[0]))
        for i in range(self.cfg.depth):
            x = self._block(x, i, dropout_rate, rng)
        return tz.add_rowvec(tz.matmul(x, self.params["head.w"]), self.params["head.b"])

    def window_probs(self, window):
        """Inference helper: post-softmax distributions for one window."""
        with tz.no_grad():
            return tz.softmax_rows(self.encode_window(window)).data

    # -- parameters ----------------------------------------------------------

    def named_parameters(self, prefix="tcm."):
        return {prefix + name: p for name, p in self.params.items()}

    def parameters(self):
        return list(self.params.values())

    def state(self, prefix="tcm."):
        return {prefix + name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state, prefix="tcm."):
        for name, p in self.params.items():
            key = prefix + name
            if key not in state:
                raise ConfigError(f"checkpoint missing parameter {key!r}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {key!r}: checkpoint shape {arr.shape} vs "
                    f"model shape {p.data.shape}"
                )
            p.data = arr.copy()


def aggregate_predictions(schedule: WindowSchedule, window_probs, video_id="",
                          labels=None, fps=1.0):
    """Average the per-window distributions into one row per frame.

    Every frame's row is the arithmetic mean over all windows covering it;
    means of distributions are distributions, so rows re-sum to 1.
    """
    f, fp = schedule.video_length, schedule.window_length
    if len(window_probs) != len(schedule.starts):
        raise ConfigError(
            f"got {len(window_probs)} probability blocks for "
            f"{len(schedule.starts)} windows"
        )
    num_classes = np.asarray(window_probs[0]).shape[1]
    total = np.zeros((f, num_classes))
    count = np.zeros(f)
    for start, block in zip(schedule.starts, window_probs):
        block = np.asarray(block, dtype=np.float64)
        if block.shape != (fp, num_classes):
            raise ConfigError(
                f"window block shape {block.shape}, expected {(fp, num_classes)}"
            )
        total[start : start + fp] += block
        count[start : start + fp] += 1
    if (count == 0).any():
        raise RuntimeError("aggregation found uncovered frames; schedule is broken")
    probs = total / count[:, None]
    return PhaseTimeline(probs=probs, labels=labels, video_id=video_id, fps=fps)


def effective_window(video_length, window_length):
    """Videos shorter than the window use one full-video window."""
    return min(int(window_length), int(video_length))


def predict_offline(encoder: ConsistencyEncoder, embeddings, window_length,
                    overlap, video_id="", labels=None, fps=1.0):
    """Overlap-averaged whole-video prediction."""
    emb = np.asarray(embeddings, dtype=np.float64)
    f = emb.shape[0]
    fp = effective_window(f, window_length)
    # a short video collapses to one full-length window regardless of overlap
    ov = int(overlap) if fp == window_length else 0
    sched = schedule_windows(f, fp, ov)
    blocks = [encoder.window_probs(emb[s : s + fp]) for s in sched.starts]
    return aggregate_predictions(sched, blocks, video_id=video_id, labels=labels, fps=fps)


def predict_online(encoder: ConsistencyEncoder, embeddings, window_length,
                   video_id="", labels=None, fps=1.0):
    """Causal prediction: frame f uses the window ending at f, never ahead."""
    emb = np.asarray(embeddings, dtype=np.float64)
    f = emb.shape[0]
    fp = effective_window(f, window_length)
    probs = np.zeros((f, encoder.cfg.num_classes))
    for t in range(f):
        start = max(0, t - fp + 1)
        block = encoder.window_probs(emb[start : t + 1])
        probs[t] = block[-1]
    return PhaseTimeline(probs=probs, labels=labels, video_id=video_id, fps=fps)
