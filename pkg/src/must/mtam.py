"""Multi-temporal attention: cross-scale attention, self-attention, fusion.

Stage one of the pipeline. Each pyramid scale contributes a token sequence
(class token in row 0, then the backbone's pooled temporal tokens). The
cross-attention unit lets every scale query the concatenation of all
scales; the self-attention unit then mixes each scale's own sequence with
every cross-attention output (concatenation is the residual path). The
class-token rows that come out of self-attention are concatenated and
pushed through a small MLP to give the fused per-frame embedding, which a
linear head turns into phase logits during stage-one training.

Attention here is single-head with key width equal to the embedding width;
the query/key/value projections carry no bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .backbone import Backbone, BackboneConfig, _trunc_normal
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class MtamConfig:
    num_scales: int
    embed_dim: int
    num_classes: int

    def __post_init__(self):
        for name in ("num_scales", "embed_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def fused_dim(self):
        return self.num_scales * self.embed_dim

    @property
    def hidden_dim(self):
        # fusion MLP hidden width: twice the fused embedding
        return 2 * self.fused_dim


@dataclass
class MultiTermEmbedding:
    """Fused per-keyframe embedding of width num_scales * embed_dim."""

    p: Tensor  # (1, N*D)
    keyframe: int = -1
    video_id: str = ""


class MtamParams:
    """Per-scale projection groups plus the fusion MLP and linear head."""

    def __init__(self, cfg: MtamConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d, nd, hidden = cfg.embed_dim, cfg.fused_dim, cfg.hidden_dim
        self.cfg = cfg
        p = {}
        for i in range(cfg.num_scales):
            for unit in ("mtca", "sa"):
                for w in ("wq", "wk", "wv"):
                    p[f"scale{i}.{unit}.{w}"] = tz.parameter(_trunc_normal(rng, (d, d)))
        p["fuse.w1"] = tz.parameter(_trunc_normal(rng, (nd, hidden)))
        p["fuse.b1"] = tz.parameter(np.zeros(hidden))
        p["fuse.w2"] = tz.parameter(_trunc_normal(rng, (hidden, nd)))
        p["fuse.b2"] = tz.parameter(np.zeros(nd))
        p["head.w"] = tz.parameter(_trunc_normal(rng, (nd, cfg.num_classes)))
        p["head.b"] = tz.parameter(np.zeros(cfg.num_classes))
        self.params = p

    def scale_weights(self, i, unit):
        p = self.params
        return (
            p[f"scale{i}.{unit}.wq"],
            p[f"scale{i}.{unit}.wk"],
            p[f"scale{i}.{unit}.wv"],
        )


def _attend(queries_src, keys_src, wq, wk, wv):
    # softmax(Q K^T / sqrt(d)) V with d = embedding width (single head)
    q = tz.matmul(queries_src, wq)
    k = tz.matmul(keys_src, wk)
    v = tz.matmul(keys_src, wv)
    d = q.shape[1]
    scores = tz.scale(tz.matmul(q, tz.transpose(k)), 1.0 / math.sqrt(d))
    return tz.matmul(tz.softmax_rows(scores), v)


def mtca(sequences, params: MtamParams):
    """Cross-attention of each scale against the concatenation of all scales.

    Every sequence queries the shared concatenation (which includes its own
    rows), so a single scale degenerates to plain self-attention. Output i
    has the same row count as sequence i.
    """
    n = params.cfg.num_scales
    if len(sequences) != n:
        raise ConfigError(f"mtca: expected {n} sequences, got {len(sequences)}")
    width = sequences[0].shape[1]
    for s in sequences:
        if s.data.ndim != 2 or s.shape[1] != width:
            raise ConfigError(
                f"mtca: scales disagree on shape: {[tuple(s.shape) for s in sequences]}"
            )
    joint = tz.concat_rows(sequences)
    out = []
    for i, seq in enumerate(sequences):
        wq, wk, wv = params.scale_weights(i, "mtca")
        out.append(_attend(seq, joint, wq, wk, wv))
    return out


def mtsa(seq_i, cross_outputs, params: MtamParams, scale_index):
    """Self-attention over [own sequence; all cross-attention outputs].

    The scale's backbone sequence rides along as the first block, which is
    the residual path; the output therefore has (N+1) * rows-per-scale rows.
    """
    n = params.cfg.num_scales
    if len(cross_outputs) != n:
        raise ConfigError(
            f"mtsa: expected {n} cross outputs, got {len(cross_outputs)}"
        )
    joined = tz.concat_rows([seq_i] + list(cross_outputs))
    wq, wk, wv = params.scale_weights(scale_index, "sa")
    return _attend(joined, joined, wq, wk, wv)


def fuse_and_classify(cls_tokens, params: MtamParams, dropout_rate=0.0, rng=None):
    """Concatenate per-scale class tokens, fuse through the MLP, classify.

    Returns the fused embedding (1 x N*D) and the phase logits
    (1 x num_classes).
    """
    cfg = params.cfg
    if len(cls_tokens) != cfg.num_scales:
        raise ConfigError(
            f"fuse_and_classify: expected {cfg.num_scales} class tokens, "
            f"got {len(cls_tokens)}"
        )
    for i, tok in enumerate(cls_tokens):
        if tuple(tok.shape) != (1, cfg.embed_dim):
            raise ConfigError(
                f"fuse_and_classify: class token {i} has shape "
                f"{tuple(tok.shape)}, want (1, {cfg.embed_dim})"
            )
    p = params.params
    stacked = tz.concat_cols(list(cls_tokens))
    hidden = tz.gelu(tz.add_rowvec(tz.matmul(stacked, p["fuse.w1"]), p["fuse.b1"]))
    if dropout_rate and rng is not None:
        hidden = tz.dropout(hidden, dropout_rate, rng)
    fused = tz.add_rowvec(tz.matmul(hidden, p["fuse.w2"]), p["fuse.b2"])
    logits = tz.add_rowvec(tz.matmul(fused, p["head.w"]), p["head.b"])
    return fused, logits


class MultiTermEncoder:
    """Backbone plus attention module: pyramid frames in, fused embedding out.

    The backbone is shared across scales; each scale's class token enters
    the attention units as row 0 of its sequence and the fused embedding is
    read from that row of the self-attention output.
    """

    def __init__(self, backbone_cfg: BackboneConfig, mtam_cfg: MtamConfig,
                 frames_per_seq: int, seed=0):
        if backbone_cfg.embed_dim != mtam_cfg.embed_dim:
            raise ConfigError(
                f"embed_dim mismatch: backbone {backbone_cfg.embed_dim}, "
                f"attention {mtam_cfg.embed_dim}"
            )
        rng = np.random.default_rng(seed)
        self.backbone_cfg = backbone_cfg
        self.mtam_cfg = mtam_cfg
        self.frames_per_seq = frames_per_seq
        self.seed = seed
        self.backbone = Backbone(backbone_cfg, frames_per_seq, rng)
        self.mtam = MtamParams(mtam_cfg, rng)
        self.cfg = mtam_cfg

    def forward(self, pyramid_frames, dropout_rate=0.0, rng=None):
        """Encode one keyframe's pyramid: N frame stacks -> (embedding, logits)."""
        if len(pyramid_frames) != self.cfg.num_scales:
            raise ConfigError(
                f"expected {self.cfg.num_scales} scales, got {len(pyramid_frames)}"
            )
        sequences = []
        for frames in pyramid_frames:
            emb = self.backbone.encode(frames, dropout_rate, rng)
            sequences.append(tz.concat_rows([emb.cls, emb.tokens]))
        cross = mtca(sequences, self.mtam)
        cls_rows = []
        for i, seq in enumerate(sequences):
            sa_out = mtsa(seq, cross, self.mtam, i)
            cls_rows.append(tz.slice_rows(sa_out, 0, 1))
        return fuse_and_classify(cls_rows, self.mtam, dropout_rate, rng)

    def embed(self, pyramid_frames):
        """Inference-only fused embedding as a flat float64 vector."""
        with tz.no_grad():
            fused, _ = self.forward(pyramid_frames)
        return fused.data.reshape(-1).copy()

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        named = self.named_parameters()
        return list(named.values())

    def named_parameters(self):
        out = {}
        for name, p in self.backbone.params.items():
            out[f"backbone.{name}"] = p
        for name, p in self.mtam.params.items():
            out[f"mtam.{name}"] = p
        return out

    def state(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state):
        for name, p in self.named_parameters().items():
            if name not in state:
                raise ConfigError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} vs "
                    f"model shape {p.data.shape}"
                )
            p.data = arr.copy()
