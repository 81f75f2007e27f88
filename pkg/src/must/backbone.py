"""Compact spatio-temporal sequence encoder.

Maps one sampled frame sequence (T x H x W x 3) to a shorter sequence of
pooled temporal embeddings plus a class-token summary. Frames are cut into
space-time patches (temporal blocks of ``temporal_pool`` frames, spatial
tiles of ``patch_size``), linearly projected, tagged with learnable
positions, and run through pre-norm transformer blocks. The class token is
read from position 0 and the patch tokens are mean-pooled per temporal
slot, so the output is exactly T' = T / temporal_pool token rows of width
``embed_dim``.

One instance serves every pyramid scale; there is no per-scale state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    temporal_pool: int = 2
    patch_size: int = 8
    frame_size: tuple = (32, 32)  # (H, W)

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        h, w = self.frame_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"frame size {self.frame_size} not divisible by patch {self.patch_size}"
            )
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        for name in ("embed_dim", "heads", "temporal_pool", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def patches_per_block(self):
        h, w = self.frame_size
        return (h // self.patch_size) * (w // self.patch_size)


@dataclass
class SequenceEmbedding:
    """One scale's encoder output: T' pooled tokens plus a class token row."""

    tokens: Tensor  # (T', D)
    cls: Tensor  # (1, D)


def _trunc_normal(rng, shape, std=0.02):
    # normal clipped at two sigma, the usual transformer projection init
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)


class Backbone:
    """Shared encoder over sampled sequences; parameters live in ``params``."""

    def __init__(self, cfg: BackboneConfig, frames_per_seq: int, rng=None):
        if frames_per_seq % cfg.temporal_pool != 0:
            raise ConfigError(
                f"frames_per_seq {frames_per_seq} not divisible by "
                f"temporal_pool {cfg.temporal_pool}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.frames_per_seq = frames_per_seq
        self.t_out = frames_per_seq // cfg.temporal_pool
        d = cfg.embed_dim
        patch_dim = cfg.temporal_pool * cfg.patch_size * cfg.patch_size * 3
        self.num_patches = self.t_out * cfg.patches_per_block

        p = {}
        p["patch_proj.w"] = tz.parameter(_trunc_normal(rng, (patch_dim, d)))
        p["patch_proj.b"] = tz.parameter(np.zeros(d))
        p["cls_token"] = tz.parameter(_trunc_normal(rng, (1, d)))
        p["pos_embed"] = tz.parameter(_trunc_normal(rng, (self.num_patches + 1, d)))
        for i in range(cfg.depth):
            b = f"block{i}"
            for w in ("wq", "wk", "wv", "wo"):
                p[f"{b}.attn.{w}"] = tz.parameter(_trunc_normal(rng, (d, d)))
                p[f"{b}.attn.b{w[-1]}"] = tz.parameter(np.zeros(d))
            p[f"{b}.ln1.g"] = tz.parameter(np.ones(d))
            p[f"{b}.ln1.b"] = tz.parameter(np.zeros(d))
            p[f"{b}.ln2.g"] = tz.parameter(np.ones(d))
            p[f"{b}.ln2.b"] = tz.parameter(np.zeros(d))
            p[f"{b}.ffn.w1"] = tz.parameter(_trunc_normal(rng, (d, 4 * d)))
            p[f"{b}.ffn.b1"] = tz.parameter(np.zeros(4 * d))
            p[f"{b}.ffn.w2"] = tz.parameter(_trunc_normal(rng, (4 * d, d)))
            p[f"{b}.ffn.b2"] = tz.parameter(np.zeros(d))
        self.params = p

        # constant pooling matrix: mean over the spatial tokens of each
        # temporal slot (token order is temporal-block major)
        s = cfg.patches_per_block
        pool = np.zeros((self.t_out, self.num_patches))
        for t in range(self.t_out):
            pool[t, t * s : (t + 1) * s] = 1.0 / s
        self._pool = Tensor(pool)

    # -- forward pieces ----------------------------------------------------

    def tokenize(self, frames):
        """Patchify one sequence and project to embed_dim, class token first.

        ``frames`` is a (T, H, W, 3) array or a list of T (H, W, 3) arrays.
        """
        arr = np.asarray(frames, dtype=np.float64)
        cfg = self.cfg
        h, w = cfg.frame_size
        if arr.shape != (self.frames_per_seq, h, w, 3):
            raise ConfigError(
                f"tokenize: expected frames of shape {(self.frames_per_seq, h, w, 3)}, "
                f"got {arr.shape}"
            )
        tp, ps = cfg.temporal_pool, cfg.patch_size
        blocks = arr.reshape(self.t_out, tp, h // ps, ps, w // ps, ps, 3)
        patches = blocks.transpose(0, 2, 4, 1, 3, 5, 6).reshape(self.num_patches, -1)
        projected = tz.add_rowvec(
            tz.matmul(Tensor(patches), self.params["patch_proj.w"]),
            self.params["patch_proj.b"],
        )
        tokens = tz.concat_rows([self.params["cls_token"], projected])
        return tz.add(tokens, self.params["pos_embed"])

    def _block(self, x, i, dropout_rate=0.0, rng=None):
        p = self.params
        b = f"block{i}"
        d = self.cfg.embed_dim
        dh = d // self.cfg.heads
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

    def encode_sequence(self, tokens, dropout_rate=0.0, rng=None):
        """Run the blocks and split class token from pooled temporal tokens.

        depth == 0 leaves the tokens untouched (identity pipeline), so the
        split is the only transformation applied.
        """
        x = tokens
        for i in range(self.cfg.depth):
            x = self._block(x, i, dropout_rate, rng)
        cls = tz.slice_rows(x, 0, 1)
        patch_rows = tz.slice_rows(x, 1, x.shape[0])
        pooled = tz.matmul(self._pool, patch_rows)
        return SequenceEmbedding(tokens=pooled, cls=cls)

    def encode(self, frames, dropout_rate=0.0, rng=None):
        return self.encode_sequence(self.tokenize(frames), dropout_rate, rng)

    # -- parameter plumbing -------------------------------------------------

    def load_state(self, state, prefix=""):
        for name, param in self.params.items():
            key = prefix + name
            if key not in state:
                raise ConfigError(f"checkpoint missing parameter {key!r}")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != param.data.shape:
                raise ConfigError(
                    f"parameter {key!r}: checkpoint shape {arr.shape} vs "
                    f"model shape {param.data.shape}"
                )
            param.data = arr.copy()

    def state(self, prefix=""):
        return {prefix + name: p.data.copy() for name, p in self.params.items()}
