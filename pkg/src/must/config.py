"""Flat key=value run configuration with typed coercion and overrides.

Precedence: built-in defaults < config file < --set/flag overrides. Every
key maps to one RunConfig field; unknown keys are rejected by name so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .sampler import DEFAULT_FRAMES_OFFLINE, DEFAULT_FRAMES_ONLINE, OFFLINE, ONLINE

MODE_COVERAGE = {OFFLINE: 0.10, ONLINE: 0.05}


@dataclass
class RunConfig:
    # global
    mode: str = OFFLINE
    fps: float = 1.0
    seed: int = 7
    # synthetic corpus
    num_videos: int = 20
    frames_per_video: int = 300
    num_phases: int = 4
    min_segment: int = 30
    max_segment: int = 90
    noise_std: float = 0.1
    frame_height: int = 32
    frame_width: int = 32
    # pyramid sampling (frames_per_seq 0 means the mode default, 16/24)
    num_scales: int = 4
    stride_seconds: tuple = (1.0, 4.0, 8.0, 12.0)
    frames_per_seq: int = 0
    # backbone
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    temporal_pool: int = 2
    patch_size: int = 8
    # consistency module (window_coverage 0 means the mode default, .10/.05)
    tcm_depth: int = 2
    tcm_heads: int = 4
    tcm_ff_mult: int = 4
    window_coverage: float = 0.0
    overlap_frac: float = 0.9
    # training
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    mtfe_epochs: int = 5
    tcm_epochs: int = 20
    batch_size: int = 8
    keyframe_stride: int = 1
    dropout: float = 0.0
    # evaluation split
    num_heldout: int = 4

    def validate(self):
        if self.mode not in (OFFLINE, ONLINE):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        if len(self.stride_seconds) != self.num_scales:
            raise ConfigError(
                f"num_scales is {self.num_scales} but stride_seconds has "
                f"{len(self.stride_seconds)} entries"
            )
        positive = [
            "fps", "num_videos", "frames_per_video", "num_phases",
            "min_segment", "max_segment", "frame_height", "frame_width",
            "num_scales", "embed_dim", "heads", "temporal_pool", "patch_size",
            "tcm_depth", "tcm_heads", "tcm_ff_mult", "lr0", "weight_decay",
            "batch_size", "keyframe_stride", "num_heldout",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("seed", "frames_per_seq", "depth", "mtfe_epochs",
                     "tcm_epochs", "noise_std", "window_coverage"):
            if getattr(self, name) < 0:
                raise ConfigError(
                    f"{name} must be >= 0, got {getattr(self, name)}"
                )
        if not 0 <= self.overlap_frac < 1:
            raise ConfigError(
                f"overlap_frac must lie in [0, 1), got {self.overlap_frac}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    # -- mode-dependent resolution -------------------------------------------

    def resolved_frames_per_seq(self):
        if self.frames_per_seq:
            return self.frames_per_seq
        return DEFAULT_FRAMES_OFFLINE if self.mode == OFFLINE else DEFAULT_FRAMES_ONLINE

    def resolved_coverage(self):
        return self.window_coverage or MODE_COVERAGE[self.mode]

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    f = _FIELDS[key]
    raw = raw.strip()
    try:
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "tuple":
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config_file(path):
    """Read `key = value` lines; blank lines and # comments are skipped."""
    values = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        values[key.strip()] = value.strip()
    return values


def parse_set_args(pairs):
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(*value_maps):
    """Merge raw string maps (later wins), coerce, and validate."""
    cfg = RunConfig()
    for values in value_maps:
        for key, raw in values.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw))
    return cfg.validate()
