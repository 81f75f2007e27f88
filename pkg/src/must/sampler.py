"""Temporal multi-scale pyramid sampling.

A pyramid is N sub-sequences of T frame indices taken around a keyframe at
strictly increasing strides. Offline placement centers the keyframe,
online placement puts it last and never looks ahead. Indices that fall
outside the video are clamped to the first/last frame, which keeps the
sequence length and the keyframe slot fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DataError

OFFLINE = "offline"
ONLINE = "online"

# default pyramid: 4 scales at 1/4/8/12 second strides, 16 frames offline
# and 24 frames online
DEFAULT_STRIDE_SECONDS = (1.0, 4.0, 8.0, 12.0)
DEFAULT_FRAMES_OFFLINE = 16
DEFAULT_FRAMES_ONLINE = 24


def strides_from_seconds(stride_seconds, fps):
    """Convert per-scale strides in seconds to frame strides (>= 1 each)."""
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}")
    return tuple(max(1, int(round(s * fps))) for s in stride_seconds)


@dataclass(frozen=True)
class PyramidSpec:
    """Static description of the pyramid: scale count, length, strides, mode."""

    num_scales: int
    frames_per_seq: int
    strides: tuple  # frame strides, one per scale
    mode: str = OFFLINE
    fps: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.num_scales < 1:
            raise ConfigError(f"num_scales must be >= 1, got {self.num_scales}")
        if self.frames_per_seq < 1:
            raise ConfigError(f"frames_per_seq must be >= 1, got {self.frames_per_seq}")
        if len(self.strides) != self.num_scales:
            raise ConfigError(
                f"expected {self.num_scales} strides, got {len(self.strides)}"
            )
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"strides must be positive, got {self.strides}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigError(f"strides must be strictly increasing, got {self.strides}")
        if self.mode not in (OFFLINE, ONLINE):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")

    @classmethod
    def default(cls, mode=OFFLINE, fps=1.0, stride_seconds=DEFAULT_STRIDE_SECONDS,
                frames_per_seq=None):
        frames = frames_per_seq
        if frames is None:
            frames = DEFAULT_FRAMES_OFFLINE if mode == OFFLINE else DEFAULT_FRAMES_ONLINE
        return cls(
            num_scales=len(stride_seconds),
            frames_per_seq=frames,
            strides=strides_from_seconds(stride_seconds, fps),
            mode=mode,
            fps=fps,
        )


@dataclass(frozen=True)
class PyramidIndices:
    """Resolved frame indices, one tuple of T indices per scale."""

    per_scale: tuple
    keyframe: int


def build_pyramid(video_length, keyframe, spec):
    """Place the keyframe and resolve clamped indices for every scale.

    Offline: index(t) = keyframe + (t - T//2) * stride.
    Online:  index(t) = keyframe - (T-1-t) * stride. Both clamped into
    [0, video_length); online never exceeds the keyframe by construction.
    """
    if not 0 <= keyframe < video_length:
        raise ConfigError(
            f"keyframe {keyframe} out of range for video of length {video_length}"
        )
    T = spec.frames_per_seq
    anchor = T // 2 if spec.mode == OFFLINE else T - 1
    last = video_length - 1
    per_scale = []
    for stride in spec.strides:
        idx = tuple(
            min(max(keyframe + (t - anchor) * stride, 0), last) for t in range(T)
        )
        per_scale.append(idx)
    return PyramidIndices(per_scale=tuple(per_scale), keyframe=keyframe)


def gather_frames(store, video_id, indices):
    """Fetch the frames behind a PyramidIndices, one array stack per scale.

    Duplicate indices (from clamping) are returned as-is; a missing frame
    surfaces as a DataError naming it.
    """
    out = []
    for scale in indices.per_scale:
        frames = []
        for idx in scale:
            try:
                frames.append(store.frame(video_id, idx))
            except (KeyError, FileNotFoundError, IndexError) as exc:
                raise DataError(f"missing frame {idx} of video {video_id!r}") from exc
        out.append(frames)
    return out
