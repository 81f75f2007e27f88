import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from must.errors import ConfigError, DataError
from must.sampler import (
    OFFLINE,
    ONLINE,
    PyramidSpec,
    build_pyramid,
    gather_frames,
    strides_from_seconds,
)


def spec(mode=OFFLINE, frames=8, strides=(1, 4), fps=1.0):
    return PyramidSpec(
        num_scales=len(strides), frames_per_seq=frames,
        strides=tuple(strides), mode=mode, fps=fps,
    )


# ---------------------------------------------------------------------------
# stride conversion


def test_strides_from_seconds_rounds_by_fps():
    assert strides_from_seconds((1, 4, 8, 12), fps=1.0) == (1, 4, 8, 12)
    assert strides_from_seconds((1, 4, 8, 12), fps=2.0) == (2, 8, 16, 24)
    assert strides_from_seconds((0.5, 1.5), fps=1.0) == (1, 2)  # floor of 1 frame


def test_default_spec_offline_16_online_24():
    off = PyramidSpec.default(OFFLINE)
    on = PyramidSpec.default(ONLINE)
    assert off.frames_per_seq == 16
    assert on.frames_per_seq == 24
    assert off.strides == (1, 4, 8, 12)
    assert off.num_scales == 4


def test_spec_rejects_nonincreasing_strides():
    with pytest.raises(ConfigError):
        spec(strides=(4, 4))
    with pytest.raises(ConfigError):
        spec(strides=(8, 2))


def test_spec_rejects_bad_mode():
    with pytest.raises(ConfigError):
        spec(mode="sideways")


# ---------------------------------------------------------------------------
# keyframe placement


def test_offline_keyframe_centered():
    s = spec(OFFLINE, frames=8, strides=(1, 3))
    idx = build_pyramid(1000, 500, s)
    for scale, stride in zip(idx.per_scale, s.strides):
        # anchor slot T//2 holds the keyframe
        assert scale[8 // 2] == 500
        diffs = np.diff(scale)
        assert np.all(diffs == stride)


def test_online_keyframe_last():
    s = spec(ONLINE, frames=6, strides=(2, 5))
    idx = build_pyramid(1000, 700, s)
    for scale, stride in zip(idx.per_scale, s.strides):
        assert scale[-1] == 700
        assert np.all(np.diff(scale) == stride)


def test_online_never_looks_ahead():
    s = spec(ONLINE, frames=24, strides=(1, 4, 8, 12))
    for k in (0, 3, 150, 299):
        idx = build_pyramid(300, k, s)
        for scale in idx.per_scale:
            assert max(scale) <= k


def test_offline_clamps_at_boundaries():
    s = spec(OFFLINE, frames=16, strides=(1, 12))
    lo = build_pyramid(300, 0, s)
    hi = build_pyramid(300, 299, s)
    for scale in lo.per_scale + hi.per_scale:
        assert min(scale) >= 0
        assert max(scale) <= 299
    # clamping duplicates the edge frame rather than shrinking the window
    assert lo.per_scale[1][0] == 0
    assert len(lo.per_scale[1]) == 16


def test_keyframe_out_of_range():
    s = spec()
    with pytest.raises(ConfigError):
        build_pyramid(10, 10, s)
    with pytest.raises(ConfigError):
        build_pyramid(10, -1, s)


def test_single_frame_video_collapses_to_keyframe():
    s = spec(OFFLINE, frames=4, strides=(1, 2))
    idx = build_pyramid(1, 0, s)
    for scale in idx.per_scale:
        assert all(i == 0 for i in scale)


# ---------------------------------------------------------------------------
# randomized invariants (the acceptance sweep reuses these checks at volume)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 2000),   # video length
    st.integers(2, 32),     # frames per sequence
    st.integers(1, 20),     # stride
    st.booleans(),          # offline?
    st.integers(0, 10**6),
)
def test_pyramid_invariants(length, frames, stride, offline, salt):
    keyframe = salt % length
    mode = OFFLINE if offline else ONLINE
    s = PyramidSpec(num_scales=1, frames_per_seq=frames, strides=(stride,),
                    mode=mode, fps=1.0)
    idx = build_pyramid(length, keyframe, s)
    (scale,) = idx.per_scale
    assert len(scale) == frames
    assert min(scale) >= 0 and max(scale) < length
    anchor = frames // 2 if mode == OFFLINE else frames - 1
    assert scale[anchor] == keyframe
    assert all(a <= b for a, b in zip(scale, scale[1:]))  # nondecreasing
    if mode == ONLINE:
        assert max(scale) <= keyframe
    # unclamped interior: spacing is exactly the stride
    first = keyframe - anchor * stride
    last = first + (frames - 1) * stride
    if first >= 0 and last < length:
        assert all(b - a == stride for a, b in zip(scale, scale[1:]))


# ---------------------------------------------------------------------------
# gathering


class FlakyStore:
    def __init__(self, n):
        self.n = n

    def frame(self, video_id, idx):
        if not 0 <= idx < self.n:
            raise IndexError(idx)
        return np.full((2, 2, 3), float(idx))


def test_gather_frames_stacks_per_scale():
    s = spec(OFFLINE, frames=4, strides=(1, 2))
    idx = build_pyramid(50, 25, s)
    out = gather_frames(FlakyStore(50), "v", idx)
    assert len(out) == 2
    got = [f[0, 0, 0] for f in out[0]]
    assert got == list(idx.per_scale[0])


def test_gather_frames_wraps_missing_frame():
    s = spec(OFFLINE, frames=4, strides=(1, 2))
    idx = build_pyramid(50, 25, s)
    with pytest.raises(DataError, match="video 'v'"):
        gather_frames(FlakyStore(10), "v", idx)
