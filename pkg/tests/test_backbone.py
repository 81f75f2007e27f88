import numpy as np
import pytest

from must import tensor as tz
from must.backbone import Backbone, BackboneConfig
from must.errors import ConfigError


def tiny_cfg(**kw):
    base = dict(embed_dim=8, depth=1, heads=2, temporal_pool=2, patch_size=4,
                frame_size=(8, 8))
    base.update(kw)
    return BackboneConfig(**base)


def make(frames=4, seed=0, **kw):
    return Backbone(tiny_cfg(**kw), frames_per_seq=frames,
                    rng=np.random.default_rng(seed))


def frames_for(model, seed=1):
    cfg = model.cfg
    h, w = cfg.frame_size
    return np.random.default_rng(seed).random((model.frames_per_seq, h, w, 3))


# ---------------------------------------------------------------------------
# configuration


def test_config_validates_divisibility():
    with pytest.raises(ConfigError):
        tiny_cfg(patch_size=3)  # 8 % 3 != 0
    with pytest.raises(ConfigError):
        tiny_cfg(embed_dim=9)  # not divisible by heads
    with pytest.raises(ConfigError):
        Backbone(tiny_cfg(), frames_per_seq=5, rng=np.random.default_rng(0))


def test_depth_zero_allowed():
    model = make(depth=0)
    out = model.encode(frames_for(model))
    assert out.tokens.shape == (2, 8)


# ---------------------------------------------------------------------------
# shapes and pooling


def test_encode_shapes():
    model = make(frames=4)  # temporal_pool 2 -> T' = 2
    out = model.encode(frames_for(model))
    assert out.cls.shape == (1, 8)
    assert out.tokens.shape == (2, 8)


def test_token_count():
    model = make(frames=6, temporal_pool=3)
    x = model.tokenize(frames_for(model))
    # 6/3 temporal blocks * (8/4)^2 spatial patches + cls
    assert x.shape == (2 * 4 + 1, 8)


def test_tokenize_rejects_wrong_shape():
    model = make()
    with pytest.raises(ConfigError, match="expected frames"):
        model.tokenize(np.zeros((4, 8, 10, 3)))
    with pytest.raises(ConfigError):
        model.tokenize(np.zeros((3, 8, 8, 3)))


def test_depth_zero_pooled_tokens_are_patch_means():
    """With no blocks, each output token is the mean of its temporal block's
    projected patches (plus position embeddings)."""
    model = make(depth=0)
    frames = frames_for(model)
    out = model.encode(frames)
    x = model.tokenize(frames).data  # (1 + num_patches, D) with pos added
    t_out = model.t_out
    per_block = (x.shape[0] - 1) // t_out
    for b in range(t_out):
        block = x[1 + b * per_block : 1 + (b + 1) * per_block]
        np.testing.assert_allclose(out.tokens.data[b], block.mean(axis=0),
                                   atol=1e-12)
    np.testing.assert_allclose(out.cls.data[0], x[0], atol=1e-12)


def test_cls_token_position_zero_used():
    model = make()
    frames = frames_for(model)
    out1 = model.encode(frames)
    model.params["cls_token"].data = model.params["cls_token"].data + 5.0
    out2 = model.encode(frames)
    assert not np.allclose(out1.cls.data, out2.cls.data)


def test_position_embeddings_break_permutation_symmetry():
    model = make(depth=1)
    frames = frames_for(model)
    base = model.encode(frames).cls.data.copy()
    model.params["pos_embed"].data = np.zeros_like(model.params["pos_embed"].data)
    nopos = model.encode(frames).cls.data
    assert not np.allclose(base, nopos)


def test_init_is_seeded():
    a, b = make(seed=7), make(seed=7)
    c = make(seed=8)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(
        not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params
    )


def test_trunc_normal_init_bounded():
    model = make(seed=3)
    w = model.params["patch_proj.w"].data
    assert np.abs(w).max() <= 2 * 0.02 + 1e-12
    assert model.params["patch_proj.b"].data.sum() == 0.0


# ---------------------------------------------------------------------------
# state round-trip


def test_state_roundtrip_reproduces_output():
    model = make(seed=0)
    frames = frames_for(model)
    want = model.encode(frames).cls.data.copy()
    other = make(seed=99)
    other.load_state(model.state())
    np.testing.assert_array_equal(other.encode(frames).cls.data, want)


def test_load_state_shape_mismatch():
    model = make()
    state = model.state()
    state["cls_token"] = np.zeros((2, 8))
    with pytest.raises(ConfigError, match="cls_token"):
        model.load_state(state)


# ---------------------------------------------------------------------------
# gradients through the whole backbone


def test_backbone_gradient_check():
    model = Backbone(
        BackboneConfig(embed_dim=4, depth=1, heads=2, temporal_pool=2,
                       patch_size=4, frame_size=(4, 4)),
        frames_per_seq=2, rng=np.random.default_rng(5),
    )
    frames = np.random.default_rng(6).random((2, 4, 4, 3))
    params = list(model.params.values())

    def build():
        out = model.encode_sequence(model.tokenize(frames))
        return tz.mean_all(tz.mul(tz.concat_rows([out.cls, out.tokens]),
                                  tz.concat_rows([out.cls, out.tokens])))

    err = tz.grad_check(build, params)
    assert err < 1e-5, err
