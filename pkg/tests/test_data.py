import numpy as np
import pytest

from must.backbone import BackboneConfig
from must.data import (
    DirectoryFrameStore,
    EmbeddingStore,
    EmbeddingStoreWriter,
    InMemoryFrameStore,
    PyramidSampleDataset,
    SyntheticSpec,
    WindowSampleDataset,
    extract_embeddings,
    generate_synthetic,
    load_annotations,
    phase_patterns,
    save_annotations,
    save_frames,
    split_videos,
)
from must.errors import ConfigError, DataError
from must.mtam import MtamConfig, MultiTermEncoder
from must.sampler import PyramidSpec


def small_spec(**kw):
    base = dict(num_videos=3, frames_per_video=24, num_phases=3,
                min_segment=4, max_segment=8, noise_std=0.1,
                frame_size=(8, 8), seed=1)
    base.update(kw)
    return SyntheticSpec(**base)


# ---------------------------------------------------------------------------
# synthetic generation


def test_generate_shapes_and_range():
    videos, labels = generate_synthetic(small_spec())
    assert sorted(videos) == ["video000", "video001", "video002"]
    for vid, frames in videos.items():
        assert frames.shape == (24, 8, 8, 3)
        assert frames.min() >= 0.0 and frames.max() <= 1.0
        assert labels[vid].shape == (24,)
        assert set(np.unique(labels[vid])) <= {0, 1, 2}


def test_generate_deterministic():
    v1, l1 = generate_synthetic(small_spec())
    v2, l2 = generate_synthetic(small_spec())
    for vid in v1:
        np.testing.assert_array_equal(v1[vid], v2[vid])
        np.testing.assert_array_equal(l1[vid], l2[vid])


def test_generate_seed_changes_content():
    v1, _ = generate_synthetic(small_spec(seed=1))
    v2, _ = generate_synthetic(small_spec(seed=2))
    assert any(not np.array_equal(v1[v], v2[v]) for v in v1)


def test_segments_respect_bounds_and_cycle():
    _, labels = generate_synthetic(small_spec(frames_per_video=200))
    for lab in labels.values():
        runs = []
        start = 0
        for i in range(1, len(lab)):
            if lab[i] != lab[i - 1]:
                runs.append((lab[start], i - start))
                start = i
        runs.append((lab[start], len(lab) - start))
        # all but the final (possibly truncated) run are in bounds
        for phase, length in runs[:-1]:
            assert 4 <= length <= 8
        # phases advance cyclically
        for (a, _), (b, _) in zip(runs, runs[1:]):
            assert b == (a + 1) % 3


def test_phase_patterns_orthogonal():
    base = phase_patterns(4, (32, 32))
    flat = (base - base.mean(axis=0, keepdims=True)).reshape(4, -1)
    gram = flat @ flat.T
    off = gram - np.diag(np.diag(gram))
    # disjoint bands: centered patterns correlate only through the shared mean
    assert np.all(np.diag(gram) > 0)
    assert np.abs(off).max() < np.diag(gram).min()


def test_zero_noise_frames_equal_patterns():
    videos, labels = generate_synthetic(small_spec(noise_std=0.0))
    base = phase_patterns(3, (8, 8))
    for vid in videos:
        for t in (0, 10, 23):
            np.testing.assert_array_equal(videos[vid][t], base[labels[vid][t]])


def test_spec_validation():
    with pytest.raises(ConfigError):
        small_spec(min_segment=9, max_segment=8)
    with pytest.raises(ConfigError):
        small_spec(num_phases=1)
    with pytest.raises(ConfigError):
        small_spec(noise_std=-0.1)


# ---------------------------------------------------------------------------
# frame stores


def test_in_memory_store_basics():
    videos, _ = generate_synthetic(small_spec())
    store = InMemoryFrameStore(videos)
    assert store.video_ids() == sorted(videos)
    assert store.num_frames("video001") == 24
    np.testing.assert_array_equal(store.frame("video001", 3), videos["video001"][3])
    with pytest.raises(DataError):
        store.num_frames("nope")


def test_directory_store_roundtrip(tmp_path):
    videos, _ = generate_synthetic(small_spec())
    save_frames(videos, tmp_path)
    store = DirectoryFrameStore(tmp_path)
    assert store.video_ids() == sorted(videos)
    assert store.num_frames("video000") == 24
    # 8-bit quantization: within half a level
    got = store.frame("video000", 5)
    np.testing.assert_allclose(got, videos["video000"][5], atol=0.5 / 255 + 1e-12)


def test_directory_store_missing_root(tmp_path):
    with pytest.raises(DataError):
        DirectoryFrameStore(tmp_path / "missing")


def test_png_roundtrip_is_exact_for_quantized_values(tmp_path):
    # values already on the 8-bit grid survive the store untouched
    frames = np.round(np.random.default_rng(0).random((2, 8, 8, 3)) * 255) / 255
    save_frames({"v": frames}, tmp_path)
    store = DirectoryFrameStore(tmp_path)
    np.testing.assert_array_equal(store.frame("v", 0), frames[0])
    np.testing.assert_array_equal(store.frame("v", 1), frames[1])


# ---------------------------------------------------------------------------
# annotations


def test_annotations_roundtrip(tmp_path):
    _, labels = generate_synthetic(small_spec())
    path = tmp_path / "ann.csv"
    save_annotations(path, labels)
    back = load_annotations(path, num_classes=3)
    assert sorted(back) == sorted(labels)
    for vid in labels:
        np.testing.assert_array_equal(back[vid], labels[vid])


def test_annotations_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("video,frame,phase\nv,0,0\n")
    with pytest.raises(DataError, match="header"):
        load_annotations(path)


def test_annotations_gap_detected(tmp_path):
    path = tmp_path / "gap.csv"
    path.write_text("video_id,frame_idx,phase_id\nv,0,0\nv,2,1\n")
    with pytest.raises(DataError, match="contiguous"):
        load_annotations(path)


def test_annotations_phase_out_of_range(tmp_path):
    path = tmp_path / "oob.csv"
    path.write_text("video_id,frame_idx,phase_id\nv,0,7\n")
    with pytest.raises(DataError, match=":2"):
        load_annotations(path, num_classes=3)


def test_annotations_non_integer(tmp_path):
    path = tmp_path / "txt.csv"
    path.write_text("video_id,frame_idx,phase_id\nv,zero,0\n")
    with pytest.raises(DataError, match="non-integer"):
        load_annotations(path)


# ---------------------------------------------------------------------------
# embedding store


def test_embedding_store_roundtrip(tmp_path):
    path = tmp_path / "emb.bin"
    g = np.random.default_rng(3)
    a, b = g.random((10, 6)), g.random((4, 6))
    with EmbeddingStoreWriter(path, width=6) as w:
        w.add_video("a", a)
        w.add_video("b", b)
    store = EmbeddingStore(path)
    assert store.width == 6
    assert store.video_ids() == ["a", "b"]
    np.testing.assert_array_equal(store.get("a"), a)
    np.testing.assert_array_equal(store.get("b"), b)
    with pytest.raises(DataError):
        store.get("c")


def test_embedding_store_width_mismatch(tmp_path):
    path = tmp_path / "emb.bin"
    with EmbeddingStoreWriter(path, width=4) as w:
        with pytest.raises(DataError, match="shape"):
            w.add_video("a", np.zeros((3, 5)))
        w.add_video("a", np.zeros((3, 4)))


def test_embedding_store_duplicate_video(tmp_path):
    path = tmp_path / "emb.bin"
    with EmbeddingStoreWriter(path, width=2) as w:
        w.add_video("a", np.zeros((1, 2)))
        with pytest.raises(DataError, match="duplicate"):
            w.add_video("a", np.zeros((1, 2)))


def test_embedding_store_bad_magic(tmp_path):
    path = tmp_path / "emb.bin"
    with EmbeddingStoreWriter(path, width=2) as w:
        w.add_video("a", np.ones((2, 2)))
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError, match="magic"):
        EmbeddingStore(path)


def test_embedding_store_header_index_disagreement(tmp_path):
    path = tmp_path / "emb.bin"
    with EmbeddingStoreWriter(path, width=2) as w:
        w.add_video("a", np.ones((2, 2)))
    idx = path.with_name("emb.bin.index.json")
    idx.write_text(idx.read_text().replace('"width": 2', '"width": 3'))
    with pytest.raises(DataError, match="disagrees"):
        EmbeddingStore(path)


def test_embedding_store_missing_index(tmp_path):
    path = tmp_path / "emb.bin"
    with EmbeddingStoreWriter(path, width=2) as w:
        w.add_video("a", np.ones((2, 2)))
    (tmp_path / "emb.bin.index.json").unlink()
    with pytest.raises(DataError, match="index"):
        EmbeddingStore(path)


def test_extract_embeddings_one_row_per_frame():
    videos, _ = generate_synthetic(small_spec(num_videos=2, frames_per_video=6))
    store = InMemoryFrameStore(videos)
    model = MultiTermEncoder(
        BackboneConfig(embed_dim=4, depth=0, heads=2, temporal_pool=2,
                       patch_size=4, frame_size=(8, 8)),
        MtamConfig(num_scales=2, embed_dim=4, num_classes=3),
        frames_per_seq=2,
    )
    spec = PyramidSpec(num_scales=2, frames_per_seq=2, strides=(1, 2),
                       mode="offline", fps=1.0)
    out = extract_embeddings(model, store, spec)
    assert sorted(out) == sorted(videos)
    for rows in out.values():
        assert rows.shape == (6, 8)
        assert np.isfinite(rows).all()


# ---------------------------------------------------------------------------
# datasets


def test_pyramid_dataset_items():
    videos, labels = generate_synthetic(small_spec())
    store = InMemoryFrameStore(videos)
    spec = PyramidSpec(num_scales=2, frames_per_seq=4, strides=(1, 3),
                       mode="offline", fps=1.0)
    ds = PyramidSampleDataset(store, labels, spec, keyframe_stride=5)
    assert len(ds) == 3 * len(range(0, 24, 5))
    frames, label = ds[0]
    assert len(frames) == 2
    assert len(frames[0]) == 4
    assert label == labels["video000"][0]


def test_pyramid_dataset_video_subset():
    videos, labels = generate_synthetic(small_spec())
    store = InMemoryFrameStore(videos)
    spec = PyramidSpec(num_scales=1, frames_per_seq=2, strides=(1,),
                       mode="online", fps=1.0)
    ds = PyramidSampleDataset(store, labels, spec, keyframe_stride=6,
                              video_ids=["video001"])
    assert len(ds) == 4
    assert all(vid == "video001" for vid, _ in ds.samples)


def test_pyramid_dataset_label_mismatch():
    videos, labels = generate_synthetic(small_spec())
    labels["video000"] = labels["video000"][:-1]
    with pytest.raises(DataError, match="video000"):
        PyramidSampleDataset(InMemoryFrameStore(videos), labels,
                             PyramidSpec(num_scales=1, frames_per_seq=2,
                                         strides=(1,), mode="offline", fps=1.0))


def test_window_dataset_covers_all_frames():
    g = np.random.default_rng(4)
    emb = {"a": g.random((30, 5)), "b": g.random((8, 5))}
    labels = {"a": g.integers(0, 2, 30), "b": g.integers(0, 2, 8)}
    ds = WindowSampleDataset(emb, labels, window_length=10, overlap=8)
    covered = {"a": np.zeros(30, dtype=bool), "b": np.zeros(8, dtype=bool)}
    for vid, start, fp in ds.samples:
        covered[vid][start : start + fp] = True
    assert all(c.all() for c in covered.values())
    window, labs = ds[0]
    assert window.shape[0] == labs.shape[0]


def test_split_videos_deterministic():
    ids = [f"v{i}" for i in range(6)]
    train, heldout = split_videos(ids, 2)
    assert train == ["v0", "v1", "v2", "v3"]
    assert heldout == ["v4", "v5"]
    with pytest.raises(ConfigError):
        split_videos(ids, 6)
    with pytest.raises(ConfigError):
        split_videos(ids, 0)
