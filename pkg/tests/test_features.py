import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurank.dataset import (TEXTURE_STD, SyntheticConfig, blend_glyph, class_palette, glyph_box,
                             render_background)
from spurank.features import (FeatureCache, FeatureCacheError, FeatureMatrix, MockBackbone, extract_features,
                              load_cached_features, make_backbone, mock_backbone_embed,
                              mock_projection)
from spurank.linear_head import TrainConfig, evaluate_accuracy, train_head


def _ids(manifest, split):
    return [r.image_id for r in manifest.split(split)]


def test_feature_matrix_invariants():
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 3)), [0, 1], ["b", "a"])
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 3)), [0, 1], ["a", "a"])
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]), [0], ["a"])
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 3)), [0], ["a", "b"])


def test_mock_embedding_properties():
    bb = MockBackbone()
    img = np.random.default_rng(0).random((64, 64, 3))
    assert np.array_equal(bb.embed(img), bb.embed(img.copy()))
    assert np.array_equal(bb.embed(np.zeros((64, 64, 3))), np.zeros(64))
    v = bb.embed(img)
    assert v.shape == (64,) and abs(v.mean()) < 1e-12 and abs(v.std() - 1) < 1e-12
    # non-multiple sizes are resampled rather than rejected
    assert bb.embed(np.random.default_rng(1).random((50, 70, 3))).shape == (64,)
    with pytest.raises(ValueError):
        bb.embed(np.zeros((8, 8)))


def test_background_colour_changes_vector():
    cfg = SyntheticConfig()
    box = glyph_box(cfg.image_size)
    texture = np.random.default_rng(0).normal(0, TEXTURE_STD, (64, 64, 3))
    vecs = []
    for colour in class_palette(cfg.num_classes):
        bg = np.clip(colour + texture, 0, 1)
        vecs.append(mock_backbone_embed(blend_glyph(bg, 0, 0.3, box)))
    for i in range(len(vecs)):
        for j in range(i):
            assert not np.allclose(vecs[i], vecs[j])


def test_projection_depends_on_seed():
    assert np.array_equal(mock_projection(64, 0), mock_projection(64, 0))
    assert not np.array_equal(mock_projection(64, 0), mock_projection(64, 1))
    assert make_backbone("mock:32").d == 32
    assert make_backbone("mock").backbone_id == "mock-backbone/v1/d64/s0"


def test_cache_warm_and_subset(small_fixture, tmp_path):
    cfg, root, manifest, truth = small_fixture
    ids = _ids(manifest, "train")
    cold_bb = MockBackbone()
    cold = extract_features(ids, manifest, cold_bb, tmp_path / "f.bin")
    assert cold_bb.calls == len(ids)
    warm_bb = MockBackbone()
    warm = extract_features(ids, manifest, warm_bb, tmp_path / "f.bin")
    assert warm_bb.calls == 0
    assert np.array_equal(warm.values, cold.values) and warm.values.tobytes() == cold.values.tobytes()
    assert warm.image_ids == cold.image_ids and np.array_equal(warm.labels, cold.labels)
    sub = ids[::3]
    part = extract_features(sub, manifest, MockBackbone())
    assert np.array_equal(part.values, cold.take(sub).values)
    assert np.array_equal(load_cached_features(tmp_path / "f.bin", sub, manifest).values,
                          part.values)


def test_empty_request(small_fixture):
    cfg, root, manifest, truth = small_fixture
    fm = extract_features([], manifest, MockBackbone(d=17))
    assert fm.values.shape == (0, 17)


def test_cache_refuses_other_backbone(small_fixture, tmp_path):
    cfg, root, manifest, truth = small_fixture
    ids = _ids(manifest, "val")[:3]
    extract_features(ids, manifest, MockBackbone(), tmp_path / "f.bin")
    with pytest.raises(FeatureCacheError, match="refusing"):
        extract_features(ids, manifest, MockBackbone(seed=1), tmp_path / "f.bin")
    with pytest.raises(KeyError):
        extract_features(["nope"], manifest, MockBackbone())


def test_cache_survives_torn_append(small_fixture, tmp_path):
    cfg, root, manifest, truth = small_fixture
    ids = _ids(manifest, "val")
    path = tmp_path / "f.bin"
    full = extract_features(ids, manifest, MockBackbone(), path)
    first = extract_features(ids[:5], manifest, MockBackbone())
    # simulate a crash mid-append: half a row, and a partial index line
    p2 = tmp_path / "g.bin"
    extract_features(ids[:5], manifest, MockBackbone(), p2)
    with open(p2, "ab") as fh:
        fh.write(b"\x00" * 100)
    with open(str(p2) + ".idx", "ab") as fh:
        fh.write(b'{"image_id":"x"')
    again = extract_features(ids, manifest, MockBackbone(), p2)
    assert np.array_equal(again.values, full.values)
    assert np.array_equal(again.take(ids[:5]).values, first.values)


def test_parallel_extraction_identical(small_fixture, tmp_path, monkeypatch):
    cfg, root, manifest, truth = small_fixture
    ids = _ids(manifest, "train")
    serial = extract_features(ids, manifest, MockBackbone(), tmp_path / "a.bin")
    monkeypatch.setenv("SPURANK_THREADS", "4")
    par = extract_features(ids, manifest, MockBackbone(), tmp_path / "b.bin")
    assert np.array_equal(serial.values, par.values)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_subprocess_backbone_matches_mock(small_fixture):
    cfg, root, manifest, truth = small_fixture
    ids = _ids(manifest, "val")[:6]
    bb = make_backbone(f"{sys.executable} -m spurank mock-backbone --d 24")
    try:
        assert bb.d == 24
        via_pipe = extract_features(ids, manifest, bb)
    finally:
        bb.close()
    direct = extract_features(ids, manifest, MockBackbone(d=24))
    assert np.array_equal(via_pipe.values, direct.values)


def test_planted_shortcut_is_learnable():
    # heavily occluded, background-correlated images are separable by palette alone
    cfg = SyntheticConfig(num_classes=10, seed=4)
    box = glyph_box(cfg.image_size)
    rng = np.random.default_rng(0)
    X, y = [], []
    for c in range(cfg.num_classes):
        for j in range(40):
            bg, corr, bg_class = render_background(cfg, c, "train", f"sc-{c}-{j}")
            if not corr:
                continue
            X.append(mock_backbone_embed(blend_glyph(bg, c, rng.uniform(0.9, 1.0), box)))
            y.append(c)
    fm = FeatureMatrix(np.array(X), y, [f"r{i:04d}" for i in range(len(y))])
    head = train_head(fm, TrainConfig())
    assert evaluate_accuracy(head, fm).accuracy >= 0.95


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_embedding_finite_and_standardised(seed, scale):
    img = np.random.default_rng(seed).random((32, 32, 3)) * scale
    v = mock_backbone_embed(img)
    assert np.all(np.isfinite(v))
    assert abs(v.std() - 1) < 1e-9


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=15, unique=True))
def test_cache_round_trip_bit_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("fc") / "c.bin"
    cache = FeatureCache(path, "t", 5)
    rng = np.random.default_rng(len(rows))
    data = {f"i{r}": rng.normal(size=5).astype(np.float32) for r in rows}
    for k, v in data.items():
        cache.append(k, v)
    idx = FeatureCache(path, "t", 5).index()
    got = cache.read_rows([idx[k] for k in data])
    assert np.array_equal(got, np.stack(list(data.values())))
