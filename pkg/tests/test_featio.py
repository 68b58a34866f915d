import hashlib
import os

import numpy as np
import pytest

from anchorsplat import featio
from anchorsplat.featio import (CameraRing, FeatureFormatError, FeatureMap, feature_file_size,
                                load_feature_map, save_feature_map, synth_features, synth_scene)
from anchorsplat.membank import build_bank
from anchorsplat.model import bank_from_views

RING = CameraRing(count=4, image_size=24)
MODELS = {"a": 16, "b": 32}


@pytest.fixture(scope="module")
def data():
    return synth_scene(0, 3, 600, RING, MODELS)


def test_deterministic(data):
    again = synth_scene(0, 3, 600, RING, MODELS)
    assert np.array_equal(again.points, data.points)
    for x, y in zip(again.images, data.images):
        assert x.tobytes() == y.tobytes()
    for x, y in zip(again.features, data.features):
        assert all(x[t].data.tobytes() == y[t].data.tobytes() for t in MODELS)


def test_points_inside_ellipsoids(data):
    inside = np.zeros(len(data.points), bool)
    for obj in data.scene.objects:
        local = (data.points - obj.center) @ obj.rotation()
        inside |= ((local / obj.radii) ** 2).sum(axis=1) <= 1 + 1e-9
    assert inside.all()


def test_single_object_visible():
    d = synth_scene(4, 1, 100, RING, MODELS)
    obj = d.scene.objects[0]
    img = d.images[0]
    # lit pixels are the object colour times a shading factor in [0.7, 1]
    ratio = img / np.asarray(obj.rgb)
    lit = (np.ptp(ratio, axis=-1) < 1e-9) & (ratio[..., 0] >= 0.7 - 1e-9) & (ratio[..., 0] <= 1 + 1e-9)
    assert lit.sum() >= 1
    assert (d.semantic[0] == obj.semantic_id).sum() >= 1


def test_feature_maps(data):
    for view, sem in enumerate(data.semantic):
        for tag in MODELS:
            f = data.features[view][tag].data
            np.testing.assert_allclose(np.linalg.norm(f, axis=-1), 1, atol=1e-6)
            for sid in np.unique(sem):
                rows = f[sem == sid]
                assert (rows == rows[0]).all()


def test_different_objects_dissimilar(data):
    f = data.features[0]["a"].data.reshape(-1, 16)
    sem = data.semantic[0].reshape(-1)
    reps = np.array([f[sem == s][0] for s in np.unique(sem)])
    sims = reps @ reps.T
    np.fill_diagonal(sims, -1)
    assert len(reps) >= 2 and sims.max() < 0.5


def test_provider_shares_visibility(data):
    cam = data.cameras[1]
    fm = synth_features(data.scene, cam, "a", 16)
    assert np.array_equal(fm.data, data.features[1]["a"].data)
    with pytest.raises(ValueError):
        synth_features(data.scene, cam, "a", 1)


def test_bank_has_one_entry_per_region(data):
    bank = bank_from_views(data.features, 0.9)
    for tag in MODELS:
        assert len(bank[tag]) == 4
        stream = np.concatenate([fv[tag].data.reshape(-1, MODELS[tag]) for fv in data.features])
        assert len(build_bank(np.unique(stream, axis=0), 1 - 1e-9)) == 4


def test_alpha_coverage(data):
    for a, sem in zip(data.alphas, data.semantic):
        assert a.min() >= 0 and a.max() <= 1
        assert (a[sem > 0] > 0).all()


def test_zero_objects_rejected():
    with pytest.raises(ValueError):
        synth_scene(0, 0)


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        fm = FeatureMap("clip", np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32))
        save_feature_map(tmp_path / "f.cusf", fm)
        back = load_feature_map(tmp_path / "f.cusf")
        assert back.tag == "clip" and back.data.tobytes() == fm.data.tobytes()

    def test_size_formula(self, tmp_path):
        fm = FeatureMap("m", np.zeros((64, 64, 160), np.float32))
        save_feature_map(tmp_path / "f.cusf", fm)
        size = os.path.getsize(tmp_path / "f.cusf")
        assert size == feature_file_size("m", 64, 64, 160) == 4 + 4 + 1 + 1 + 12 + 64 * 64 * 160 * 4

    def test_truncated(self, tmp_path):
        fm = FeatureMap("m", np.zeros((2, 2, 4), np.float32))
        save_feature_map(tmp_path / "f.cusf", fm)
        buf = (tmp_path / "f.cusf").read_bytes()
        (tmp_path / "t.cusf").write_bytes(buf[:-4])
        with pytest.raises(FeatureFormatError, match=f"expected {len(buf)} bytes total, got {len(buf) - 4}"):
            load_feature_map(tmp_path / "t.cusf")
        (tmp_path / "h.cusf").write_bytes(buf[:5])
        with pytest.raises(FeatureFormatError, match="truncated"):
            load_feature_map(tmp_path / "h.cusf")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.cusf").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FeatureFormatError, match="magic"):
            load_feature_map(tmp_path / "x.cusf")

    def test_nearest_resize(self):
        d = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        small = FeatureMap("m", d).resized(2, 2).data[..., 0]
        np.testing.assert_array_equal(small, [[5, 7], [13, 15]])


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


def test_scene_dir_round_trip(tmp_path, data):
    featio.write_scene_dir(tmp_path / "a", data)
    featio.write_scene_dir(tmp_path / "b", synth_scene(0, 3, 600, RING, MODELS))
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    back = featio.read_scene_dir(tmp_path / "a")
    assert len(back.cameras) == 4 and list(back.features[0]) == list(MODELS)
    for x, y in zip(back.images, data.images):
        assert np.abs(x - y).max() <= 0.5 / 255 + 1e-12
    for x, y in zip(back.alphas, data.alphas):
        assert np.abs(x - y).max() <= 0.5 / 255 + 1e-12
    assert back.features[2]["b"].data.tobytes() == data.features[2]["b"].data.tobytes()
    assert featio.missing_feature_tags(tmp_path / "a", ["a", "zz"], 4) == ["zz"]
