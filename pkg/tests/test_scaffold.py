import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat import diffcore as dc
from anchorsplat.scaffold import (Camera, DegenerateDirectionError, FormatError,
                                  InitializationError, decode_anchors, encode_anchors,
                                  gaussian_positions, inverse_softplus, read_ply, viewing_direction,
                                  voxelize, write_ply)
from conftest import numeric_grad


def test_two_points_share_a_cell():
    sc = voxelize([(0.004, 0.004, 0.004), (0.006, 0.006, 0.006)], 0.01)
    assert len(sc) == 1
    np.testing.assert_allclose(sc.centers[0], [0.005, 0.005, 0.005])


def test_distinct_cells():
    assert len(voxelize([(0, 0, 0), (0.02, 0, 0)], 0.01)) == 2


def test_count_matches_set_oracle():
    pts = np.random.default_rng(3).random((10_000, 3))
    oracle = {(int(np.floor(x / 0.05)), int(np.floor(y / 0.05)), int(np.floor(z / 0.05)))
              for x, y, z in pts}
    assert len(voxelize(pts, 0.05)) == len(oracle)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.05, 0.1, 0.3]))
def test_count_matches_set_oracle_property(seed, l):
    pts = np.random.default_rng(seed).normal(size=(200, 3))
    oracle = {tuple(np.floor(p / l).astype(int)) for p in pts}
    sc = voxelize(pts, l)
    assert len(sc) == len(oracle)
    for i, c in enumerate(sc.centers):
        assert sc.lookup(c) == i


def test_voxelize_errors():
    with pytest.raises(InitializationError):
        voxelize([(0, 0, 0)], 0.0)
    with pytest.raises(InitializationError):
        voxelize(np.zeros((0, 3)), 0.1)


def test_init_ranges():
    sc = voxelize(np.random.default_rng(0).random((500, 3)), 0.1, n_per_anchor=5, d_f=8)
    assert sc.latents.shape == (len(sc), 8)
    assert np.abs(sc.offsets.data).max() <= 0.5
    np.testing.assert_allclose(np.logaddexp(0, sc.scale_raw.data), 0.1)
    groups = [p.group for p in sc.params()]
    assert len(groups) == len(set(groups))


def test_positions_zero_offset():
    sc = voxelize([(0.1, 0.2, 0.3), (0.5, 0.5, 0.5)], 0.1, n_per_anchor=4)
    sc.offsets.assign(np.zeros_like(sc.offsets.data))
    mu = gaussian_positions(sc).data.reshape(len(sc), 4, 3)
    np.testing.assert_allclose(mu, np.repeat(sc.centers[:, None], 4, axis=1))


def test_positions_unit_offset_times_scale():
    l = 0.01
    sc = voxelize([(0.0, 0.0, 0.0)], l, n_per_anchor=3)
    off = np.zeros((1, 9))
    off[0, 0] = 1.0
    sc.offsets.assign(off)
    sc.scale_raw.assign(np.full((1, 3), inverse_softplus(l)))
    mu = gaussian_positions(sc).data
    np.testing.assert_allclose(mu[0], sc.centers[0] + [l, 0, 0], atol=1e-15)


def test_positions_gradient():
    sc = voxelize(np.random.default_rng(1).random((30, 3)), 0.3, n_per_anchor=3)
    dc.backward(dc.total(gaussian_positions(sc)))
    grad = sc.offsets.grad.copy()
    off0 = sc.offsets.data.copy()

    def f(x):
        sc.offsets.assign(x)
        return float(gaussian_positions(sc).data.sum())

    num = numeric_grad(f, off0)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_revoxelized_positions_bounded_by_gaussian_count(seed):
    rng = np.random.default_rng(seed)
    sc = voxelize(rng.random((50, 3)), 0.2, n_per_anchor=4, rng=rng)
    mu = gaussian_positions(sc).data
    assert len(voxelize(mu, 0.2)) <= len(mu)


class TestViewingDirection:
    def cam(self, eye, target):
        return Camera.look_at(0, eye, target, [0, 1, 0], 10, 10, 8, 8)

    def test_axis_cases(self):
        np.testing.assert_allclose(viewing_direction([0, 0, 2], self.cam([0, 0, 0], [0, 0, 1])),
                                   [[0, 0, 1]], atol=1e-15)
        np.testing.assert_allclose(viewing_direction([0, 0, 0], self.cam([1, 0, 0], [0, 0, 0])),
                                   [[-1, 0, 0]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unit_norm(self, seed):
        rng = np.random.default_rng(seed)
        cam = self.cam(rng.normal(size=3) * 3 + [0, 0, 5], [0, 0, 0])
        d = viewing_direction(rng.normal(size=(5, 3)), cam)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateDirectionError):
            viewing_direction([1, 2, 3], self.cam([1, 2, 3], [0, 0, 0]))


class TestCamera:
    def test_look_at_center_and_axes(self):
        cam = Camera.look_at(2, [1, 2, 3], [0, 0, 0], [0, 0, 1], 20, 20, 16, 12)
        np.testing.assert_allclose(cam.center, [1, 2, 3], atol=1e-12)
        fwd = cam.rotation[2]
        np.testing.assert_allclose(fwd, -np.array([1, 2, 3]) / np.sqrt(14), atol=1e-12)
        assert (cam.cx, cam.cy) == (8.0, 6.0)

    def test_dict_round_trip(self):
        cam = Camera.look_at(2, [1, 2, 3], [0, 0, 0], [0, 0, 1], 20, 21, 16, 12)
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        assert back.fy == 21 and back.width == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            Camera(0, 1, 1, 0, 0, np.eye(3) * 2, np.zeros(3), 4, 4)
        with pytest.raises(ValueError):
            Camera(0, 0, 1, 0, 0, np.eye(3), np.zeros(3), 4, 4)

    def test_resized(self):
        cam = Camera(0, 10, 12, 4, 4, np.eye(3), np.zeros(3), 8, 8).resized(4, 4)
        assert (cam.fx, cam.fy, cam.cx, cam.cy) == (5, 6, 2, 2)


class TestPly:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        write_ply(tmp_path / "p.ply", pts)
        np.testing.assert_allclose(read_ply(tmp_path / "p.ply"), pts, rtol=1e-6, atol=1e-7)

    def test_extra_properties_ignored(self, tmp_path):
        text = ("ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\n"
                "property float x\nproperty float y\nproperty float z\nend_header\n"
                "9 1 2 3\n9 4 5 6\n")
        (tmp_path / "p.ply").write_text(text)
        np.testing.assert_array_equal(read_ply(tmp_path / "p.ply"), [[1, 2, 3], [4, 5, 6]])

    @pytest.mark.parametrize("text", [
        "plx\n",
        "ply\nformat binary_little_endian 1.0\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n1 2 3\n",
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float a\nend_header\n1\n",
        "ply\nformat ascii 1.0\nelement face 1\nproperty list uchar int i\nend_header\n3 0 1 2\n",
        "ply\nformat ascii 1.0\nelement face 0\nproperty float a\nend_header\n",
    ])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "bad.ply").write_text(text)
        with pytest.raises(FormatError):
            read_ply(tmp_path / "bad.ply")


class TestAnchorChunk:
    def test_round_trip(self):
        sc = voxelize(np.random.default_rng(0).random((40, 3)), 0.25, n_per_anchor=3, d_f=5)
        buf = encode_anchors(sc)
        assert len(buf) == 4 + len(sc) * (12 + 4 * (5 + 9 + 3))
        cells, lat, off, scl = decode_anchors(buf, 3, 5)
        np.testing.assert_array_equal(cells, sc.cells)
        np.testing.assert_array_equal(lat, sc.latents.data.astype(np.float32))
        np.testing.assert_array_equal(off, sc.offsets.data.astype(np.float32))
        np.testing.assert_array_equal(scl, sc.scale_raw.data.astype(np.float32))

    def test_truncated(self):
        sc = voxelize([(0, 0, 0), (1, 1, 1)], 0.5, n_per_anchor=2, d_f=4)
        with pytest.raises(FormatError, match="expected"):
            decode_anchors(encode_anchors(sc)[:-1], 2, 4)


class TestEditing:
    def test_select_and_append(self):
        sc = voxelize(np.arange(12).reshape(4, 3), 1.0, n_per_anchor=2, d_f=3)
        lat = sc.latents.data.copy()
        sc.select([0, 2])
        assert list(sc.ids) == [0, 2]
        np.testing.assert_array_equal(sc.latents.data, lat[[0, 2]])
        assert sc.lookup([3.5, 4.5, 5.5]) is None
        sc.append([[20, 20, 20]], np.zeros((1, 3)), np.zeros((1, 6)), np.zeros((1, 3)))
        assert list(sc.ids) == [0, 2, 4]
        assert sc.lookup([20.5, 20.5, 20.5]) == 2
        assert sorted(sc.cell_map.values()) == [0, 1, 2]

    def test_duplicate_append_rejected(self):
        sc = voxelize([(0, 0, 0)], 1.0, n_per_anchor=1, d_f=2)
        with pytest.raises(InitializationError):
            sc.append([[0, 0, 0]], np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)))

    def test_anchor_view(self):
        sc = voxelize([(0.5, 0.5, 0.5)], 1.0, n_per_anchor=2, d_f=2)
        a = sc.anchor(0)
        assert a.cell_index == (0, 0, 0)
        assert a.offsets.shape == (2, 3)
