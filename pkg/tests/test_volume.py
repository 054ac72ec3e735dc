import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ctxforest as cf
from ctxforest.errors import FileFormatError, ValidationError

from conftest import small_volume


class TestVolume:
    def test_rejects_bad_geometry(self):
        with pytest.raises(ValidationError):
            cf.Volume((0, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros(0))
        with pytest.raises(ValidationError):
            cf.Volume((4, 4, 4), (1, -1, 1), (0, 0, 0), np.zeros(64))
        with pytest.raises(ValidationError):
            cf.Volume((4, 4, 4), (1, np.inf, 1), (0, 0, 0), np.zeros(64))
        with pytest.raises(ValidationError):
            cf.Volume((4, 4, 4), (1, 1, 1), (np.nan, 0, 0), np.zeros(64))

    def test_rejects_wrong_length_and_nonfinite(self):
        with pytest.raises(ValidationError):
            cf.Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros(63))
        bad = np.zeros(64)
        bad[10] = np.nan
        with pytest.raises(ValidationError):
            cf.Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), bad)

    def test_data_is_flat_float32_readonly(self):
        v = small_volume()
        assert v.data.dtype == np.float32
        assert v.data.ndim == 1
        with pytest.raises(ValueError):
            v.data[0] = 1.0

    def test_as_3d_is_x_fastest(self):
        dims = (3, 4, 5)
        data = np.arange(60, dtype=np.float32)
        v = cf.Volume(dims, (1, 1, 1), (0, 0, 0), data)
        cube = v.as_3d()
        assert cube.shape == dims
        # linear index ix + nx*(iy + ny*iz)
        assert cube[2, 1, 3] == 2 + 3 * (1 + 4 * 3)

    def test_like_preserves_geometry(self):
        v = small_volume()
        w = v.like(np.zeros(v.n_voxels))
        assert v.same_geometry(w)
        assert not np.shares_memory(v.data, w.data)


class TestLabelVolume:
    def test_palette_enforced(self):
        labels = np.zeros(27, dtype=np.uint8)
        labels[0] = 5
        with pytest.raises(ValidationError):
            cf.LabelVolume((3, 3, 3), (1, 1, 1), (0, 0, 0), labels, {0: "bg"})
        lv = cf.LabelVolume((3, 3, 3), (1, 1, 1), (0, 0, 0), labels,
                            {0: "bg", 5: "thing"})
        assert lv.palette == {0: "bg", 5: "thing"}

    def test_labels_readonly(self):
        lv = cf.LabelVolume((3, 3, 3), (1, 1, 1), (0, 0, 0),
                            np.zeros(27, dtype=np.uint8), {0: "bg"})
        with pytest.raises(ValueError):
            lv.labels[0] = 1


class TestCoordinates:
    def test_voxel_to_world_corner(self):
        v = small_volume()
        w = cf.voxel_to_world(v, (0, 0, 0))
        np.testing.assert_allclose(w, v.origin)

    def test_voxel_to_world_rejects_out_of_grid(self):
        v = small_volume()
        with pytest.raises(ValidationError):
            cf.voxel_to_world(v, (0, 0, 99))

    def test_world_to_voxel_rounds_to_nearest(self):
        v = cf.Volume((10, 10, 10), (2.0, 1.0, 0.5), (0.0, 0.0, 0.0),
                      np.zeros(1000))
        # 2.999 / 2.0 = 1.4995 -> 1; 3.001 / 2.0 = 1.5005 -> 2
        assert cf.world_to_voxel(v, (2.999, 0.49, 0.24)) == ((1, 0, 0), False)
        assert cf.world_to_voxel(v, (3.001, 0.51, 0.26)) == ((2, 1, 1), False)

    def test_half_spacing_rounds_up(self):
        # floor(x + 0.5): exactly half a voxel goes to the upper neighbor
        v = cf.Volume((10, 10, 10), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0),
                      np.zeros(1000))
        assert cf.world_to_voxel(v, (1.0, 3.0, 5.0)) == ((1, 2, 3), False)

    def test_out_of_grid_clamps_and_flags(self):
        v = cf.Volume((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                      np.zeros(64))
        idx, clamped = cf.world_to_voxel(v, (-3.0, 1.0, 9.0))
        assert clamped
        assert idx == (0, 1, 3)

    @given(st.integers(0, 6), st.integers(0, 5), st.integers(0, 4))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_is_identity_on_grid(self, ix, iy, iz):
        v = small_volume()
        idx, clamped = cf.world_to_voxel(v, cf.voxel_to_world(v, (ix, iy, iz)))
        assert not clamped
        assert idx == (ix, iy, iz)


class TestGradientMagnitude:
    @staticmethod
    def _axis_diff(cube, axis, h):
        # independent oracle: central differences inside, one-sided at faces
        n = cube.shape[axis]
        out = np.empty_like(cube)
        sl = [slice(None)] * 3

        def at(i):
            s = list(sl)
            s[axis] = i
            return tuple(s)

        for i in range(n):
            if i == 0:
                out[at(0)] = (cube[at(1)] - cube[at(0)]) / h
            elif i == n - 1:
                out[at(n - 1)] = (cube[at(n - 1)] - cube[at(n - 2)]) / h
            else:
                out[at(i)] = (cube[at(i + 1)] - cube[at(i - 1)]) / (2 * h)
        return out

    def test_matches_central_difference_oracle(self):
        v = small_volume(seed=4)
        g = cf.gradient_magnitude(v)
        cube = v.as_3d().astype(np.float64)
        gx = self._axis_diff(cube, 0, v.spacing[0])
        gy = self._axis_diff(cube, 1, v.spacing[1])
        gz = self._axis_diff(cube, 2, v.spacing[2])
        want = np.sqrt(gx**2 + gy**2 + gz**2)
        np.testing.assert_allclose(g.as_3d(), want, rtol=2e-5, atol=2e-4)

    def test_linear_ramp_is_exact_to_the_edge(self):
        dims = (6, 5, 4)
        ii = np.arange(6, dtype=np.float64)
        cube = np.broadcast_to(3.0 * ii[:, None, None], dims)
        v = cf.Volume(dims, (1.5, 1.0, 1.0), (0, 0, 0),
                      np.ascontiguousarray(cube.reshape(-1, order="F")))
        g = cf.gradient_magnitude(v)
        np.testing.assert_allclose(g.data, 2.0, rtol=1e-6)

    def test_constant_volume_has_zero_gradient(self):
        v = cf.Volume((5, 5, 5), (1, 1, 1), (0, 0, 0), np.full(125, 7.0))
        g = cf.gradient_magnitude(v)
        assert np.all(g.data == 0.0)

    def test_degenerate_axis_rejected(self):
        v = cf.Volume((5, 1, 5), (1, 1, 1), (0, 0, 0), np.zeros(25))
        with pytest.raises(ValidationError):
            cf.gradient_magnitude(v)


class TestVolumeIO:
    def test_roundtrip_exact(self, tmp_path):
        v = small_volume(seed=9)
        p = tmp_path / "vol.mhd"
        cf.save_volume(v, p)
        w = cf.load_volume(p)
        assert v.same_geometry(w)
        np.testing.assert_array_equal(v.data, w.data)

    def test_label_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, size=27).astype(np.uint8)
        lv = cf.LabelVolume((3, 3, 3), (0.7, 1.0, 1.3), (1, 2, 3), labels,
                            {0: "background", 1: "a", 2: "b", 3: "c"})
        p = tmp_path / "lab.mhd"
        cf.save_label_volume(lv, p)
        w = cf.load_label_volume(p, palette=lv.palette)
        assert w.same_geometry(lv)
        np.testing.assert_array_equal(w.labels, lv.labels)

    def test_missing_file_raises_fileformat(self, tmp_path):
        with pytest.raises(FileFormatError):
            cf.load_volume(tmp_path / "nope.mhd")

    def test_bad_header_raises_fileformat(self, tmp_path):
        p = tmp_path / "bad.mhd"
        p.write_text("NotAHeader = 1\n")
        with pytest.raises(FileFormatError):
            cf.load_volume(p)

    def test_truncated_raw_raises_fileformat(self, tmp_path):
        v = small_volume()
        p = tmp_path / "vol.mhd"
        cf.save_volume(v, p)
        raw = p.with_suffix(".raw")
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(FileFormatError):
            cf.load_volume(p)

    def test_wrong_element_type_raises(self, tmp_path):
        v = small_volume()
        p = tmp_path / "vol.mhd"
        cf.save_volume(v, p)
        text = p.read_text().replace("FLOAT32", "FLOAT64")
        p.write_text(text)
        with pytest.raises(FileFormatError):
            cf.load_volume(p)

    @pytest.mark.parametrize("seed", range(12))
    def test_roundtrip_random_volumes(self, seed, tmp_path):
        v = small_volume(seed=seed, dims=(4, 3, 5))
        p = tmp_path / "v.mhd"
        cf.save_volume(v, p)
        w = cf.load_volume(p)
        np.testing.assert_array_equal(v.data, w.data)
        assert v.same_geometry(w)
