import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ctxforest as cf
from ctxforest.distance import BONE_IDS, BONE_NAMES
from ctxforest.errors import FileFormatError, ValidationError

from conftest import small_volume

PALETTE = {0: "background", 1: "femur", 2: "tibia", 3: "patella"}


def brute_force_distance(mask_flat, dims, spacing):
    """Independent oracle: per-voxel min anisotropic distance (mm) to any
    set voxel, by exhaustive pairwise search."""
    nx, ny, nz = dims
    idx = np.arange(nx * ny * nz)
    coords = np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1)
    pts = coords * np.asarray(spacing, dtype=np.float64)[None, :]
    src = pts[mask_flat.astype(bool)]
    d2 = ((pts[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def brute_force_signed(mask_flat, dims, spacing):
    return (brute_force_distance(mask_flat, dims, spacing)
            - brute_force_distance(1 - mask_flat, dims, spacing))


def random_mask(rng, dims, p=0.12):
    n = int(np.prod(dims))
    m = (rng.random(n) < p).astype(np.uint8)
    if not m.any():
        m[rng.integers(n)] = 1
    if m.all():
        m[rng.integers(n)] = 0
    return m


def grid(dims, spacing):
    labels = np.zeros(int(np.prod(dims)), dtype=np.uint8)
    return cf.LabelVolume(dims, spacing, (0, 0, 0), labels, PALETTE)


class TestSignedDistance:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(3, 9, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 2.0, size=3))
        mask = random_mask(rng, dims)
        sd = cf.signed_distance_transform(mask, grid(dims, spacing))
        assert sd.dtype == np.float32
        np.testing.assert_allclose(sd, brute_force_signed(mask, dims, spacing),
                                   atol=1e-5)

    def test_sign_convention(self):
        # single set voxel: negative only there, positive everywhere else
        dims = (5, 5, 5)
        mask = np.zeros(125, dtype=np.uint8)
        center = 2 + 5 * (2 + 5 * 2)
        mask[center] = 1
        sd = cf.signed_distance_transform(mask, grid(dims, (1, 1, 1)))
        assert sd[center] < 0
        outside = np.ones(125, dtype=bool)
        outside[center] = False
        assert np.all(sd[outside] > 0)
        np.testing.assert_allclose(sd[center], -1.0, atol=1e-6)

    def test_anisotropic_spacing_is_metric(self):
        dims = (7, 7, 7)
        mask = np.zeros(343, dtype=np.uint8)
        center = 3 + 7 * (3 + 7 * 3)
        mask[center] = 1
        sd = cf.signed_distance_transform(mask, grid(dims, (2.0, 1.0, 0.5)))
        cube = sd.reshape((7, 7, 7), order="F")
        np.testing.assert_allclose(cube[4, 3, 3], 2.0, atol=1e-6)
        np.testing.assert_allclose(cube[3, 4, 3], 1.0, atol=1e-6)
        np.testing.assert_allclose(cube[3, 3, 4], 0.5, atol=1e-6)

    def test_degenerate_masks_rejected(self):
        g = grid((4, 4, 4), (1, 1, 1))
        with pytest.raises(ValidationError):
            cf.signed_distance_transform(np.zeros(64, dtype=np.uint8), g)
        with pytest.raises(ValidationError):
            cf.signed_distance_transform(np.ones(64, dtype=np.uint8), g)

    def test_size_mismatch_rejected(self):
        g = grid((4, 4, 4), (1, 1, 1))
        m = np.zeros(63, dtype=np.uint8)
        m[0] = 1
        with pytest.raises(ValidationError):
            cf.signed_distance_transform(m, g)

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_oracle_property_random_masks(self, seed):
        rng = np.random.default_rng(seed)
        dims = (5, 4, 6)
        spacing = tuple(float(s) for s in rng.uniform(0.4, 2.5, size=3))
        mask = random_mask(rng, dims, p=float(rng.uniform(0.05, 0.6)))
        sd = cf.signed_distance_transform(mask, grid(dims, spacing))
        np.testing.assert_allclose(sd, brute_force_signed(mask, dims, spacing),
                                   atol=1e-5)


class TestBoneDistanceMaps:
    def _three_bone_volume(self):
        dims = (8, 8, 8)
        labels = np.zeros(512, dtype=np.uint8)
        labels[1 + 8 * (1 + 8 * 1)] = 1
        labels[6 + 8 * (6 + 8 * 6)] = 2
        labels[6 + 8 * (1 + 8 * 6)] = 3
        return cf.LabelVolume(dims, (1, 1, 1), (0, 0, 0), labels, PALETTE)

    def test_one_map_per_bone(self):
        lv = self._three_bone_volume()
        maps = cf.bone_distance_maps(lv)
        assert set(maps) == set(BONE_NAMES)
        for name in BONE_NAMES:
            want = cf.signed_distance_transform(lv.labels == BONE_IDS[name], lv)
            np.testing.assert_array_equal(maps[name], want)

    def test_missing_bone_rejected(self):
        labels = np.zeros(64, dtype=np.uint8)
        labels[0] = 1  # femur present, tibia/patella absent
        lv = cf.LabelVolume((4, 4, 4), (1, 1, 1), (0, 0, 0), labels, PALETTE)
        with pytest.raises(ValidationError):
            cf.bone_distance_maps(lv)

    def test_requires_label_volume(self):
        with pytest.raises(ValidationError):
            cf.bone_distance_maps(np.zeros(64, dtype=np.uint8))


class TestLandmarks:
    def _landmarks(self, k=6, seed=5):
        rng = np.random.default_rng(seed)
        return cf.LandmarkSet(
            {name: rng.uniform(-40, 40, size=(k, 3)) for name in BONE_NAMES})

    def test_counts(self):
        assert self._landmarks(k=6).counts == (6, 6, 6)
        assert self._landmarks(k=3).count("tibia") == 3

    def test_roundtrip_exact(self, tmp_path):
        lms = self._landmarks()
        p = tmp_path / "lm.csv"
        cf.save_landmarks(p, lms)
        back = cf.load_landmarks(p)
        for name in BONE_NAMES:
            np.testing.assert_array_equal(back.points[name], lms.points[name])

    def test_rejects_wrong_header(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("bone,idx,x,y,z\nfemur,0,1,2,3\n")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_rejects_empty_file(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_rejects_gap_in_indices(self, tmp_path):
        p = tmp_path / "lm.csv"
        lines = ["bone,index,x_mm,y_mm,z_mm"]
        for name in BONE_NAMES:
            lines.append(f"{name},0,0.0,0.0,0.0")
            lines.append(f"{name},2,1.0,1.0,1.0")  # index 1 missing
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_rejects_duplicate_indices(self, tmp_path):
        p = tmp_path / "lm.csv"
        lines = ["bone,index,x_mm,y_mm,z_mm"]
        for name in BONE_NAMES:
            lines.append(f"{name},0,0.0,0.0,0.0")
            lines.append(f"{name},0,1.0,1.0,1.0")
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_rejects_unknown_bone_row(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("bone,index,x_mm,y_mm,z_mm\nfibula,0,0.0,0.0,0.0\n")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_rejects_malformed_numbers(self, tmp_path):
        p = tmp_path / "lm.csv"
        p.write_text("bone,index,x_mm,y_mm,z_mm\nfemur,0,1.0,oops,3.0\n")
        with pytest.raises(FileFormatError):
            cf.load_landmarks(p)

    def test_set_rejects_unknown_bone(self):
        rng = np.random.default_rng(0)
        pts = {name: rng.uniform(0, 1, (3, 3)) for name in BONE_NAMES}
        pts["fibula"] = rng.uniform(0, 1, (3, 3))
        with pytest.raises(ValidationError):
            cf.LandmarkSet(pts)

    def test_set_rejects_missing_bone(self):
        rng = np.random.default_rng(0)
        pts = {"femur": rng.uniform(0, 1, (3, 3)),
               "tibia": rng.uniform(0, 1, (3, 3))}
        with pytest.raises(ValidationError):
            cf.LandmarkSet(pts)

    def test_set_rejects_non_finite(self):
        rng = np.random.default_rng(0)
        pts = {name: rng.uniform(0, 1, (3, 3)) for name in BONE_NAMES}
        pts["tibia"][1, 2] = np.nan
        with pytest.raises(ValidationError):
            cf.LandmarkSet(pts)

    def test_distance_to_landmark_oracle(self):
        lms = self._landmarks()
        v = small_volume()
        d = cf.distance_to_landmark(v, lms, "tibia", 4)
        assert d.dtype == np.float32
        target = lms.points["tibia"][4]
        nx, ny, nz = v.dims
        idx = np.arange(v.n_voxels)
        coords = np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=1)
        world = np.asarray(v.origin) + coords * np.asarray(v.spacing)
        want = np.sqrt(((world - target) ** 2).sum(axis=1))
        np.testing.assert_allclose(d, want, rtol=1e-6, atol=1e-5)

    def test_distance_to_landmark_range_check(self):
        lms = self._landmarks(k=4)
        v = small_volume()
        with pytest.raises(ValidationError):
            cf.distance_to_landmark(v, lms, "femur", 4)
        with pytest.raises(ValidationError):
            cf.distance_to_landmark(v, lms, "femur", -1)


class TestBand:
    def _spread_bones(self, dims, spacing):
        n = int(np.prod(dims))
        labels = np.zeros(n, dtype=np.uint8)
        for bone, at in ((1, (2, 2, 2)),
                         (2, (dims[0] - 3, dims[1] - 3, dims[2] - 3)),
                         (3, (dims[0] - 3, 2, dims[2] - 3))):
            labels[at[0] + dims[0] * (at[1] + dims[1] * at[2])] = bone
        return cf.LabelVolume(dims, spacing, (0, 0, 0), labels, PALETTE)

    def test_band_is_union_of_shells(self):
        lv = self._spread_bones((10, 9, 8), (1.0, 1.0, 1.0))
        maps = cf.bone_distance_maps(lv)
        tau_in, tau_out = 1.5, 3.0
        band = cf.extract_band(maps, tau_in, tau_out)
        member = np.zeros(lv.n_voxels, dtype=bool)
        for bone in BONE_NAMES:
            member |= (maps[bone] >= -tau_in) & (maps[bone] <= tau_out)
        np.testing.assert_array_equal(np.sort(band), np.nonzero(member)[0])
        assert band.dtype == np.int64

    def test_negative_widths_rejected(self):
        lv = self._spread_bones((8, 8, 8), (1.0, 1.0, 1.0))
        maps = cf.bone_distance_maps(lv)
        with pytest.raises(ValidationError):
            cf.extract_band(maps, -0.5, 3.0)
        with pytest.raises(ValidationError):
            cf.extract_band(maps, 1.0, -0.1)

    def test_empty_band_rejected(self):
        # huge spacing: the nearest non-bone voxel center is 100 mm out and
        # the bone centers themselves sit at -100 mm, so a narrow band
        # around the surface contains nothing
        lv = self._spread_bones((8, 8, 8), (100.0, 100.0, 100.0))
        maps = cf.bone_distance_maps(lv)
        with pytest.raises(ValidationError):
            cf.extract_band(maps, 50.0, 50.0)
