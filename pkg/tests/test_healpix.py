import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayescmb import healpix as hp

healpy = pytest.importorskip("healpy")

NSIDES = [1, 2, 4, 8, 16, 32]


class TestResolution:
    @pytest.mark.parametrize("nside,npix", [(1, 12), (2, 48), (16, 3072), (64, 49152)])
    def test_pixel_count(self, nside, npix):
        assert hp.Resolution(nside).n_pixels == npix

    @pytest.mark.parametrize("bad", [0, 3, 6, -2, 256])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            hp.Resolution(bad)

    def test_rejects_non_integer(self):
        with pytest.raises(TypeError):
            hp.Resolution(2.0)

    def test_area_sums_to_sphere(self):
        r = hp.Resolution(8)
        assert r.n_pixels * r.pixel_area == pytest.approx(4 * np.pi, rel=1e-15)

    def test_coarser_finer(self):
        assert hp.Resolution(4).coarser() == hp.Resolution(2)
        assert hp.Resolution(4).finer() == hp.Resolution(8)
        with pytest.raises(ValueError):
            hp.Resolution(1).coarser()


class TestMaps:
    def test_skymap_shape_checked(self):
        with pytest.raises(ValueError):
            hp.SkyMap(hp.Resolution(1), np.zeros((1, 11)))

    def test_skymap_rejects_nonfinite(self):
        v = np.zeros(12)
        v[3] = np.nan
        with pytest.raises(ValueError):
            hp.SkyMap(hp.Resolution(1), v)

    def test_skymap_read_only(self):
        m = hp.SkyMap(hp.Resolution(1), np.arange(12.0))
        assert m.values.shape == (1, 12)
        with pytest.raises(ValueError):
            m.values[0, 0] = 1.0

    def test_ring_ordering_rejected(self):
        with pytest.raises(ValueError):
            hp.SkyMap(hp.Resolution(1), np.zeros(12), ordering="ring")


class TestGeometry:
    def test_first_pixel_center_frozen(self):
        theta, phi = hp.pixel_center(1, 0)
        assert theta == pytest.approx(np.arccos(2.0 / 3.0), abs=1e-15)
        assert phi == pytest.approx(np.pi / 4, abs=1e-15)

    @pytest.mark.parametrize("nside", NSIDES)
    def test_centers_match_healpy(self, nside):
        theta, phi = hp.pixel_angles(nside)
        t_ref, p_ref = healpy.pix2ang(nside, np.arange(12 * nside**2), nest=True)
        np.testing.assert_allclose(theta, t_ref, atol=1e-13)
        dphi = np.angle(np.exp(1j * (phi - p_ref)))
        np.testing.assert_allclose(dphi, 0.0, atol=1e-13)

    @pytest.mark.parametrize("nside", [1, 4, 16])
    def test_corners_match_healpy(self, nside):
        pix = np.arange(12 * nside**2)
        ours = hp.pixel_corners(nside, pix)  # (npix, 4, 3)
        ref = np.transpose(healpy.boundaries(nside, pix, step=1, nest=True), (0, 2, 1))
        for a, b in zip(ours, ref):
            d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
            assert np.all(d.min(axis=1) < 1e-12)

    def test_vectors_are_unit(self):
        v = hp.pixel_vectors(8)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-15)

    @given(st.sampled_from([1, 2, 4, 8, 16]), st.data())
    def test_xyf_round_trip(self, nside, data):
        pix = data.draw(st.integers(0, 12 * nside**2 - 1))
        ix, iy, f = hp.nest2xyf(nside, pix)
        assert 0 <= ix < nside and 0 <= iy < nside and 0 <= f < 12
        assert int(hp.xyf2nest(nside, ix, iy, f)) == pix

    def test_out_of_range_pixel(self):
        with pytest.raises(IndexError):
            hp.nest2xyf(2, 48)


class TestHierarchy:
    @given(st.integers(0, 12 * 32**2 - 1))
    def test_parent_of_children(self, pix):
        assert np.all(hp.parent(hp.children(pix)) == pix)

    def test_children_frozen(self):
        assert list(hp.children(5)) == [20, 21, 22, 23]

    @pytest.mark.parametrize("nside", [2, 8, 32])
    def test_children_lie_inside_parent(self, nside):
        # each child center is closer to its parent's center than to any other coarse center
        fine = hp.pixel_vectors(nside)
        coarse = hp.pixel_vectors(nside // 2)
        nearest = np.argmax(fine @ coarse.T, axis=1)
        assert np.array_equal(nearest, hp.parent(np.arange(fine.shape[0])))


class TestNeighbors:
    def test_frozen_lists(self):
        assert hp.neighbors(1, 0) == [1, 2, 3, 4, 5, 8]
        assert hp.neighbors(2, 0) == [1, 2, 3, 17, 19, 22, 23, 35]
        assert hp.neighbors(2, 13) == [2, 3, 12, 14, 15, 18, 19]

    @pytest.mark.parametrize("nside", NSIDES)
    def test_match_healpy(self, nside):
        npix = 12 * nside**2
        ref = healpy.get_all_neighbours(nside, np.arange(npix), nest=True).T
        table = hp.neighbor_table(nside)
        for p in range(npix):
            expected = sorted(set(int(q) for q in ref[p] if q >= 0) - {p})
            assert hp.neighbors(nside, p) == expected
            assert sorted(q for q in table[p] if q >= 0) == expected

    @pytest.mark.parametrize("nside", [2, 4, 16])
    def test_counts(self, nside):
        counts = np.array([len(hp.neighbors(nside, p)) for p in range(12 * nside**2)])
        assert set(np.unique(counts)) <= {7, 8}
        assert int(np.sum(counts == 7)) == 24

    def test_nside1_has_six(self):
        assert all(len(hp.neighbors(1, p)) == 6 for p in range(12))

    @pytest.mark.parametrize("nside", [1, 2, 8])
    def test_symmetric(self, nside):
        for p in range(12 * nside**2):
            for q in hp.neighbors(nside, p):
                assert p in hp.neighbors(nside, q)


class TestLatitudeMask:
    def test_zero_cut_keeps_all(self):
        assert hp.latitude_mask(4, 0).n_kept == 192

    def test_thirty_degree_fsky(self):
        # |b| > 30 deg covers half the sphere; pixelization makes it approximate
        m = hp.latitude_mask(32, 30)
        assert m.fsky == pytest.approx(0.5, abs=0.02)

    def test_kept_pixels_are_high_latitude(self):
        m = hp.latitude_mask(16, 30)
        theta, _ = hp.pixel_angles(16)
        lat = 90 - np.degrees(theta)
        assert np.all(np.abs(lat[m.keep]) > 30)
        assert np.all(np.abs(lat[~m.keep]) <= 30)

    @pytest.mark.parametrize("bad", [-1, 90, 120])
    def test_invalid_cut(self, bad):
        with pytest.raises(ValueError):
            hp.latitude_mask(4, bad)
