"""Auto-labelling: NDWI, clear-sky line, HOT, and Otsu thresholding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eodeploy import labelling
from eodeploy.fixtures import hazy_scene, water_scene_cube
from eodeploy.rng import stream


class TestNdwi:
    def test_equal_bands_zero(self):
        g = np.full((4, 4), 0.3)
        assert np.all(labelling.ndwi(g, g).values == 0.0)

    def test_direct_arithmetic(self):
        out = labelling.ndwi(np.array([[0.2]]), np.array([[0.6]]))
        assert out.values[0, 0] == pytest.approx(-0.5)

    def test_zero_nir_boundary(self):
        out = labelling.ndwi(np.array([[0.4]]), np.array([[0.0]]))
        assert out.values[0, 0] == 1.0

    def test_zero_over_zero_is_zero(self):
        out = labelling.ndwi(np.zeros((2, 2)), np.zeros((2, 2)))
        assert np.all(out.values == 0.0)

    @given(st.integers(0, 2 ** 16))
    @settings(max_examples=30)
    def test_antisymmetry(self, seed):
        rng = stream(seed, "ndwi")
        a = rng.uniform(0.01, 1.0, (5, 5))
        b = rng.uniform(0.01, 1.0, (5, 5))
        assert np.allclose(labelling.ndwi(a, b).values,
                           -labelling.ndwi(b, a).values)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            labelling.ndwi(np.zeros((2, 2)), np.zeros((3, 3)))


class TestClearSkyLine:
    def test_exact_line_recovered(self):
        rng = stream(0, "csl")
        blue = rng.uniform(0.05, 0.5, (200, 200))
        line = labelling.fit_clear_sky_line(blue, 2.0 * blue)
        assert line.m == pytest.approx(2.0, abs=1e-9)
        assert line.b == pytest.approx(0.0, abs=1e-9)

    def test_candidate_and_point_budget(self):
        # 10^6 pixels: 1500 candidates, at most 400 retained points
        n = 1_000_000
        assert max(2, int(np.ceil(labelling.CANDIDATE_FRACTION * n))) == 1500
        assert labelling.N_BINS * labelling.PIXELS_PER_BIN == 400

    def test_constant_blue_rejected(self):
        with pytest.raises(ValueError):
            labelling.fit_clear_sky_line(np.full((50, 50), 0.2),
                                         np.random.default_rng(0).random((50, 50)))


class TestHot:
    def test_on_line_zero(self):
        x = stream(1, "hot").uniform(0.1, 0.5, (4, 4))
        out = labelling.hot(x, x, labelling.ClearSkyLine(1.0, 0.0))
        assert np.allclose(out.values, 0.0)

    def test_direct_arithmetic(self):
        out = labelling.hot(np.array([[0.4]]), np.array([[0.1]]),
                            labelling.ClearSkyLine(0.5, 0.0))
        assert out.values[0, 0] == pytest.approx(0.1)

    def test_intercept_offset_term(self):
        zero = np.zeros((2, 2))
        out = labelling.hot(zero, zero, labelling.ClearSkyLine(0.0, 1.0))
        assert np.allclose(out.values, 1.0)


def brute_force_otsu(values, bins=256):
    """Independent exhaustive search over all histogram bin edges."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    hist, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    p = hist / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    variances = np.full(bins, -1.0)
    for k in range(bins - 1):
        w0 = p[:k + 1].sum()
        w1 = 1.0 - w0
        if w0 <= 0 or w1 <= 0:
            continue
        mu0 = (p[:k + 1] * centers[:k + 1]).sum() / w0
        mu1 = (p[k + 1:] * centers[k + 1:]).sum() / w1
        variances[k] = w0 * w1 * (mu0 - mu1) ** 2
    # same tie rule as the implementation: first k on the maximal plateau
    vmax = variances.max()
    k = int(np.argmax(variances >= vmax - 1e-10 * max(abs(vmax), 1e-300)))
    return float(edges[k + 1])


class TestOtsu:
    def test_bimodal_separation(self):
        rng = stream(2, "otsu")
        values = np.where(rng.random((32, 32)) < 0.5, 0.1, 0.9)
        t, mask = labelling.otsu_threshold(labelling.IndexImage(values, "ndwi"))
        assert 0.1 < t < 0.9
        assert np.array_equal(mask, values > 0.5)

    def test_matches_brute_force_on_random_images(self):
        for seed in range(100):
            rng = stream(seed, "otsu-oracle")
            values = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2.0),
                                (40, 40))
            values[rng.random((40, 40)) < 0.3] += rng.uniform(1.0, 5.0)
            t, _ = labelling.otsu_threshold(
                labelling.IndexImage(values, "ndwi"))
            assert t == pytest.approx(brute_force_otsu(values), abs=1e-12), seed

    def test_translation_equivariance(self):
        rng = stream(3, "otsu")
        values = rng.normal(0.0, 1.0, (50, 50))
        values[:25] += 3.0
        t0, _ = labelling.otsu_threshold(labelling.IndexImage(values, "x"))
        t1, _ = labelling.otsu_threshold(labelling.IndexImage(values + 2.0, "x"))
        bin_width = (values.max() - values.min()) / 256
        assert t1 - t0 == pytest.approx(2.0, abs=bin_width)

    def test_constant_image_rejected(self):
        with pytest.raises(ValueError):
            labelling.otsu_threshold(labelling.IndexImage(np.ones((4, 4)), "x"))


class TestGenerateMask:
    def test_water_half_scene(self):
        data = np.zeros((4, 1, 8, 8), dtype=np.float32)
        data[1, 0, :4], data[3, 0, :4] = 0.3, 0.05     # water: NDWI > 0
        data[1, 0, 4:], data[3, 0, 4:] = 0.2, 0.4      # land: NDWI < 0
        data[0], data[2] = 0.2, 0.2
        from eodeploy.datacube import DataCube
        cube = DataCube(data, np.array([0.49, 0.60, 0.66, 0.87]))
        mask = labelling.generate_mask(cube, "water")
        expected = np.zeros((8, 8), dtype=np.int64)
        expected[:4] = 1
        assert np.array_equal(mask, expected)

    def test_cloud_flags_haze_outliers(self):
        blue, red, haze = hazy_scene(seed=4, haze_fraction=0.10)
        line = labelling.fit_clear_sky_line(blue, red)
        _, mask = labelling.otsu_threshold(labelling.hot(blue, red, line))
        agree = (mask == haze).mean()
        assert agree > 0.99

    def test_full_water_pipeline(self):
        cube, truth = water_scene_cube(seed=5)
        mask = labelling.generate_mask(cube, "water")
        assert (mask == truth).mean() > 0.99

    def test_unknown_task(self):
        cube, _ = water_scene_cube(seed=6)
        with pytest.raises(ValueError):
            labelling.generate_mask(cube, "lava")
