import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixupmil.rng import RngStream
from mixupmil.tilemask import (
    EntropyMap,
    PatchGrid,
    RasterImage,
    downscale,
    entropy_map,
    grayscale,
    informative_grid,
    mask_image,
    read_ppm,
    sample_coords,
    tissue_mask,
    to_full_resolution,
    write_ppm,
)


def solid(h, w, rgb):
    return RasterImage(np.tile(np.array(rgb, dtype=np.uint8), (h, w, 1)))


def half_tissue(h=8, w=8):
    px = np.full((h, w, 3), 255, dtype=np.uint8)
    px[:, : w // 2, 1] = 100
    return RasterImage(px)


def gray_image(levels):
    levels = np.asarray(levels, dtype=np.uint8)
    return RasterImage(np.repeat(levels[..., None], 3, axis=2))


class TestRaster:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            RasterImage(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError):
            RasterImage(np.zeros((0, 4, 3), dtype=np.uint8))
        with pytest.raises(ValueError, match="255"):
            RasterImage(np.full((2, 2, 3), 300))

    def test_ppm_roundtrip(self, tmp_path):
        img = RasterImage(np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8))
        write_ppm(img, tmp_path / "x.ppm")
        assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm").pixels, img.pixels)

    def test_mask_image(self):
        px = mask_image(np.array([[True, False]])).pixels
        np.testing.assert_array_equal(px[0, 0], [0, 0, 0])
        np.testing.assert_array_equal(px[0, 1], [255, 255, 255])

    def test_downscale(self):
        px = np.zeros((17, 16, 3), dtype=np.uint8)
        px[:8, :8] = 200
        px[:8, 8:] = np.arange(64).reshape(8, 8)[..., None]
        small = downscale(RasterImage(px), 8)
        assert (small.height, small.width) == (2, 2)
        np.testing.assert_array_equal(small.pixels[0, 0], [200] * 3)
        np.testing.assert_array_equal(small.pixels[0, 1], [32] * 3)  # mean 31.5 rounds up
        np.testing.assert_array_equal(small.pixels[1, 0], [0] * 3)
        with pytest.raises(ValueError):
            downscale(solid(4, 4, (0, 0, 0)), 8)


class TestTissueMask:
    def test_white(self):
        assert not tissue_mask(solid(6, 5, (255, 255, 255)), 200).any()

    def test_half(self):
        m = tissue_mask(half_tissue(), 200)
        assert m.shape == (8, 8)
        assert m[:, :4].all() and not m[:, 4:].any()

    def test_threshold_zero(self):
        assert not tissue_mask(solid(3, 3, (0, 0, 0)), 0).any()

    def test_boundary_is_strict(self):
        assert not tissue_mask(solid(1, 1, (0, 200, 0)), 200).any()
        assert tissue_mask(solid(1, 1, (0, 199, 0)), 200).all()

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 255), st.integers(0, 255))
    def test_monotone_in_threshold(self, seed, t1, t2):
        img = RasterImage(np.random.default_rng(seed).integers(0, 256, size=(6, 6, 3), dtype=np.uint8))
        lo, hi = sorted((t1, t2))
        assert not np.any(tissue_mask(img, lo) & ~tissue_mask(img, hi))


class TestEntropy:
    def test_luma_rounding(self):
        img = RasterImage(np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30]]], dtype=np.uint8))
        # 76.245, 149.685, 29.07, 18.15
        np.testing.assert_array_equal(grayscale(img), [[76, 150, 29, 18]])

    def test_constant(self):
        e = entropy_map(solid(8, 8, (40, 40, 40)), 4)
        np.testing.assert_array_equal(e.values, np.zeros((2, 2)))

    def test_two_levels(self):
        levels = np.zeros((4, 4))
        levels[:, 2:] = 255
        assert entropy_map(gray_image(levels), 4).values[0, 0] == pytest.approx(1.0)

    def test_sixty_four_distinct(self):
        e = entropy_map(gray_image(np.arange(64).reshape(8, 8)), 8)
        assert e.values.shape == (1, 1)
        assert e.values[0, 0] == pytest.approx(6.0)

    def test_partial_windows_are_dropped(self):
        assert entropy_map(solid(10, 7, (1, 1, 1)), 3).values.shape == (3, 2)

    @pytest.mark.parametrize("window", [0, 9])
    def test_window_range(self, window):
        with pytest.raises(ValueError, match="window"):
            entropy_map(solid(8, 8, (0, 0, 0)), window)


class TestGrid:
    def test_half_tissue_geometry(self):
        g = informative_grid(tissue_mask(half_tissue()), None, 4)
        assert sorted(map(tuple, g.coordinates.tolist())) == [(0, 0), (0, 4)]
        np.testing.assert_array_equal(g.coverage, [1.0, 1.0])

    def test_coverage_boundary_inclusive(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[:3] = True  # 12 of 16
        assert len(informative_grid(mask, None, 4, coverage_min=0.75)) == 1
        mask[2, 3] = False  # 11 of 16
        assert len(informative_grid(mask, None, 4, coverage_min=0.75)) == 0

    def test_entropy_rule(self):
        mask = np.ones((8, 8), dtype=bool)
        ent = EntropyMap(np.array([[1.0, 5.0], [5.0, 1.0]]), 4)
        g = informative_grid(mask, ent, 4, entropy_min=4.0)
        assert sorted(map(tuple, g.coordinates.tolist())) == [(0, 4), (4, 0)]
        assert len(informative_grid(mask, ent, 4, entropy_min=5.1)) == 0
        assert len(informative_grid(mask, ent, 4, entropy_min=0.0)) == 4

    def test_cell_entropy_is_area_mean(self):
        mask = np.ones((4, 8), dtype=bool)
        ent = EntropyMap(np.array([[2.0, 6.0]]), 4)
        # one 8-wide cell straddles both windows: mean 4.0
        g = informative_grid(mask, ent, 4, entropy_min=4.0)
        assert len(g) == 1
        g8 = informative_grid(np.ones((8, 8), dtype=bool), EntropyMap(np.array([[2.0, 6.0]]), 4), 8, entropy_min=4.0)
        # lower half has no entropy window; mean is over covered pixels only
        assert len(g8) == 1

    def test_entropy_from_image(self):
        px = np.zeros((8, 16, 3), dtype=np.uint8)
        px[:, 8:] = np.arange(64, dtype=np.uint8).reshape(8, 8)[..., None]
        img = RasterImage(px)
        g = informative_grid(tissue_mask(img), entropy_map(img, 8), 8, entropy_min=4.0)
        assert g.coordinates.tolist() == [[8, 0]]

    def test_errors(self):
        with pytest.raises(ValueError, match="patch size"):
            informative_grid(np.ones((4, 4), dtype=bool), None, 8)
        with pytest.raises(ValueError, match="entropy map"):
            informative_grid(np.ones((4, 4), dtype=bool), None, 2, entropy_min=1.0)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(0.0, 1.0))
    def test_subset_of_full_grid(self, seed, patch, cov):
        mask = np.random.default_rng(seed).random((13, 11)) < 0.6
        g = informative_grid(mask, None, patch, coverage_min=cov)
        full = {(x, y) for y in range(0, 13 - patch + 1, patch) for x in range(0, 11 - patch + 1, patch)}
        cells = [tuple(c) for c in g.coordinates.tolist()]
        assert set(cells) <= full and len(set(cells)) == len(cells)
        assert np.all(g.coverage >= cov)


class TestSampling:
    @pytest.fixture
    def grid(self):
        return informative_grid(tissue_mask(half_tissue(32, 32)), None, 8)

    @pytest.mark.parametrize("n", [1024, 2048])
    def test_counts(self, grid, n):
        coords = sample_coords(grid, n, RngStream(0))
        kept = {tuple(c) for c in grid.coordinates.tolist()}
        assert coords.shape == (n, 2)
        assert all(tuple(c) in kept for c in coords.tolist())

    def test_single_cell(self):
        g = PatchGrid(4, np.array([[4, 8]]), np.array([1.0]))
        np.testing.assert_array_equal(sample_coords(g, 50, RngStream(1)), np.tile([4, 8], (50, 1)))

    def test_deterministic(self, grid):
        np.testing.assert_array_equal(sample_coords(grid, 100, RngStream(3)), sample_coords(grid, 100, RngStream(3)))

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            sample_coords(PatchGrid(4, np.zeros((0, 2), dtype=np.int64), np.zeros(0)), 5, RngStream(0))

    def test_full_resolution(self):
        np.testing.assert_array_equal(to_full_resolution(np.array([[0, 4], [12, 8]])), [[0, 32], [96, 64]])
