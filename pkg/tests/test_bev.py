import math

import numpy as np
import pytest

from bevloc.bev import (BevImage, BevRenderer, SlopeState, dequantize, quantize, render_bev,
                        slope_from_heights)
from bevloc.config import NormalizationFactors, SegmenterConfig
from bevloc.geometry import PointCloud, Pose3D
from bevloc.ground_grid import GroundGridMap
from bevloc.utils.validation import AlignmentError

CS = 0.33


def plane_heights(gx, gy):
    c = np.arange(-1, 2) * CS
    xx, yy = np.meshgrid(c, c)
    return gx * xx + gy * yy


def test_slope_flat_is_zero():
    assert slope_from_heights(np.full((3, 3), 4.2), CS) == 0.0


def test_slope_45_degrees():
    assert slope_from_heights(plane_heights(1.0, 0.0), CS) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-6)


@pytest.mark.parametrize("conf", [0.5, 0.2, 0.0])
def test_slope_low_confidence_is_zero(conf):
    assert slope_from_heights(plane_heights(1.0, 0.0), CS, confidence=conf) == 0.0


def test_slope_rotation_consistent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.normal(size=(3, 3))
        base = slope_from_heights(h, CS)
        for k in (1, 2, 3):
            assert slope_from_heights(np.rot90(h, k), CS) == pytest.approx(base, abs=1e-9)


def grid_with(intensity=0.5, variance=0.0, heights=None, size=9):
    grid = GroundGridMap(SegmenterConfig(grid_size=size, cell_size=CS))
    grid.intensity_weight[:] = 30
    grid.point_count[:] = 30
    grid.intensity_mean[:] = intensity
    grid.height_m2[:] = variance * 30
    grid.ground_confidence[:] = 1.0
    if heights is not None:
        grid.ground_height[:] = heights
    return grid


def test_intensity_clamped():
    img, _ = render_bev(grid_with(0.5), NormalizationFactors(2.670, 0.09, 0.35))
    assert (img.intensity == 1.0).all()


def test_variance_scaling():
    img, _ = render_bev(grid_with(variance=2.0), NormalizationFactors(1.0, 0.1, 0.35))
    np.testing.assert_allclose(img.variance, 0.7, rtol=1e-12)
    np.testing.assert_allclose(img.raw_variance, 2.0, rtol=1e-12)


def test_slope_state_is_minimum_of_history():
    f = NormalizationFactors()
    cols = np.arange(9) * CS
    state = None
    # gradients chosen so the raw centre slope is 0.4, 0.1, 0.3
    seen = []
    for target in (0.4, 0.1, 0.3):
        g = math.sqrt(1 / (1 - target) ** 2 - 1)
        grid = grid_with(heights=np.tile(g * cols, (9, 1)))
        img, state = render_bev(grid, f, state)
        seen.append(state.values[4, 4])
    assert seen == pytest.approx([0.4, 0.1, 0.1])
    assert img.slope[4, 4] == pytest.approx(min(1.0, 0.1 * f.S_c * 10))


def test_slope_state_monotone_and_alignment_error():
    rng = np.random.default_rng(1)
    state = None
    prev = None
    for _ in range(5):
        grid = grid_with(heights=rng.normal(0, 0.1, (9, 9)))
        _, state = render_bev(grid, NormalizationFactors(), state)
        if prev is not None:
            both = np.isfinite(prev)
            assert (state.values[both] <= prev[both]).all()
        prev = state.values.copy()
    grid.recenter((5.0, 0.0))
    with pytest.raises(AlignmentError):
        render_bev(grid, NormalizationFactors(), state)
    render_bev(grid, NormalizationFactors(), state.realign(grid.origin_index))


def test_mask_matches_zero_weight_and_determinism():
    grid = GroundGridMap(SegmenterConfig(grid_size=41, cell_size=CS))
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(-3, 3, (5000, 2)), rng.normal(0, 0.02, 5000),
                           rng.uniform(0, 1, 5000)]).astype(np.float32)
    grid.integrate_scan(PointCloud(pts), Pose3D())
    a, _ = render_bev(grid, NormalizationFactors())
    b, _ = render_bev(grid.copy(), NormalizationFactors())
    np.testing.assert_array_equal(a.mask, grid.intensity_weight > 0)
    for ch in (a.intensity, a.slope, a.variance):
        assert (ch[~a.mask] == 0).all()
        assert ch.min() >= 0 and ch.max() <= 1
    np.testing.assert_array_equal(quantize(a), quantize(b))


def test_quantize_rules():
    vals = np.array([[0.0, 1.0, 0.5, 0.25]])
    img = BevImage(vals, vals, vals, np.ones_like(vals, bool))
    q = quantize(img)
    assert q[0, :, 0].tolist() == [0, 255, 128, 64]
    img.mask[0, 1] = False
    assert quantize(img)[0, 1].tolist() == [0, 0, 0]


def test_quantize_roundtrip_bound():
    rng = np.random.default_rng(3)
    ch = rng.uniform(0, 1, (3, 64, 64))
    img = BevImage(*ch, np.ones((64, 64), bool))
    back = dequantize(quantize(img), img.mask)
    assert np.abs(back.channels() - img.channels()).max() <= 1 / 510 + 1e-12


def test_pixel_world_mapping():
    img = BevImage.empty(10, 0.5, origin=(2.0, 3.0))
    np.testing.assert_allclose(img.pixel_to_world([0, 0]), [2.25, 3.25])
    np.testing.assert_allclose(img.world_to_pixel(img.pixel_to_world([3.5, 7.0])), [3.5, 7.0])


def test_renderer_estimator_keeps_state():
    r = BevRenderer(I_c=1.0)
    assert r.get_params()["I_c"] == 1.0
    grid = grid_with(heights=np.tile(0.5 * np.arange(9) * CS, (9, 1)))
    img = r.transform(grid)
    assert np.isfinite(grid.slope_min).any()
    assert img.mask.all()
