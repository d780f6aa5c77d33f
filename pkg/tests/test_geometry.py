import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import membership_bruteforce
from palseg import geometry as G
from palseg.synthetic import radial_gradient_annulus, sector_annulus


class TestCalibration:
    def test_rejects_inverted_radii(self):
        with pytest.raises(G.CalibrationError, match="r_inner < r_outer"):
            G.PalCalibration(100, 100, 50, 40)

    def test_rejects_offset_out_of_range(self):
        with pytest.raises(G.CalibrationError, match="theta_offset"):
            G.PalCalibration(100, 100, 10, 40, theta_offset=2 * math.pi)

    def test_json_roundtrip(self, tmp_path, calib):
        path = tmp_path / "c.json"
        G.save_calibration(calib, path)
        assert G.load_calibration(path) == calib

    def test_missing_field_named(self):
        with pytest.raises(G.CalibrationError, match="r_outer"):
            G.PalCalibration.from_dict({"center_x": 1, "center_y": 1, "r_inner": 3})

    def test_center_outside_image(self, calib):
        with pytest.raises(G.CalibrationError, match="outside"):
            G.build_sample_map(calib, 64, 16, raw_w=300, raw_h=200)


class TestForward:
    def test_inner_radius_origin(self, calib):
        assert G.annular_to_unfolded(calib.r_inner, 0.0, calib, 2048, 512) == (0.0, 0.0)

    def test_outer_radius_half_turn(self, calib):
        i, j = G.annular_to_unfolded(calib.r_outer, math.pi, calib, 2048, 512)
        assert i == pytest.approx(512)
        assert j == pytest.approx(1024)

    def test_midpoint_quarter_turn(self, calib):
        r = (calib.r_inner + calib.r_outer) / 2
        i, j = G.annular_to_unfolded(r, math.pi / 2, calib, 2048, 512)
        assert i == pytest.approx(256)
        assert j == pytest.approx(512)

    def test_negative_angle_wraps(self, calib):
        _, j = G.annular_to_unfolded(calib.r_inner, -math.pi / 2, calib, 2048, 512)
        assert j == pytest.approx(1536)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_rejects_non_finite(self, calib, bad):
        with pytest.raises(ValueError):
            G.annular_to_unfolded(bad, 0.0, calib, 2048, 512)
        with pytest.raises(ValueError):
            G.annular_to_unfolded(100.0, bad, calib, 2048, 512)

    def test_monotone(self, calib):
        r = np.linspace(calib.r_inner, calib.r_outer, 200)
        theta = np.linspace(0, 2 * math.pi, 200, endpoint=False)
        i, j = G.annular_to_unfolded(r, theta, calib, 2048, 512)
        assert np.all(np.diff(i) > 0)
        assert np.all(np.diff(j) > 0)

    def test_clockwise_reverses_sweep(self, calib):
        cw = G.PalCalibration(calib.center_x, calib.center_y, calib.r_inner, calib.r_outer, clockwise=True)
        _, j = G.annular_to_unfolded(calib.r_inner, math.pi / 2, cw, 2048, 512)
        assert j == pytest.approx(1536)


class TestInverse:
    def test_theta_zero_axis(self, calib):
        x, y = G.unfolded_to_annular(0, 0, calib, 2048, 512)
        assert (x, y) == pytest.approx((calib.center_x + calib.r_inner, calib.center_y))

    def test_quarter_turn_points_up(self, calib):
        # counterclockwise on screen with y pointing down
        x, y = G.unfolded_to_annular(0, 512, calib, 2048, 512)
        assert x == pytest.approx(calib.center_x)
        assert y == pytest.approx(calib.center_y - calib.r_inner)

    def test_composition(self, calib):
        x, y = G.unfolded_to_annular(123.25, 1500.5, calib, 2048, 512)
        assert G.annular_point_to_unfolded(x, y, calib, 2048, 512) == pytest.approx((123.25, 1500.5), abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(
        cx=st.floats(300, 700),
        cy=st.floats(300, 700),
        r1=st.floats(5, 200),
        width=st.floats(1, 300),
        offset=st.floats(0, 6.28),
        clockwise=st.booleans(),
        seed=st.integers(0, 2**16),
    )
    def test_roundtrip_property(self, cx, cy, r1, width, offset, clockwise, seed):
        calib = G.PalCalibration(cx, cy, r1, r1 + width, offset, clockwise)
        rng = np.random.default_rng(seed)
        i = rng.uniform(0, 512, 500)
        j = rng.uniform(0, 2048, 500)
        x, y = G.unfolded_to_annular(i, j, calib, 2048, 512)
        i2, j2 = G.annular_point_to_unfolded(x, y, calib, 2048, 512)
        # compare j on the circle so 0 and 2048 count as the same column
        dj = np.abs((j2 - j + 1024) % 2048 - 1024)
        assert np.max(np.abs(i2 - i)) < 1e-6
        assert np.max(dj) < 1e-6


class TestSampleMap:
    def test_full_annulus_all_valid(self, calib):
        smap = G.build_sample_map(calib, 256, 64, raw_w=800, raw_h=600)
        assert smap.valid.all()
        assert smap.src_x.shape == (64, 256)

    def test_cropped_annulus_matches_bruteforce(self):
        calib = G.PalCalibration(320.4, 240.6, 60.0, 300.0)
        smap = G.build_sample_map(calib, 360, 90, raw_w=640, raw_h=480)
        expected = membership_bruteforce(calib, 360, 90, 640, 480)
        assert not smap.valid.all()
        np.testing.assert_array_equal(smap.valid, expected)

    def test_default_panorama_size(self, calib):
        smap = G.build_sample_map(calib, 2048, 512, raw_w=800, raw_h=600)
        assert smap.valid.shape == (512, 2048)

    def test_flip_rows_puts_outer_radius_first(self, calib):
        a = G.build_sample_map(calib, 64, 16, 800, 600)
        b = G.build_sample_map(calib, 64, 16, 800, 600, flip_rows=True)
        np.testing.assert_array_equal(a.src_x[::-1], b.src_x)

    def test_disjoint_annulus_rejected(self):
        calib = G.PalCalibration(5.0, 5.0, 500.0, 600.0)
        with pytest.raises(G.CalibrationError, match="does not intersect"):
            G.build_sample_map(calib, 64, 16, 100, 100)

    def test_cache_roundtrip(self, tmp_path, calib):
        smap = G.build_sample_map(calib, 128, 32, 800, 600)
        path = tmp_path / "map.bin"
        G.save_sample_map(smap, path)
        back = G.load_sample_map(path, calib)
        np.testing.assert_array_equal(back.src_x, smap.src_x)
        np.testing.assert_array_equal(back.valid, smap.valid)

    def test_cache_rejects_other_calibration(self, tmp_path, calib):
        path = tmp_path / "map.bin"
        G.save_sample_map(G.build_sample_map(calib, 32, 8, 800, 600), path)
        other = G.PalCalibration(calib.center_x, calib.center_y, calib.r_inner, calib.r_outer + 1)
        with pytest.raises(ValueError, match="different calibration"):
            G.load_sample_map(path, other)


class TestUnfold:
    def test_constant_annulus(self, calib):
        img = np.full((600, 800, 3), (17, 99, 201), dtype=np.uint8)
        smap = G.build_sample_map(calib, 512, 128, 800, 600)
        for interp in ("nearest", "bilinear"):
            out = G.unfold_image(img, smap, interp)
            assert out.shape == (128, 512, 3)
            assert (out[smap.valid] == (17, 99, 201)).all()

    def test_dimension_mismatch(self, calib):
        smap = G.build_sample_map(calib, 64, 16, 800, 600)
        with pytest.raises(ValueError, match="built for"):
            G.unfold_image(np.zeros((600, 801)), smap)

    def test_invalid_pixels_filled(self):
        calib = G.PalCalibration(320.4, 240.6, 60.0, 300.0)
        smap = G.build_sample_map(calib, 360, 90, 640, 480)
        out = G.unfold_image(np.full((480, 640), 200, np.uint8), smap, fill=7)
        assert (out[~smap.valid] == 7).all()
        assert (out[smap.valid] == 200).all()

    def test_radial_gradient_rows_linear(self, calib):
        img = radial_gradient_annulus(800, 600, calib)
        smap = G.build_sample_map(calib, 512, 128, 800, 600)
        out = G.unfold_image(img, smap, "bilinear")
        expected = 255.0 * np.arange(128) / 128
        assert np.max(np.abs(out - expected[:, None])) < 0.05

    def test_sector_bands(self):
        calib = G.PalCalibration(639.5, 639.5, 300.0, 600.0)
        colors = np.array([[k * 30, 255 - k * 30, (k * 70) % 256] for k in range(8)])
        # paint a slightly wider ring so edge rows never round onto the black surround
        painted = G.PalCalibration(639.5, 639.5, 295.0, 605.0)
        img = sector_annulus(1280, 1280, painted, 8, colors)
        smap = G.build_sample_map(calib, 1024, 64, 1280, 1280)
        out = G.unfold_image(img, smap, "nearest")
        d = ((out[:, :, None, :].astype(int) - colors[None, None]) ** 2).sum(-1)
        band = d.argmin(-1)
        for row in band:
            # the panorama is periodic, so the seam at column 0 is an edge too
            edges = np.flatnonzero(row != np.roll(row, 1))
            assert len(edges) == 8
            offset = (edges - np.arange(8) * 128 + 512) % 1024 - 512
            assert np.abs(offset).max() <= 1
            assert len(np.unique(row)) == 8

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), k=st.integers(2, 6))
    def test_nearest_is_label_safe(self, seed, k):
        calib = G.PalCalibration(100.2, 80.9, 20.0, 90.0)
        rng = np.random.default_rng(seed)
        labels = rng.choice(np.array([0, 3, 7, 11, 200, 255][:k], dtype=np.uint8), size=(160, 200))
        smap = G.build_sample_map(calib, 128, 32, 200, 160)
        out = G.unfold_image(labels, smap, "nearest", fill=int(labels[0, 0]))
        assert set(np.unique(out)) <= set(np.unique(labels))

    def test_unknown_interp(self, calib):
        smap = G.build_sample_map(calib, 64, 16, 800, 600)
        with pytest.raises(ValueError, match="interpolation"):
            G.unfold_image(np.zeros((600, 800)), smap, "cubic")
