"""Heatmap codec: Gaussian encoding, frame mapping, decoding, file formats."""

import math

import numpy as np
import pytest

from farnet import (
    Frame,
    FrameError,
    FrameTransform,
    HeatmapGrid,
    HeatmapStack,
    LandmarkSet,
    ParameterError,
    ShapeError,
    decode_landmarks,
    encode_heatmap_stack,
    map_coordinates,
    read_heatmap_stack,
    read_landmark_file,
    subpixel_refine,
    top_peaks,
    write_heatmap_stack,
    write_landmark_file,
)


def oracle_gaussian_stack(points, width, height, sigma):
    """Scalar per-pixel reference, kept deliberately naive."""
    out = np.empty((len(points), height, width))
    for c, (lx, ly) in enumerate(points):
        for y in range(height):
            for x in range(width):
                d2 = (x - lx) ** 2 + (y - ly) ** 2
                out[c, y, x] = math.exp(-d2 / (2.0 * sigma * sigma))
    return out


def encode_one(x, y, size=64, sigma=10.0, stride=1):
    frame = Frame.HEATMAP_L0 if stride == 1 else Frame.HEATMAP_L1
    lms = LandmarkSet(np.array([[x, y]]), frame)
    return encode_heatmap_stack(lms, HeatmapGrid(size, size, stride), sigma)


class TestEncode:
    def test_matches_pixel_loop_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            pts = rng.uniform(-2, 17, size=(3, 2))
            stack = encode_heatmap_stack(
                LandmarkSet(pts, Frame.NET_INPUT), HeatmapGrid(16, 16), sigma=3.0
            )
            np.testing.assert_allclose(
                stack.data, oracle_gaussian_stack(pts, 16, 16, 3.0), rtol=0, atol=1e-12
            )

    def test_value_one_at_integer_landmark(self):
        stack = encode_one(40.0, 40.0)
        assert stack.data[0, 40, 40] == 1.0

    def test_value_at_one_sigma_is_exp_minus_half(self):
        stack = encode_one(40.0, 40.0, sigma=10.0)
        assert abs(stack.data[0, 40, 50] - math.exp(-0.5)) < 1e-12

    def test_half_pixel_landmark_has_four_equal_neighbors(self):
        stack = encode_one(40.5, 40.5)
        vals = [stack.data[0, y, x] for y in (40, 41) for x in (40, 41)]
        assert vals[0] == vals[1] == vals[2] == vals[3]
        assert abs(vals[0] - math.exp(-0.5 / 200.0)) < 1e-12

    def test_radially_symmetric_for_equidistant_pixels(self):
        stack = encode_one(32.0, 32.0)
        chan = stack.data[0]
        for a, b in [(3, 4), (1, 7), (5, 12), (0, 9)]:
            vals = [
                chan[32 + dy, 32 + dx]
                for dx, dy in [(a, b), (b, a), (-a, b), (a, -b), (-b, -a)]
            ]
            assert max(vals) - min(vals) < 1e-9

    def test_monotonic_decay_along_a_ray(self):
        chan = encode_one(32.0, 32.0).data[0]
        row = chan[32, 32:]
        assert np.all(np.diff(row) < 0)

    def test_peak_sits_at_nearest_pixel(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            x, y = rng.uniform(0, 63, size=2)
            chan = encode_one(x, y).data[0]
            py, px = np.unravel_index(np.argmax(chan), chan.shape)
            assert (px, py) == (round(x), round(y))
            assert chan[py, px] <= 1.0

    def test_out_of_grid_landmark_leaves_a_tail(self):
        chan = encode_one(-5.0, 32.0).data[0]
        assert np.all(np.isfinite(chan))
        assert 0.0 < chan.max() < 1.0
        assert np.argmax(chan[32]) == 0  # tail strongest at the near edge

    def test_sigma_must_be_positive(self):
        lms = LandmarkSet(np.array([[4.0, 4.0]]), Frame.HEATMAP_L0)
        for bad in (0.0, -1.0):
            with pytest.raises(ParameterError):
                encode_heatmap_stack(lms, HeatmapGrid(16, 16), sigma=bad)

    def test_frame_must_match_grid_stride(self):
        grid1 = HeatmapGrid(16, 16, stride_wrt_input=1)
        grid2 = HeatmapGrid(16, 16, stride_wrt_input=2)
        pts = np.array([[4.0, 4.0]])
        with pytest.raises(FrameError):
            encode_heatmap_stack(LandmarkSet(pts, Frame.ORIGINAL), grid1, 3.0)
        with pytest.raises(FrameError):
            encode_heatmap_stack(LandmarkSet(pts, Frame.NET_INPUT), grid2, 3.0)
        # stride-1 grids accept either stride-1 tag
        encode_heatmap_stack(LandmarkSet(pts, Frame.NET_INPUT), grid1, 3.0)
        encode_heatmap_stack(LandmarkSet(pts, Frame.HEATMAP_L0), grid1, 3.0)
        encode_heatmap_stack(LandmarkSet(pts, Frame.HEATMAP_L1), grid2, 3.0)


class TestFrameMapping:
    def test_known_downscale(self):
        t = FrameTransform((1935, 2400), (640, 800), Frame.ORIGINAL, Frame.NET_INPUT)
        lms = LandmarkSet(np.array([[967.5, 1200.0]]), Frame.ORIGINAL)
        mapped = map_coordinates(lms, t)
        assert mapped.points[0] == pytest.approx((320.0, 400.0), abs=0)
        assert mapped.frame == Frame.NET_INPUT

    def test_round_trip_is_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            src = tuple(rng.integers(50, 3000, size=2))
            dst = tuple(rng.integers(50, 3000, size=2))
            t = FrameTransform(src, dst, Frame.ORIGINAL, Frame.NET_INPUT)
            pts = rng.uniform(0, src, size=(7, 2))
            back = t.inverse().apply(t.apply(pts))
            np.testing.assert_allclose(back, pts, rtol=0, atol=1e-9)

    def test_scaling_is_linear(self):
        t = FrameTransform((300, 200), (120, 160), Frame.ORIGINAL, Frame.NET_INPUT)
        p = np.array([[30.0, 50.0]])
        np.testing.assert_allclose(t.apply(3.0 * p), 3.0 * t.apply(p), atol=1e-12)

    def test_rejects_mismatched_source_frame(self):
        t = FrameTransform((100, 100), (50, 50), Frame.ORIGINAL, Frame.NET_INPUT)
        with pytest.raises(FrameError):
            map_coordinates(LandmarkSet(np.array([[1.0, 1.0]]), Frame.NET_INPUT), t)

    def test_carries_confidence_and_visibility(self):
        t = FrameTransform((100, 100), (50, 50), Frame.ORIGINAL, Frame.NET_INPUT)
        lms = LandmarkSet(
            np.array([[10.0, 10.0], [20.0, 20.0]]),
            Frame.ORIGINAL,
            confidences=np.array([0.9, 0.1]),
            visibility=np.array([True, False]),
        )
        mapped = map_coordinates(lms, t)
        np.testing.assert_array_equal(mapped.confidences, lms.confidences)
        np.testing.assert_array_equal(mapped.visibility, lms.visibility)

    def test_sizes_must_be_positive(self):
        with pytest.raises(ParameterError):
            FrameTransform((0, 100), (50, 50), Frame.ORIGINAL, Frame.NET_INPUT)


class TestDecode:
    def test_integer_landmarks_recovered_exactly(self):
        pts = np.array([[7.0, 9.0], [40.0, 21.0], [63.0, 0.0]])
        stack = encode_heatmap_stack(
            LandmarkSet(pts, Frame.HEATMAP_L0), HeatmapGrid(64, 64), sigma=10.0
        )
        for refine in (False, True):
            decoded = decode_landmarks(stack, refine=refine)
            np.testing.assert_array_equal(decoded.points, pts)
            assert np.all(decoded.visibility)

    def test_subpixel_landmark_recovered_closely(self):
        stack = encode_one(40.3, 39.6)
        decoded = decode_landmarks(stack, refine=True)
        assert np.abs(decoded.points[0] - (40.3, 39.6)).max() < 0.05

    def test_unrefined_decode_returns_the_argmax_pixel(self):
        stack = encode_one(40.3, 39.6)
        decoded = decode_landmarks(stack, refine=False)
        assert decoded.points[0] == pytest.approx((40.0, 40.0), abs=0)

    def test_confidence_equals_peak_value(self):
        stack = encode_one(40.3, 39.6)
        assert decoded_conf(stack) == stack.data[0].max()

    def test_random_subpixel_error_below_half_pixel_per_axis(self):
        rng = np.random.default_rng(17)
        pts = rng.uniform(0, 63, size=(300, 2))
        stack = encode_heatmap_stack(
            LandmarkSet(pts, Frame.HEATMAP_L0), HeatmapGrid(64, 64), sigma=10.0
        )
        decoded = decode_landmarks(stack, refine=True)
        assert np.abs(decoded.points - pts).max() <= 0.5

    def test_interior_subpixel_error_tiny(self):
        rng = np.random.default_rng(19)
        pts = rng.uniform(2, 61, size=(150, 2))
        stack = encode_heatmap_stack(
            LandmarkSet(pts, Frame.HEATMAP_L0), HeatmapGrid(64, 64), sigma=10.0
        )
        decoded = decode_landmarks(stack, refine=True)
        radial = np.linalg.norm(decoded.points - pts, axis=1)
        assert radial.max() < 0.05

    def test_all_zero_channel_flagged_not_visible(self):
        data = np.zeros((2, 16, 16))
        data[1, 5, 6] = 1.0
        decoded = decode_landmarks(HeatmapStack(data, HeatmapGrid(16, 16)))
        assert decoded.confidences[0] == 0.0
        assert not decoded.visibility[0]
        assert decoded.visibility[1]
        assert tuple(decoded.points[1]) == (6.0, 5.0)

    def test_min_peak_threshold(self):
        data = np.full((1, 8, 8), 1e-9)
        decoded = decode_landmarks(HeatmapStack(data, HeatmapGrid(8, 8)), min_peak=1e-6)
        assert not decoded.visibility[0]
        decoded = decode_landmarks(HeatmapStack(data, HeatmapGrid(8, 8)), min_peak=1e-12)
        assert decoded.visibility[0]

    def test_decoded_frame_follows_grid_stride(self):
        s1 = encode_one(10.0, 10.0, stride=1)
        s2 = encode_one(10.0, 10.0, size=32, stride=2)
        assert decode_landmarks(s1).frame == Frame.HEATMAP_L0
        assert decode_landmarks(s2).frame == Frame.HEATMAP_L1


def decoded_conf(stack):
    return float(decode_landmarks(stack).confidences[0])


class TestSubpixelRefine:
    def test_symmetric_bump_keeps_integer_peak(self):
        ys, xs = np.mgrid[0:5, 0:5].astype(float)
        chan = 1.0 - 0.1 * ((xs - 2) ** 2 + (ys - 2) ** 2)
        assert subpixel_refine(chan, (2, 2)) == (2.0, 2.0)

    def test_recovers_known_offset(self):
        chan = encode_one(40.3, 40.0).data[0]
        rx, ry = subpixel_refine(chan, (40, 40))
        assert abs(rx - 40.3) < 0.1
        assert abs(ry - 40.0) < 0.1

    def test_flat_neighborhood_falls_back(self):
        chan = np.ones((9, 9))
        assert subpixel_refine(chan, (4, 4)) == (4.0, 4.0)

    def test_border_peak_falls_back(self):
        chan = encode_one(0.4, 31.0, size=32).data[0]
        py, px = np.unravel_index(np.argmax(chan), chan.shape)
        assert subpixel_refine(chan, (px, py)) == (float(px), float(py))

    def test_non_concave_window_falls_back(self):
        chan = np.zeros((5, 5))
        chan[2] = [1.0, 0.6, 0.6, 0.6, 1.0]  # dxx >= 0 at (2, 2)
        assert subpixel_refine(chan, (2, 2)) == (2.0, 2.0)

    def test_offsets_stay_inside_half_pixel(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            x, y = rng.uniform(4, 27, size=2)
            chan = encode_one(x, y, size=32).data[0]
            py, px = np.unravel_index(np.argmax(chan), chan.shape)
            rx, ry = subpixel_refine(chan, (px, py))
            assert abs(rx - px) < 0.5 and abs(ry - py) < 0.5


class TestHeatmapFiles:
    def test_float32_round_trip_is_bit_exact(self, tmp_path):
        data = np.random.default_rng(0).random((3, 12, 10)).astype(np.float32)
        path = tmp_path / "stack.hms"
        write_heatmap_stack(HeatmapStack(data, HeatmapGrid(10, 12)), path)
        back = read_heatmap_stack(path)
        np.testing.assert_array_equal(back.data, data)
        assert (back.grid.width, back.grid.height) == (10, 12)

    def test_float64_data_round_trips_through_float32(self, tmp_path):
        data = np.random.default_rng(1).random((2, 6, 6))
        path = tmp_path / "stack.hms"
        write_heatmap_stack(HeatmapStack(data, HeatmapGrid(6, 6)), path)
        np.testing.assert_array_equal(read_heatmap_stack(path).data, data.astype(np.float32))

    def test_stride_tag_is_callers_choice(self, tmp_path):
        data = np.zeros((1, 4, 4), dtype=np.float32)
        path = tmp_path / "stack.hms"
        write_heatmap_stack(HeatmapStack(data, HeatmapGrid(4, 4)), path)
        assert read_heatmap_stack(path, stride_wrt_input=2).grid.stride_wrt_input == 2

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParameterError):
            read_heatmap_stack(path)

    def test_landmark_file_round_trip(self, tmp_path):
        pts = np.array([[12.345678, 0.000001], [639.999999, 799.5]])
        path = tmp_path / "lm.txt"
        write_landmark_file(LandmarkSet(pts, Frame.ORIGINAL), path)
        back = read_landmark_file(path)
        np.testing.assert_allclose(back.points, pts, rtol=0, atol=1e-6)
        assert back.frame == Frame.ORIGINAL

    def test_landmark_file_frame_override_and_blank_lines(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text("1.0,2.0\n\n3.5,4.5\n", encoding="utf-8")
        back = read_landmark_file(path, frame=Frame.NET_INPUT)
        assert back.k == 2
        assert back.frame == Frame.NET_INPUT


class TestContainers:
    def test_landmark_set_validation(self):
        with pytest.raises(ShapeError):
            LandmarkSet(np.zeros((3, 3)), Frame.ORIGINAL)
        with pytest.raises(ParameterError):
            LandmarkSet(np.array([[np.nan, 0.0]]), Frame.ORIGINAL)
        with pytest.raises(ShapeError):
            LandmarkSet(np.zeros((3, 2)), Frame.ORIGINAL, confidences=np.zeros(2))
        with pytest.raises(ShapeError):
            LandmarkSet(np.zeros((3, 2)), Frame.ORIGINAL, visibility=np.zeros(4, bool))

    def test_with_frame_retags_without_moving_points(self):
        lms = LandmarkSet(np.array([[1.0, 2.0]]), Frame.NET_INPUT)
        retagged = lms.with_frame(Frame.HEATMAP_L0)
        assert retagged.frame == Frame.HEATMAP_L0
        np.testing.assert_array_equal(retagged.points, lms.points)

    def test_grid_validation(self):
        with pytest.raises(ParameterError):
            HeatmapGrid(0, 4)
        with pytest.raises(ParameterError):
            HeatmapGrid(4, 4, stride_wrt_input=3)
        assert HeatmapGrid(4, 4, 1).frame == Frame.HEATMAP_L0
        assert HeatmapGrid(4, 4, 2).frame == Frame.HEATMAP_L1

    def test_grid_contains(self):
        grid = HeatmapGrid(8, 6)
        assert grid.contains(0.0, 0.0) and grid.contains(7.0, 5.0)
        assert not grid.contains(7.5, 0.0)
        assert not grid.contains(0.0, -0.1)

    def test_stack_validation(self):
        with pytest.raises(ShapeError):
            HeatmapStack(np.zeros((4, 4)), HeatmapGrid(4, 4))
        with pytest.raises(ShapeError):
            HeatmapStack(np.zeros((1, 4, 5)), HeatmapGrid(4, 4))

    def test_top_peaks_orders_by_value(self):
        chan = np.zeros((16, 16))
        chan[3, 4] = 0.9
        chan[10, 12] = 0.7
        peaks = top_peaks(chan, n=2, min_value=0.1)
        assert peaks[0][:2] == (4, 3)
        assert peaks[1][:2] == (12, 10)
