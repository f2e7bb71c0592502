import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenediff.roadgraph import Polyline, RoadGraph, resample_polyline, split_and_pad
from scenediff.scene import EgoFrame, FeatureScales


def ceil_split_sizes(n, cap=10):
    """Independent oracle: ceil-split segment sizes."""
    k = -(-n // cap)
    base, rem = divmod(n, k)
    return [base + 1] * rem + [base] * (k - rem)


class TestPolyline:
    def test_requires_ten_slots(self):
        with pytest.raises(ValueError):
            Polyline(np.zeros((9, 2)), np.zeros(9, bool))

    def test_pad_slots_must_be_zero(self):
        pts = np.ones((10, 2))
        pad = np.zeros(10, bool)
        pad[5:] = True
        with pytest.raises(ValueError):
            Polyline(pts, pad)

    def test_nonfinite_real_point_rejected(self):
        pts = np.zeros((10, 2))
        pts[0, 0] = np.nan
        with pytest.raises(ValueError):
            Polyline(pts, np.zeros(10, bool))


class TestSplitAndPad:
    def test_exact_ten_points(self):
        out = split_and_pad(np.arange(20, dtype=float).reshape(10, 2))
        assert len(out) == 1
        assert out[0].real_count == 10
        assert not out[0].pad.any()

    def test_four_points_padded(self):
        out = split_and_pad(np.ones((4, 2)))
        assert len(out) == 1
        assert out[0].real_count == 4
        assert out[0].pad.sum() == 6

    def test_twenty_three_points(self):
        out = split_and_pad(np.arange(46, dtype=float).reshape(23, 2))
        assert [p.real_count for p in out] == ceil_split_sizes(23) == [8, 8, 7]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_and_pad(np.zeros((0, 2)))

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 137))
    def test_conservation_and_order(self, n):
        pts = np.arange(2 * n, dtype=float).reshape(n, 2)
        out = split_and_pad(pts)
        sizes = [p.real_count for p in out]
        assert sizes == ceil_split_sizes(n)
        assert max(sizes) - min(sizes) <= 1
        joined = np.concatenate([p.real_points for p in out])
        assert np.array_equal(joined, pts)


class TestRoadGraph:
    def test_array_roundtrip(self):
        polys = split_and_pad(np.random.default_rng(0).normal(size=(27, 2)))
        g = RoadGraph(polys)
        pts, pad = g.to_arrays()
        g2 = RoadGraph.from_arrays(pts, pad)
        p2, q2 = g2.to_arrays()
        assert np.array_equal(pts, p2) and np.array_equal(pad, q2)

    def test_transform_keeps_pads_zero(self):
        polys = split_and_pad(np.random.default_rng(0).normal(size=(13, 2)))
        g = RoadGraph(polys)
        frame = EgoFrame((3.0, -2.0), 0.7, FeatureScales(0.05, 1.0))
        g2 = g.transformed(frame)
        pts, pad = g2.to_arrays()
        assert np.all(pts[pad] == 0.0)

    def test_resample_spacing(self):
        line = np.stack([np.linspace(0, 100, 500), np.zeros(500)], axis=1)
        out = resample_polyline(line, 2.5)
        d = np.linalg.norm(np.diff(out, axis=0), axis=1)
        assert np.allclose(d, d[0], atol=1e-9)
        assert d[0] == pytest.approx(2.5, rel=0.02)
