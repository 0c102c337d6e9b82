"""View masks, compact extraction and geometry serialisation."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctml.errors import ConfigurationError, DimensionError
from ctml.geometry import (ScanGeometry, ViewMask, embed_full, extract_compact, fan_geometry,
                           make_limited_mask, make_sparse_mask, parallel_geometry)
from ctml.projector import Sinogram


def _geom(n_views, extent=360.0, n_det=8):
    return parallel_geometry(8, n_views, n_det, angular_range=(0.0, extent))


class TestScanGeometry:
    def test_view_angles_uniform(self):
        g = parallel_geometry(16, 12, angular_range=(10.0, 180.0))
        np.testing.assert_allclose(g.view_angles(), 10.0 + np.arange(12) * 15.0)

    @pytest.mark.parametrize("kwargs", [
        dict(n_views=0), dict(n_detectors=0), dict(grid_size=0), dict(pixel_size=0.0),
    ])
    def test_rejects_nonpositive_counts(self, kwargs):
        base = dict(beam_mode="parallel", n_views=4, angular_range=(0.0, 180.0), n_detectors=4,
                    grid_size=4, pixel_size=1.0, detector_spacing=1.0)
        base.update(kwargs)
        with pytest.raises(ConfigurationError):
            ScanGeometry(**base)

    def test_fan_source_must_be_outside_support(self):
        with pytest.raises(ConfigurationError):
            fan_geometry(32, 8, 16, source_to_center=20.0)

    def test_fan_default_source_is_twice_diagonal(self):
        g = fan_geometry(32, 8, 16)
        assert g.source_to_center == pytest.approx(2 * 32 * np.sqrt(2))

    @pytest.mark.parametrize("g", [parallel_geometry(16, 12), fan_geometry(16, 12, 20)])
    def test_json_round_trip(self, g):
        d = json.loads(g.to_json())
        assert set(d) == {"beam_mode", "n_views", "angular_range", "n_detectors", "detector_spacing",
                          "fan_increment", "source_to_center", "grid_size", "pixel_size"}
        assert ScanGeometry.from_json(g.to_json()) == g


class TestSparseMask:
    def test_full_scale(self):
        m = make_sparse_mask(_geom(1152), 144)
        assert m.keep_count == 144
        np.testing.assert_array_equal(m.indices, np.arange(0, 1152, 8))

    def test_keep_all_is_zero_matrix(self):
        m = make_sparse_mask(_geom(96), 96)
        assert not m.matrix(8).any()

    def test_toy_stride(self):
        np.testing.assert_array_equal(make_sparse_mask(_geom(96), 12).indices, np.arange(0, 96, 8))

    def test_non_divisor_names_both_values(self):
        with pytest.raises(ConfigurationError, match="35.*288|288.*35"):
            make_sparse_mask(_geom(288), 35)

    @given(st.integers(1, 64), st.integers(1, 12))
    def test_count_for_divisor_pairs(self, keep, mult):
        m = make_sparse_mask(_geom(keep * mult), keep)
        assert m.keep_count == keep
        assert set(np.diff(m.indices)) <= {mult}


class TestLimitedMask:
    def test_full_scale(self):
        m = make_limited_mask(_geom(1152), 120.0)
        assert m.keep_count == 384
        np.testing.assert_array_equal(m.indices, np.arange(384))

    def test_full_extent_keeps_all(self):
        assert not make_limited_mask(_geom(96), 360.0).matrix(4).any()

    def test_toy(self):
        np.testing.assert_array_equal(make_limited_mask(_geom(96), 120.0).indices, np.arange(32))

    def test_start_view(self):
        np.testing.assert_array_equal(make_limited_mask(_geom(96), 120.0, 10).indices, np.arange(10, 42))

    def test_range_exceeds_extent(self):
        with pytest.raises(ConfigurationError):
            make_limited_mask(_geom(96, 180.0), 200.0)

    def test_arc_must_fit(self):
        with pytest.raises(ConfigurationError):
            make_limited_mask(_geom(96), 120.0, 80)

    @given(st.integers(4, 400), st.floats(1.0, 360.0))
    def test_run_length_within_one_view(self, n_views, deg):
        g = _geom(n_views)
        if round(deg / 360.0 * n_views) < 1:
            return
        m = make_limited_mask(g, deg)
        assert abs(m.keep_count * g.view_increment - deg) <= g.view_increment
        assert np.all(np.diff(m.indices) == 1)


class TestViewMask:
    def test_matrix_marks_missing_views(self):
        m = ViewMask.from_indices([0, 2], 4)
        np.testing.assert_array_equal(m.matrix(3)[:, 0], [0, 1, 0, 1])
        assert m.matrix(3).shape == (4, 3)

    def test_json_is_kept_indices(self):
        m = ViewMask.from_indices([1, 3], 5)
        assert json.loads(m.to_json()) == [1, 3]
        assert ViewMask.from_json(m.to_json(), 5) == m

    def test_out_of_range_index(self):
        with pytest.raises(DimensionError):
            ViewMask.from_indices([5], 5)


class TestExtractEmbed:
    def test_keep_all_is_identity(self, rng):
        g = _geom(24)
        p = Sinogram(rng.standard_normal(g.sinogram_shape), g)
        q, cg = extract_compact(p, make_sparse_mask(g, 24))
        np.testing.assert_array_equal(q.data, p.data)
        assert cg == g

    def test_sparse_full_scale_increment(self):
        g = _geom(1152, n_det=4)
        p = Sinogram(np.zeros(g.sinogram_shape), g)
        q, cg = extract_compact(p, make_sparse_mask(g, 144))
        assert q.data.shape == (144, 4)
        assert cg.view_increment == pytest.approx(2.5)
        np.testing.assert_allclose(cg.view_angles(), g.view_angles()[::8])

    def test_limited_full_scale_span(self):
        g = _geom(1152, n_det=4)
        q, cg = extract_compact(Sinogram(np.zeros(g.sinogram_shape), g), make_limited_mask(g, 120.0))
        assert q.data.shape == (384, 4)
        assert cg.angular_range == (0.0, 120.0)

    def test_shape_mismatch(self):
        g = _geom(24)
        with pytest.raises(DimensionError):
            extract_compact(np.zeros((12, 8)), make_sparse_mask(g, 6), g)

    def test_embed_zero(self):
        g = _geom(24)
        m = make_sparse_mask(g, 6)
        assert not embed_full(np.zeros((6, 8)), m, g).data.any()

    def test_embed_row_mismatch(self):
        g = _geom(24)
        with pytest.raises(DimensionError):
            embed_full(np.zeros((5, 8)), make_sparse_mask(g, 6), g)

    @settings(max_examples=30)
    @given(st.sampled_from([1, 2, 3, 4, 6, 8, 12, 24]), st.integers(0, 2 ** 31))
    def test_round_trip(self, keep, seed):
        g = _geom(24)
        m = make_sparse_mask(g, keep)
        x = np.random.default_rng(seed).standard_normal((keep, 8))
        full = embed_full(x, m, g)
        np.testing.assert_array_equal(extract_compact(full, m)[0].data, x)
        assert not full.data[~m.kept].any()
