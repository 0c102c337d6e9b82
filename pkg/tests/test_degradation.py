"""Low-dose noise, task triplets and dataset directories."""

import logging

import numpy as np
import pytest

from ctml.degradation import (DoseConfig, SimulationConfig, build_dataset, build_triplet, inject_low_dose,
                              read_slice, simulate_slice)
from ctml.errors import ConfigurationError, InputError
from ctml.geometry import parallel_geometry
from ctml.projector import Sinogram, fbp


def _clean(geom, rng, scale=2.0):
    return Sinogram(scale * rng.random(geom.sinogram_shape), geom)


class TestInjectLowDose:
    def test_high_count_limit(self, rng):
        g = parallel_geometry(8, 16, 12)
        p = _clean(g, rng)
        noisy = inject_low_dose(p, 1e9, 1.0, seed=0)
        assert np.sqrt(np.mean((noisy.data - p.data) ** 2) / np.mean(p.data ** 2)) < 1e-3

    def test_unattenuated_beam_is_unbiased(self):
        g = parallel_geometry(8, 100, 100)
        blank = 0.25 * 1e5
        out = inject_low_dose(Sinogram(np.zeros(g.sinogram_shape), g), 1e5, 0.25, seed=3).data
        sigma = 1.0 / np.sqrt(blank)
        assert abs(out.mean()) < 5 * sigma / np.sqrt(out.size)

    def test_deterministic(self, rng):
        g = parallel_geometry(8, 16, 12)
        p = _clean(g, rng)
        a = inject_low_dose(p, 1e4, 0.25, seed=[1, 2])
        b = inject_low_dose(p, 1e4, 0.25, seed=[1, 2])
        assert np.array_equal(a.data, b.data)

    def test_variance_grows_as_dose_drops(self, rng):
        g = parallel_geometry(8, 64, 64)
        p = _clean(g, rng)
        var = [np.var(inject_low_dose(p, 1e5, f, seed=9).data - p.data) for f in (1 / 4, 1 / 6, 1 / 8)]
        assert var[0] < var[1] < var[2]

    def test_negative_line_integrals(self):
        g = parallel_geometry(4, 2, 4)
        p = np.zeros(g.sinogram_shape)
        p[0, 0] = -0.1
        with pytest.raises(InputError):
            inject_low_dose(Sinogram(p, g), 1e5, 0.25, seed=0)

    @pytest.mark.parametrize("i0, frac", [(0.0, 0.5), (1e5, 0.0), (1e5, 1.5)])
    def test_invalid_dose(self, i0, frac):
        with pytest.raises(ConfigurationError):
            DoseConfig(i0, frac)

    def test_photon_floor_counted_and_logged(self, caplog):
        g = parallel_geometry(4, 4, 8)
        p = Sinogram(np.full(g.sinogram_shape, 30.0), g)
        with caplog.at_level(logging.WARNING, logger="ctml"):
            noisy, floored = inject_low_dose(p, 100.0, 1.0, seed=0, return_floor_count=True)
        assert floored == p.data.size
        assert np.all(np.isfinite(noisy.data))
        np.testing.assert_allclose(noisy.data, np.log(100.0))
        assert "floored" in caplog.text


class TestBuildTriplet:
    def test_full_masks_give_identical_tasks(self, rng):
        g = parallel_geometry(16, 12, angular_range=(0.0, 360.0))
        t = build_triplet(_clean(g, rng), g, sv_keep=12, lv_range=360.0, seed=0)
        assert np.array_equal(t.p_sv.data, t.p_ld.data) and np.array_equal(t.p_lv.data, t.p_ld.data)
        np.testing.assert_allclose(t.mu_sv.data, t.mu_ld.data)

    def test_full_scale_shapes(self, rng):
        g = parallel_geometry(8, 1152, 8, angular_range=(0.0, 360.0))
        t = build_triplet(_clean(g, rng), g, DoseConfig(dose_fraction=0.25), sv_keep=144, lv_range=120.0)
        assert t.p_sv.data.shape == (144, 8)
        assert t.p_lv.data.shape == (384, 8)

    def test_rows_are_extracted_not_resimulated(self, rng):
        g = parallel_geometry(16, 96, angular_range=(0.0, 360.0))
        t = build_triplet(_clean(g, rng), g, sv_keep=12, lv_range=120.0, seed=4)
        for j in range(12):
            assert np.array_equal(t.p_sv.data[j], t.p_ld.data[8 * j])
        assert np.array_equal(t.p_lv.data, t.p_ld.data[:32])
        assert np.array_equal(t.embedded("svct")[::8], t.p_sv.data)
        assert not t.embedded("svct")[1::8].any()

    def test_images_are_task_fbp(self, rng):
        g = parallel_geometry(16, 96, angular_range=(0.0, 360.0))
        t = build_triplet(_clean(g, rng), g, sv_keep=12, lv_range=120.0, seed=4)
        np.testing.assert_array_equal(t.mu_sv.data, fbp(t.p_sv).data)
        np.testing.assert_array_equal(t.mu_lv.data, fbp(t.p_lv).data)
        assert t.p_lv.geom.angular_range == (0.0, 120.0)


def _tiny_cfg(**kw):
    base = dict(phantoms=2, size=16, views=24, detectors=16, sparse_keep=6, limited_deg=120.0, seed=0,
                pixel_size=0.1, edge_sigma=1.0)
    base.update(kw)
    return SimulationConfig(**base)


class TestDataset:
    def test_validate_rejects_non_divisor(self):
        with pytest.raises(ConfigurationError):
            _tiny_cfg(sparse_keep=5).validate()

    def test_write_read_round_trip(self, tmp_path):
        out = build_dataset(tmp_path / "d", _tiny_cfg())
        trip, phantom = read_slice(out / "slice_0001")
        ph, ref = simulate_slice(_tiny_cfg(), 1)
        np.testing.assert_array_equal(trip.p_ld.data, ref.p_ld.data.astype(np.float32))
        np.testing.assert_array_equal(phantom.data, ph.data.astype(np.float32))
        assert trip.masks == ref.masks and trip.slice_id == 1

    def test_reproducible_bitwise(self, tmp_path):
        a = build_dataset(tmp_path / "a", _tiny_cfg())
        b = build_dataset(tmp_path / "b", _tiny_cfg())
        for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_subset_build_matches_full_build(self, tmp_path):
        a = build_dataset(tmp_path / "a", _tiny_cfg())
        b = build_dataset(tmp_path / "b", _tiny_cfg(), indices=[1])
        assert (a / "slice_0001" / "ld.ctsg").read_bytes() == (b / "slice_0001" / "ld.ctsg").read_bytes()

    def test_refuses_non_empty_output(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "x").write_text("x")
        with pytest.raises(ConfigurationError):
            build_dataset(tmp_path / "d", _tiny_cfg())

    def test_invalid_config_writes_nothing(self, tmp_path):
        with pytest.raises(ConfigurationError):
            build_dataset(tmp_path / "d", _tiny_cfg(limited_deg=400.0))
        assert list(tmp_path.iterdir()) == []

    def test_missing_slice_file(self, tmp_path):
        out = build_dataset(tmp_path / "d", _tiny_cfg(phantoms=1))
        (out / "slice_0000" / "sv.ctsg").unlink()
        with pytest.raises(FileNotFoundError, match="sv.ctsg"):
            read_slice(out / "slice_0000")
