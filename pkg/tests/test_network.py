"""Prior modules, compensation, dual-domain modules and full subnetworks."""

import numpy as np
import pytest

from ctml import autodiff as ad
from ctml.errors import ConfigurationError, DimensionError, UsageError
from ctml.geometry import ViewMask, make_limited_mask, make_sparse_mask, parallel_geometry
from ctml.network import (TASKS, ModelConfig, Normalization, UNetConfig, compensate, count_parameters,
                          ddnm_forward, init_model, init_unet, pnm_forward, split_params, subnetwork_forward,
                          unet_forward)
from ctml.projector import fbp_array, project_array
from ctml.trainer import AdamState, TrainConfig, adam_step


@pytest.fixture(autouse=True)
def double():
    with ad.precision("double"):
        yield


def _config(n=32, views=24, stages=2, channels=2, **kw):
    g = parallel_geometry(n, views, n, angular_range=(0.0, 360.0))
    return ModelConfig(geometry=g, sv_mask=make_sparse_mask(g, views // 4), lv_mask=make_limited_mask(g, 120.0),
                       unet=UNetConfig(stages=stages, base_channels=channels),
                       norm=Normalization(0.1, 0.5, 1.0, 2.0), **kw)


def _inputs(config, rng, task):
    g = config.geometry
    mu = rng.random((1, 1) + g.image_shape)
    p = rng.random((1, 1) + g.sinogram_shape)
    mask = config.mask(task)
    if mask is not None:
        p = p * (1.0 - mask.matrix(g.n_detectors))
    return p, mu


def _one_step(params, loss_fn):
    with ad.Tape():
        ad.backward(loss_fn())
    adam_step(params, {k: v.grad for k, v in params.items()}, AdamState(), TrainConfig(lr=1e-2))
    with ad.Tape():
        ad.backward(loss_fn())
    return {k: v.grad for k, v in params.items()}


class TestUNet:
    @pytest.mark.parametrize("n", [64, 128])
    def test_shape_and_zero_init(self, rng, n):
        cfg = UNetConfig(stages=5, base_channels=2)
        params = init_unet(cfg, rng)
        out = unet_forward(ad.Tensor(rng.standard_normal((1, 1, n, n))), params, cfg)
        assert out.shape == (1, 1, n, n)
        assert not out.data.any()

    def test_indivisible_size(self, rng):
        cfg = UNetConfig(stages=5)
        with pytest.raises(ConfigurationError):
            unet_forward(ad.Tensor(np.zeros((1, 1, 40, 40))), init_unet(cfg, rng), cfg)

    def test_channel_mismatch(self, rng):
        cfg = UNetConfig(stages=2, base_channels=2, in_channels=2)
        with pytest.raises(DimensionError):
            unet_forward(ad.Tensor(np.zeros((1, 1, 8, 8))), init_unet(cfg, rng), cfg)


class TestPNM:
    def test_identity_at_init(self, rng):
        config = _config()
        params = init_model(config, 0)
        mu = rng.random((1, 1, 32, 32))
        np.testing.assert_array_equal(pnm_forward(ad.Tensor(mu), params, config, "svct").data, mu)

    def test_disabled_is_identity(self, rng):
        config = _config(use_pnm=False)
        params = init_model(config, 0)
        assert not any("pnm" in k for k in params)
        mu = ad.Tensor(rng.random((1, 1, 32, 32)))
        assert pnm_forward(mu, params, config, "fvct") is mu

    def test_gradient_reaches_every_beta(self, rng):
        config = _config()
        params = init_model(config, 1)
        beta, _ = split_params(params, "lvct")
        mu = ad.Tensor(rng.random((1, 1, 32, 32)))
        target = ad.Tensor(rng.random((1, 1, 32, 32)))
        grads = _one_step(beta, lambda: ad.mse_loss(pnm_forward(mu, params, config, "lvct"), target))
        assert all(np.any(g != 0) for g in grads.values())


class TestCompensate:
    def test_nothing_missing(self, rng):
        config = _config()
        g = config.geometry
        p = rng.random((1, 1) + g.sinogram_shape)
        out = compensate(p, ad.Tensor(rng.random((1, 1, 32, 32))), ViewMask.full(g.n_views), "svct", g)
        np.testing.assert_array_equal(out.data, p)

    def test_everything_missing(self, rng):
        config = _config()
        g = config.geometry
        mu = rng.random((1, 1, 32, 32))
        none_kept = ViewMask(np.zeros(g.n_views, dtype=bool))
        out = compensate(np.zeros((1, 1) + g.sinogram_shape), ad.Tensor(mu), none_kept, "lvct", g)
        np.testing.assert_allclose(out.data, project_array(mu, g), rtol=1e-12)

    def test_fvct_concatenates(self, rng):
        config = _config()
        g = config.geometry
        p = rng.random((1, 1) + g.sinogram_shape)
        mu = rng.random((1, 1, 32, 32))
        out = compensate(p, ad.Tensor(mu), None, "fvct", g)
        assert out.shape[1] == 2
        np.testing.assert_array_equal(out.data[:, 1:], p)
        np.testing.assert_allclose(out.data[:, :1], project_array(mu, g), rtol=1e-12)

    @pytest.mark.parametrize("task", ["svct", "lvct"])
    def test_measured_rows_untouched(self, rng, task):
        config = _config()
        g = config.geometry
        p, mu = _inputs(config, rng, task)
        kept = config.mask(task).kept
        out = compensate(p, ad.Tensor(mu), config.mask(task), task, g)
        assert np.array_equal(out.data[..., kept, :], p[..., kept, :])

    def test_unknown_task(self, rng):
        config = _config()
        with pytest.raises(UsageError):
            compensate(np.zeros((1, 1, 24, 32)), ad.Tensor(np.zeros((1, 1, 32, 32))), None, "xvct",
                       config.geometry)


class TestDDNM:
    @pytest.mark.parametrize("task", TASKS)
    def test_init_is_fbp_of_base(self, rng, task):
        config = _config()
        params = init_model(config, 0)
        ch = 2 if task == "fvct" else 1
        pt = rng.random((1, ch) + config.geometry.sinogram_shape)
        out = ddnm_forward(ad.Tensor(pt), params, config, task)
        base = pt[:, 1:] if task == "fvct" else pt
        assert out.shape == (1, 1, 32, 32)
        np.testing.assert_allclose(out.data, fbp_array(base, config.geometry), rtol=1e-10, atol=1e-12)

    def test_wrong_channel_count(self, rng):
        config = _config()
        with pytest.raises(DimensionError):
            ddnm_forward(ad.Tensor(np.zeros((1, 1, 24, 32))), init_model(config, 0), config, "fvct")

    def test_gradient_reaches_sinogram_net(self, rng):
        config = _config()
        params = init_model(config, 2)
        _, gamma = split_params(params, "svct")
        sino = {k: v for k, v in gamma.items() if "/sino/" in k}
        pt = ad.Tensor(rng.random((1, 1) + config.geometry.sinogram_shape))
        target = ad.Tensor(rng.random((1, 1, 32, 32)))
        grads = _one_step(gamma, lambda: ad.mse_loss(ddnm_forward(pt, params, config, "svct"), target))
        assert all(np.any(grads[k] != 0) for k in sino)


class TestSubnetwork:
    @pytest.mark.parametrize("task", TASKS)
    def test_shapes_at_64(self, rng, task):
        config = _config(n=64, views=32, stages=3)
        params = init_model(config, 0)
        prior, out = subnetwork_forward(*_inputs(config, rng, task), params, config, task)
        assert prior.shape == out.shape == (1, 1, 64, 64)

    def test_fvct_init_reproduces_fbp(self, rng):
        config = _config()
        params = init_model(config, 0)
        p, mu = _inputs(config, rng, "fvct")
        _, out = subnetwork_forward(p, mu, params, config, "fvct")
        np.testing.assert_allclose(out.data, fbp_array(p, config.geometry), rtol=1e-10, atol=1e-12)

    def test_image_size_mismatch(self, rng):
        config = _config()
        with pytest.raises(DimensionError):
            subnetwork_forward(np.zeros((1, 1, 24, 32)), np.zeros((1, 1, 16, 16)), init_model(config, 0),
                               config, "svct")

    def test_parameter_sets(self):
        config = _config()
        params = init_model(config, 0)
        counts = {t: count_parameters(params, ns) for t, ns in (("fvct", "ld/"), ("svct", "sv/"), ("lvct", "lv/"))}
        assert counts["svct"] == counts["lvct"]
        # the FVCT sinogram net reads two channels: one extra input plane in its first conv
        assert counts["fvct"] - counts["svct"] == config.unet.base_channels * 9
        beta, gamma = split_params(params, "fvct")
        assert not set(beta) & set(gamma)
        assert set(beta) | set(gamma) == {k for k in params if k.startswith("ld/")}

    def test_tasks_are_independent(self):
        params = init_model(_config(), 0)
        a = params["sv/pnm/enc0.conv1.w"].data
        b = params["lv/pnm/enc0.conv1.w"].data
        assert not np.array_equal(a, b)

    def test_config_round_trip(self):
        config = _config(use_ddnm=False, tasks=("fvct", "lvct"))
        assert ModelConfig.from_dict(config.to_dict()) == config
