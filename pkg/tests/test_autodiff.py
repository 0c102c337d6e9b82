"""Tape-based reverse mode: primitives, projector layers and checkpoints."""

import numpy as np
import pytest

from ctml import autodiff as ad
from ctml import projector
from ctml.errors import DimensionError, FormatError, TruncatedFileError, UsageError
from ctml.geometry import fan_geometry, parallel_geometry
from ctml.gradcheck import check_op, numeric_gradient, primitive_checks, relative_error


@pytest.fixture(autouse=True)
def double():
    with ad.precision("double"):
        yield


def _grad(build, *arrays):
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape():
        ad.backward(build(*tensors))
    return [t.grad for t in tensors]


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.eye(3)[:, :, None, None]
        np.testing.assert_array_equal(ad.conv2d(x, w, np.zeros(3)).data, x)

    @pytest.mark.parametrize("size", [6, 20])
    def test_all_ones_on_constant(self, size):
        # size 20 takes the shifted-matmul path, size 6 the im2col path
        c = 0.7
        x = np.full((1, 2, size, size), c)
        out = ad.conv2d(x, np.ones((1, 2, 3, 3)), padding=1).data
        np.testing.assert_allclose(out, 9 * c * 2)

    @pytest.mark.parametrize("shape, wshape, kw", [
        ((2, 3, 6, 5), (4, 3, 3, 3), dict(padding=1)),
        ((1, 2, 12, 10), (3, 2, 3, 3), dict(padding=1)),
        ((1, 2, 7, 6), (3, 2, 3, 3), dict(padding=1, stride=2)),
        ((1, 1, 12, 12), (2, 1, 5, 5), dict(padding=2)),
        ((1, 2, 5, 5), (3, 2, 3, 3), dict(padding=1, padding_mode="zeros")),
    ])
    def test_finite_differences(self, rng, shape, wshape, kw):
        err = check_op(lambda x, w, b: ad.conv2d(x, w, b, **kw),
                       [rng.standard_normal(shape), rng.standard_normal(wshape), rng.standard_normal(wshape[0])])
        assert err < 1e-6

    def test_paths_agree(self, rng, monkeypatch):
        x = rng.standard_normal((2, 3, 16, 16))
        w = rng.standard_normal((4, 3, 3, 3))
        flat = ad.conv2d(x, w, padding=1).data
        monkeypatch.setattr(ad, "FLAT_CONV_PIXELS_PER_CHANNEL", 10 ** 9)
        np.testing.assert_allclose(ad.conv2d(x, w, padding=1).data, flat, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ad.conv2d(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 3, 3)))


class TestPrimitives:
    def test_every_primitive_passes_gradcheck(self, rng):
        results = primitive_checks(rng, [parallel_geometry(16, 12, 24), fan_geometry(16, 12, 24)])
        worst = max(results, key=lambda r: r.error)
        assert worst.error < 1e-6, worst

    def test_relu_of_negative(self, rng):
        x = -np.abs(rng.standard_normal((3, 3)))
        assert not ad.relu(x).data.any()

    def test_up_down_constant(self):
        x = np.full((1, 2, 4, 6), 3.5)
        np.testing.assert_array_equal(ad.upsample2(ad.downsample2(x)).data, x)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            ad.add(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            ad.downsample2(np.zeros((1, 1, 3, 4)))
        with pytest.raises(DimensionError):
            ad.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2)))


class TestMSE:
    def test_identical(self, rng):
        x = rng.standard_normal((3, 4))
        assert float(ad.mse_loss(x, x).data) == 0.0

    def test_offset(self, rng):
        y = rng.standard_normal((5, 7))
        assert float(ad.mse_loss(y + 0.3, y).data) == pytest.approx(0.09, rel=1e-12)

    def test_closed_form_gradient(self, rng):
        x = rng.standard_normal((4, 5))
        (g,) = _grad(lambda t: ad.mse_loss(t, ad.Tensor(np.full((4, 5), 0.2))), x)
        np.testing.assert_allclose(g, 2 * (x - 0.2) / x.size, rtol=1e-14)


class TestBackward:
    def test_unused_leaf_gets_zero(self, rng):
        a = ad.Tensor(rng.standard_normal(3), requires_grad=True)
        b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
        with ad.Tape():
            loss = ad.sum_all(ad.mul(a, a))
            ad.mul(b, 2.0)
            ad.backward(loss)
        assert b.grad is None or not b.grad.any()
        np.testing.assert_allclose(a.grad, 2 * a.data)

    def test_non_scalar(self, rng):
        a = ad.Tensor(rng.standard_normal(3), requires_grad=True)
        with ad.Tape():
            with pytest.raises(UsageError):
                ad.backward(ad.mul(a, a))

    def test_not_recorded(self):
        with pytest.raises(UsageError):
            ad.backward(ad.Tensor(1.0))

    def test_idempotent(self, rng):
        a = ad.Tensor(rng.standard_normal(4), requires_grad=True)
        with ad.Tape():
            loss = ad.sum_all(ad.mul(a, a))
            ad.backward(loss)
            first = a.grad.copy()
            ad.backward(loss)
        np.testing.assert_array_equal(a.grad, first)

    def test_gradient_linearity(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))
        w = rng.standard_normal((2, 1, 3, 3))
        t1, t2 = rng.standard_normal((2, 1, 2, 8, 8))
        l1 = lambda xx, ww: ad.mse_loss(ad.conv2d(xx, ww, padding=1), ad.Tensor(t1))
        l2 = lambda xx, ww: ad.sum_all(ad.relu(ad.conv2d(xx, ww, padding=1)))
        comb = lambda xx, ww: ad.add(ad.mul(l1(xx, ww), 2.0), ad.mul(l2(xx, ww), -0.5))
        g1, g2, gc = _grad(l1, x, w), _grad(l2, x, w), _grad(comb, x, w)
        for a, b, c in zip(g1, g2, gc):
            np.testing.assert_allclose(c, 2 * a - 0.5 * b, rtol=1e-12, atol=1e-12)

    def test_replay_is_bitwise(self, rng):
        x = rng.standard_normal((1, 2, 16, 16))
        w = rng.standard_normal((3, 2, 3, 3))
        f = lambda xx, ww: ad.sum_all(ad.relu(ad.conv2d(xx, ww, padding=1)))
        a, b = _grad(f, x, w), _grad(f, x, w)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))


class TestProjectorLayers:
    @pytest.fixture(params=["parallel", "fan"])
    def geom(self, request):
        return parallel_geometry(16, 12, 24) if request.param == "parallel" else fan_geometry(16, 12, 24)

    def test_fp_gradient_is_backprojected_ones(self, geom, rng):
        (g,) = _grad(lambda m: ad.sum_all(ad.fp_layer(m, geom)), rng.standard_normal((1, 1, 16, 16)))
        np.testing.assert_allclose(g[0, 0], projector.backproject_array(np.ones(geom.sinogram_shape), geom),
                                   rtol=1e-12)

    def test_fp_after_conv_finite_differences(self, geom, rng):
        err = check_op(lambda x, w: ad.fp_layer(ad.conv2d(x, w, padding=1), geom),
                       [rng.standard_normal((1, 1, 16, 16)), rng.standard_normal((1, 1, 3, 3))])
        assert err < 1e-5

    def test_fbp_zero_upstream(self, geom, rng):
        p = ad.Tensor(rng.standard_normal((1, 1) + geom.sinogram_shape), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.sum_all(ad.mul(ad.fbp_layer(p, geom), 0.0)))
        assert not p.grad.any()

    def test_geometry_mismatch(self, geom):
        with pytest.raises(DimensionError):
            ad.fp_layer(np.zeros((1, 1, 8, 8)), geom)
        with pytest.raises(DimensionError):
            ad.fbp_layer(np.zeros((1, 1, 8, 8)), geom)


class TestNumericGradient:
    def test_quadratic(self):
        x = np.array([1.0, -2.0, 0.5])
        g = numeric_gradient(lambda: float(np.sum(x ** 3)), x, 1e-5)
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)
        assert relative_error(g, 3 * x ** 2) < 1e-8


class TestCheckpoint:
    def _params(self, rng):
        return {"b/w": ad.Tensor(rng.standard_normal((2, 3))), "a/b": ad.Tensor(rng.standard_normal(4))}

    def test_round_trip(self, tmp_path, rng):
        p = self._params(rng)
        ad.save_checkpoint(tmp_path / "c.ctpk", p, {"step": 3})
        arrays, meta = ad.load_checkpoint(tmp_path / "c.ctpk")
        assert meta == {"step": 3} and list(arrays) == ["a/b", "b/w"]
        for k in p:
            np.testing.assert_array_equal(arrays[k], p[k].data.astype(np.float32))

    def test_layout(self, tmp_path, rng):
        ad.save_checkpoint(tmp_path / "c.ctpk", self._params(rng))
        raw = (tmp_path / "c.ctpk").read_bytes()
        assert raw[:4] == b"CTPK"
        mlen = int.from_bytes(raw[8:12], "little")
        assert len(raw) - 12 - mlen == 4 * 10

    def test_bad_magic_and_truncation(self, tmp_path, rng):
        path = tmp_path / "c.ctpk"
        ad.save_checkpoint(path, self._params(rng))
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(TruncatedFileError):
            ad.load_checkpoint(path)
        path.write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(FormatError):
            ad.load_checkpoint(path)


class TestPrecision:
    def test_switch(self):
        with ad.precision("single"):
            assert ad.Tensor([1.0]).data.dtype == np.float32
        assert ad.Tensor([1.0]).data.dtype == np.float64

    def test_unknown(self):
        with pytest.raises(UsageError):
            ad.set_precision("half")
