"""Finite-difference verification of the differentiable building blocks.

Three categories are checked in double precision:

``primitives``
    every autodiff op against central differences over all input entries;
``adjoint``
    ``<A x, y> = <x, A^T y>`` for the projector, its pixel-weighted variant
    and FBP;
``end_to_end``
    a tiny three-task model (fp_layer, compensation, fbp_layer and U-nets)
    against central differences on sampled parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import projector
from .geometry import ScanGeometry, fan_geometry, make_limited_mask, make_sparse_mask, parallel_geometry

THRESHOLDS = {"primitives": 1e-6, "adjoint": 1e-10, "end_to_end": 1e-4}


@dataclass
class CheckResult:
    category: str
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < THRESHOLDS[self.category]


@dataclass
class Report:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self) -> Dict[str, CheckResult]:
        out: Dict[str, CheckResult] = {}
        for r in self.results:
            if r.category not in out or r.error > out[r.category].error:
                out[r.category] = r
        return out

    def lines(self) -> List[str]:
        lines = []
        for cat, r in self.worst().items():
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {cat:<11} worst rel. error {r.error:.3e} ({r.name}; limit {THRESHOLDS[cat]:.0e})")
        return lines


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-6,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check_op(build: Callable[..., ad.Tensor], inputs: Sequence[np.ndarray], seed: int = 0) -> float:
    """Worst relative gradient error of ``sum(w * build(*inputs))`` over all inputs."""
    with ad.precision("double"):
        tensors = [ad.Tensor(x, requires_grad=True) for x in inputs]
        probe = build(*tensors)
        w = np.random.default_rng(seed).standard_normal(probe.shape)

        def loss_value():
            return float(np.sum(w * build(*tensors).data))

        with ad.Tape():
            out = build(*tensors)
            loss = ad.sum_all(ad.mul(out, ad.Tensor(w)))
            ad.backward(loss)
        worst = 0.0
        for t in tensors:
            analytic = t.grad.copy()
            numeric = numeric_gradient(loss_value, t.data)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)


def primitive_checks(rng: np.random.Generator, geoms: Sequence[ScanGeometry]) -> List[CheckResult]:
    r = lambda *s: rng.standard_normal(s)
    cases = {
        "add": (ad.add, [r(2, 3), r(2, 3)]),
        "sub": (ad.sub, [r(2, 3), r(2, 3)]),
        "mul": (ad.mul, [r(2, 3), r(2, 3)]),
        "mul_scalar": (lambda x: ad.mul(x, -1.7), [r(3, 4)]),
        "scale_shift": (lambda x: ad.scale_shift(x, 0.3, -2.0), [r(3, 4)]),
        "relu": (ad.relu, [_away_from_zero(rng, (4, 5))]),
        "sum_all": (ad.sum_all, [r(3, 3)]),
        "concat_channels": (ad.concat_channels, [r(2, 2, 4, 4), r(2, 3, 4, 4)]),
        "slice_channels": (lambda x: ad.slice_channels(x, 1, 3), [r(2, 4, 3, 3)]),
        "downsample2": (ad.downsample2, [r(2, 2, 4, 6)]),
        "upsample2": (ad.upsample2, [r(2, 2, 3, 2)]),
        "mse_loss": (ad.mse_loss, [r(3, 5), r(3, 5)]),
        "conv2d_reflect": (lambda x, w, b: ad.conv2d(x, w, b, padding=1), [r(2, 3, 6, 5), r(4, 3, 3, 3), r(4)]),
        "conv2d_zeros": (lambda x, w, b: ad.conv2d(x, w, b, padding=1, padding_mode="zeros"),
                         [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        "conv2d_1x1": (lambda x, w, b: ad.conv2d(x, w, b), [r(2, 3, 4, 4), r(2, 3, 1, 1), r(2)]),
        "conv2d_stride2": (lambda x, w: ad.conv2d(x, w, stride=2, padding=1), [r(1, 2, 7, 6), r(3, 2, 3, 3)]),
        # large enough to take the shifted-matmul path
        "conv2d_flat": (lambda x, w, b: ad.conv2d(x, w, b, padding=1), [r(2, 2, 12, 10), r(3, 2, 3, 3), r(3)]),
        "conv2d_flat_pad2": (lambda x, w: ad.conv2d(x, w, padding=2), [r(1, 1, 12, 12), r(2, 1, 5, 5)]),
    }
    results = [CheckResult("primitives", name, check_op(fn, args)) for name, (fn, args) in cases.items()]
    for g in geoms:
        tag = "fan" if g.is_fan else "parallel"
        results.append(CheckResult("primitives", f"fp_layer[{tag}]",
                                   check_op(lambda x: ad.fp_layer(x, g), [r(1, 1, *g.image_shape)])))
        results.append(CheckResult("primitives", f"fbp_layer[{tag}]",
                                   check_op(lambda p: ad.fbp_layer(p, g), [r(1, 1, *g.sinogram_shape)])))
    return results


def adjoint_error(geom: ScanGeometry, rng: np.random.Generator, kind: str = "projector",
                  backend: Optional[str] = None) -> float:
    """``|<Ax, y> - <x, A^T y>| / (||Ax|| ||y||)`` for one random pair."""
    x = rng.standard_normal(geom.image_shape)
    y = rng.standard_normal(geom.sinogram_shape)
    if kind == "projector":
        ax = projector.project_array(x, geom, backend=backend)
        aty = projector.backproject_array(y, geom, backend=backend)
    elif kind == "weighted":
        ax = projector.project_array(x, geom, weighted=True, backend=backend)
        aty = projector.backproject_array(y, geom, weighted=True, backend=backend)
    elif kind == "fbp":
        # FBP maps sinogram -> image; test <F y, x> = <y, F^T x>
        fy = projector.fbp_array(y, geom, backend=backend)
        ftx = projector.fbp_adjoint_array(x, geom, backend=backend)
        return float(abs(np.vdot(fy, x) - np.vdot(y, ftx)) / (np.linalg.norm(fy) * np.linalg.norm(x)))
    else:
        raise ValueError(f"unknown adjoint kind {kind!r}")
    return float(abs(np.vdot(ax, y) - np.vdot(x, aty)) / (np.linalg.norm(ax) * np.linalg.norm(y)))


def adjoint_checks(rng: np.random.Generator, geoms: Sequence[ScanGeometry], pairs: int = 5) -> List[CheckResult]:
    results = []
    for g in geoms:
        tag = "fan" if g.is_fan else "parallel"
        for kind in ("projector", "weighted", "fbp"):
            err = max(adjoint_error(g, rng, kind) for _ in range(pairs))
            results.append(CheckResult("adjoint", f"{kind}[{tag}]", err))
    return results


def tiny_model_config(geom: ScanGeometry, sv_keep: int, lv_deg: float):
    from .network import ModelConfig, UNetConfig

    return ModelConfig(geometry=geom, sv_mask=make_sparse_mask(geom, sv_keep),
                       lv_mask=make_limited_mask(geom, lv_deg),
                       unet=UNetConfig(stages=2, base_channels=2))


def end_to_end_check(geom: ScanGeometry, rng: np.random.Generator, samples: int = 60,
                     sv_keep: int = 8, lv_deg: Optional[float] = None) -> CheckResult:
    """Gradient of the full three-task objective w.r.t. sampled parameters."""
    from .network import init_model, subnetwork_forward
    from .trainer import loss_total

    if lv_deg is None:
        lv_deg = geom.angular_range[1] * 2 / 3
    config = tiny_model_config(geom, sv_keep, lv_deg)
    with ad.precision("double"):
        params = init_model(config, seed=int(rng.integers(1 << 30)))
        # random output layers so every parameter influences the loss
        for p in params.values():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        mu = {t: rng.random((1, 1) + geom.image_shape) for t in config.tasks}
        sino = {t: rng.random((1, 1) + geom.sinogram_shape) for t in config.tasks}
        for t in ("svct", "lvct"):
            sino[t] = sino[t] * (1.0 - config.mask(t).matrix(geom.n_detectors))

        def objective():
            priors, outs = {}, {}
            for t in config.tasks:
                priors[t], outs[t] = subnetwork_forward(sino[t], mu[t], params, config, t)
            return loss_total(priors, outs, mu["fvct"]).total

        with ad.Tape():
            ad.backward(objective())
        value = lambda: float(objective().data)
        names = sorted(params)
        # every tensor once, then random extras; a sample whose difference
        # quotients at h and 2h disagree straddles a ReLU kink and is redrawn
        queue = [(k, int(rng.integers(params[k].data.size))) for k in names]
        analytic, numeric, skipped = [], [], 0
        while len(analytic) < max(samples, len(names)):
            if queue:
                k, i = queue.pop(0)
            else:
                k = names[int(rng.integers(len(names)))]
                i = int(rng.integers(params[k].data.size))
            n1, n2 = (numeric_gradient(value, params[k].data, h, [i])[0] for h in (1e-6, 2e-6))
            if abs(n1 - n2) > 1e-6 * max(abs(n1), 1e-2) and skipped < 10 * samples:
                skipped += 1
                queue.insert(0, (k, int(rng.integers(params[k].data.size))))
                continue
            analytic.append(float(params[k].grad.reshape(-1)[i]))
            numeric.append(n1)
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = np.max(np.abs(numeric))
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    tag = "fan" if geom.is_fan else "parallel"
    return CheckResult("end_to_end", f"three-task model[{tag}, {len(analytic)} params, {skipped} kinks redrawn]",
                       float(err.max()))


def default_geometries(full: bool = False) -> List[ScanGeometry]:
    geoms = [parallel_geometry(16, 12, 24, angular_range=(0.0, 180.0))]
    if full:
        geoms.append(fan_geometry(16, 12, 24))
    return geoms


def run_suite(full: bool = False, seed: int = 0) -> Report:
    """All three categories; ``full`` adds fan-beam geometry everywhere."""
    rng = np.random.default_rng(seed)
    geoms = default_geometries(full)
    report = Report()
    report.results += primitive_checks(rng, geoms)
    adj_geoms = [parallel_geometry(32, 24), fan_geometry(32, 24, 48)] if full else [parallel_geometry(32, 24)]
    report.results += adjoint_checks(rng, adj_geoms)
    e2e = [parallel_geometry(32, 32, 48, angular_range=(0.0, 360.0))]
    if full:
        e2e.append(fan_geometry(32, 32, 48))
    for g in e2e:
        report.results.append(end_to_end_check(g, rng))
    return report
