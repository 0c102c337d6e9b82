"""Prior modules, compensation and dual-domain modules for the three tasks.

Each task subnetwork runs

    mu_prior = mu + U_prior(mu)                       (prior module)
    p_tilde  = [A mu_prior, p]            FVCT        (compensation)
             = A mu_prior * M + p * (1 - M)  SVCT/LVCT
    p_hat    = base(p_tilde) + U_sino(p_tilde)        (dual-domain module)
    mu_out   = fbp(p_hat) + U_img(fbp(p_hat))

where ``M`` is 1 on missing views and ``base`` is the measured channel for
FVCT and ``p_tilde`` itself otherwise. Every U-net sees inputs normalised
with fixed dataset statistics and ends in a zero-initialised 1x1 conv, so all
residual branches start as the identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, UsageError
from .geometry import ScanGeometry, ViewMask
from .projector import DEFAULT_WINDOW

TASKS = ("fvct", "svct", "lvct")
NAMESPACES = {"fvct": "ld", "svct": "sv", "lvct": "lv"}


@dataclass(frozen=True)
class UNetConfig:
    stages: int = 5
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    residual: bool = True

    def __post_init__(self):
        if self.stages < 1 or self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"invalid U-net config {self}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def check_input(self, shape):
        h, w = shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ConfigurationError(
                f"spatial size {(h, w)} must be divisible by {self.divisor} for a {self.stages}-stage U-net"
            )


def _conv_params(rng, cout, cin, k, prefix, zero=False) -> Dict[str, Tensor]:
    if zero:
        w = np.zeros((cout, cin, k, k))
    else:
        w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
    return {
        f"{prefix}.w": Tensor(w, requires_grad=True, name=f"{prefix}.w"),
        f"{prefix}.b": Tensor(np.zeros(cout), requires_grad=True, name=f"{prefix}.b"),
    }


def init_unet(cfg: UNetConfig, rng: np.random.Generator, prefix: str = "") -> Dict[str, Tensor]:
    """He-initialised U-net weights; the output 1x1 conv is zero."""
    params: Dict[str, Tensor] = {}
    ch = [cfg.base_channels * 2 ** k for k in range(cfg.stages)]
    cin = cfg.in_channels
    for k in range(cfg.stages):
        params.update(_conv_params(rng, ch[k], cin, 3, f"{prefix}enc{k}.conv1"))
        params.update(_conv_params(rng, ch[k], ch[k], 3, f"{prefix}enc{k}.conv2"))
        cin = ch[k]
    for k in range(cfg.stages - 2, -1, -1):
        params.update(_conv_params(rng, ch[k], ch[k + 1] + ch[k], 3, f"{prefix}dec{k}.conv1"))
        params.update(_conv_params(rng, ch[k], ch[k], 3, f"{prefix}dec{k}.conv2"))
    params.update(_conv_params(rng, cfg.out_channels, ch[0], 1, f"{prefix}out", zero=True))
    return params


def _block(x, params, prefix):
    x = ad.relu(ad.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], padding=1))
    return ad.relu(ad.conv2d(x, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1))


def unet_forward(x: Tensor, params: Dict[str, Tensor], cfg: UNetConfig, prefix: str = "") -> Tensor:
    """Plain U-net body (no residual add); output has ``cfg.out_channels``."""
    cfg.check_input(x.shape)
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"U-net expects {cfg.in_channels} input channels, got {x.shape[1]}")
    skips = []
    for k in range(cfg.stages):
        if k:
            x = ad.downsample2(x)
        x = _block(x, params, f"{prefix}enc{k}")
        skips.append(x)
    for k in range(cfg.stages - 2, -1, -1):
        x = ad.concat_channels(ad.upsample2(x), skips[k])
        x = _block(x, params, f"{prefix}dec{k}")
    return ad.conv2d(x, params[f"{prefix}out.w"], params[f"{prefix}out.b"])


@dataclass(frozen=True)
class Normalization:
    """Fixed affine maps ``(x - mean) / scale`` into roughly [-1, 1]."""

    image_mean: float = 0.0
    image_scale: float = 1.0
    sino_mean: float = 0.0
    sino_scale: float = 1.0

    @classmethod
    def from_data(cls, images: np.ndarray, sinos: np.ndarray) -> "Normalization":
        im, sm = float(np.mean(images)), float(np.mean(sinos))
        return cls(im, float(np.max(np.abs(images - im))) or 1.0, sm, float(np.max(np.abs(sinos - sm))) or 1.0)


def _residual_unet(x: Tensor, base: Tensor, params, cfg: UNetConfig, prefix: str, mean: float, scale: float) -> Tensor:
    xn = ad.scale_shift(x, 1.0 / scale, -mean / scale)
    r = unet_forward(xn, params, cfg, prefix)
    if not cfg.residual:
        return ad.scale_shift(r, scale, mean)
    return ad.add(base, ad.scale_shift(r, scale, 0.0))


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild the three subnetworks."""

    geometry: ScanGeometry
    sv_mask: ViewMask
    lv_mask: ViewMask
    unet: UNetConfig = field(default_factory=UNetConfig)
    window: str = DEFAULT_WINDOW
    norm: Normalization = field(default_factory=Normalization)
    use_pnm: bool = True
    use_ddnm: bool = True
    tasks: Tuple[str, ...] = TASKS

    def mask(self, task: str) -> Optional[ViewMask]:
        if task == "fvct":
            return None
        if task == "svct":
            return self.sv_mask
        if task == "lvct":
            return self.lv_mask
        raise UsageError(f"unknown task {task!r}")

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "sv_mask": self.sv_mask.indices.tolist(),
            "lv_mask": self.lv_mask.indices.tolist(),
            "unet": asdict(self.unet),
            "window": self.window,
            "norm": asdict(self.norm),
            "use_pnm": self.use_pnm,
            "use_ddnm": self.use_ddnm,
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        geom = ScanGeometry.from_dict(d["geometry"])
        return cls(
            geometry=geom,
            sv_mask=ViewMask.from_indices(d["sv_mask"], geom.n_views),
            lv_mask=ViewMask.from_indices(d["lv_mask"], geom.n_views),
            unet=UNetConfig(**d.get("unet", {})),
            window=d.get("window", DEFAULT_WINDOW),
            norm=Normalization(**d.get("norm", {})),
            use_pnm=d.get("use_pnm", True),
            use_ddnm=d.get("use_ddnm", True),
            tasks=tuple(d.get("tasks", TASKS)),
        )


def _namespace(task: str) -> str:
    try:
        return NAMESPACES[task] + "/"
    except KeyError:
        raise UsageError(f"unknown task {task!r}") from None


def init_subnetwork(config: ModelConfig, task: str, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Parameters of one task: ``<ns>/pnm/*`` (beta) and ``<ns>/sino/*``, ``<ns>/img/*`` (gamma)."""
    ns = _namespace(task)
    u = config.unet
    params: Dict[str, Tensor] = {}
    if config.use_pnm:
        params.update(init_unet(u, rng, f"{ns}pnm/"))
    if config.use_ddnm:
        sino_in = 2 if task == "fvct" else 1
        params.update(init_unet(UNetConfig(u.stages, u.base_channels, sino_in, 1, u.residual), rng, f"{ns}sino/"))
        params.update(init_unet(u, rng, f"{ns}img/"))
    return params


def init_model(config: ModelConfig, seed: int) -> Dict[str, Tensor]:
    """Independent parameter sets for every enabled task, one RNG stream each."""
    params: Dict[str, Tensor] = {}
    for i, task in enumerate(TASKS):
        if task in config.tasks:
            params.update(init_subnetwork(config, task, np.random.default_rng([seed, i])))
    return params


def split_params(params: Dict[str, Tensor], task: str) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """(beta, gamma) for ``task``."""
    ns = _namespace(task)
    beta = {k: v for k, v in params.items() if k.startswith(ns + "pnm/")}
    gamma = {k: v for k, v in params.items() if k.startswith(ns + "sino/") or k.startswith(ns + "img/")}
    return beta, gamma


def pnm_forward(mu: Tensor, params: Dict[str, Tensor], config: ModelConfig, task: str) -> Tensor:
    if not config.use_pnm:
        return mu
    n = config.norm
    return _residual_unet(mu, mu, params, config.unet, f"{_namespace(task)}pnm/", n.image_mean, n.image_scale)


def compensate(p, mu_prior: Tensor, mask: Optional[ViewMask], task: str, geom: ScanGeometry) -> Tensor:
    """Blend the projected prior with measured data.

    ``p`` is the full-view sinogram (zeros on missing rows for SVCT/LVCT).
    """
    p = ad.as_tensor(p)
    projected = ad.fp_layer(mu_prior, geom)
    if task == "fvct":
        return ad.concat_channels(projected, p)
    if task not in ("svct", "lvct"):
        raise UsageError(f"unknown task {task!r}")
    if mask is None or mask.n_views != geom.n_views:
        raise DimensionError("compensation mask does not match the geometry")
    if p.shape != projected.shape:
        raise DimensionError(f"measured sinogram {p.shape} does not match projection {projected.shape}")
    m = np.broadcast_to(mask.matrix(geom.n_detectors), p.shape).astype(p.data.dtype)
    measured = np.where(m == 0, p.data, 0).astype(p.data.dtype)
    return ad.add(ad.mul(projected, ad.Tensor(m)), ad.Tensor(measured))


def ddnm_forward(p_tilde: Tensor, params: Dict[str, Tensor], config: ModelConfig, task: str) -> Tensor:
    ns = _namespace(task)
    geom, n = config.geometry, config.norm
    expected = 2 if task == "fvct" else 1
    if p_tilde.shape[1] != expected:
        raise DimensionError(f"{task} compensated sinogram needs {expected} channel(s), got {p_tilde.shape[1]}")
    if task == "fvct":
        base = ad.slice_channels(p_tilde, 1, 2)
    else:
        base = p_tilde
    if not config.use_ddnm:
        if task == "fvct":
            base = ad.scale_shift(ad.add(ad.slice_channels(p_tilde, 0, 1), base), 0.5, 0.0)
        return ad.fbp_layer(base, geom, config.window)
    u = config.unet
    sino_cfg = UNetConfig(u.stages, u.base_channels, expected, 1, u.residual)
    restored = _residual_unet(p_tilde, base, params, sino_cfg, f"{ns}sino/", n.sino_mean, n.sino_scale)
    image = ad.fbp_layer(restored, geom, config.window)
    return _residual_unet(image, image, params, u, f"{ns}img/", n.image_mean, n.image_scale)


def subnetwork_forward(p, mu, params: Dict[str, Tensor], config: ModelConfig, task: str) -> Tuple[Tensor, Tensor]:
    """Run one task end to end; returns ``(mu_prior, mu_out)``.

    ``p`` is the full-view (embedded) sinogram batch (B, 1, V, D) and ``mu``
    the task's FBP image batch (B, 1, N, N).
    """
    mu = ad.as_tensor(mu)
    p = ad.as_tensor(p)
    if mu.shape[-2:] != config.geometry.image_shape:
        raise DimensionError(f"image {mu.shape} does not match grid {config.geometry.image_shape}")
    prior = pnm_forward(mu, params, config, task)
    p_tilde = compensate(p, prior, config.mask(task), task, config.geometry)
    return prior, ddnm_forward(p_tilde, params, config, task)


def count_parameters(params: Dict[str, Tensor], prefix: str = "") -> int:
    return int(sum(v.data.size for k, v in params.items() if k.startswith(prefix)))
