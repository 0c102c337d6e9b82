"""Cross-task mutual-learning objective, Adam and the training loop.

Losses use the mean-squared-error convention for every ``||a - b||`` term:

* ``L_ml_prior`` and ``L_ml_out`` sum the pairwise MSEs among the enabled
  tasks' prior images and final outputs,
* ``L_rc`` ties the FVCT prior and output to the FVCT FBP image,
* ``L_total = w_prior * L_ml_prior + w_out * L_ml_out + w_rc * L_rc``.

All three subnetworks are updated by one joint Adam step per batch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import io
from .autodiff import Tensor
from .degradation import TaskTriplet, read_slice
from .errors import ConfigurationError, InputError, NumericalError, UsageError
from .geometry import ScanGeometry
from .metrics import psnr
from .network import (NAMESPACES, TASKS, ModelConfig, Normalization, UNetConfig, init_model,
                      subnetwork_forward)
from .projector import DEFAULT_WINDOW, WINDOWS

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_pnm", "no_ddnm", "no_fvct", "no_svct", "no_lvct")
METRIC_COLUMNS = ("step", "L_ml_prior", "L_ml_out", "L_rc", "L_total", "psnr_fvct", "psnr_svct", "psnr_lvct")
CHECKPOINT_NAME = "checkpoint.ctpk"


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser, schedule and model-shape settings of one run.

    ``lr`` defaults to 1e-5; :meth:`toy` returns the small-data preset with
    ``lr = 1e-3``.
    """

    lr: float = 1e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    steps: int = 1000
    batch: int = 1
    seed: int = 0
    ablation: str = "full"
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    unet_stages: int = 5
    unet_channels: int = 8
    window: Optional[str] = None  # None: the dataset's simulation window
    precision: str = "single"
    validate_every: int = 100
    checkpoint_every: int = 0
    max_val_slices: int = 8

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if not self.lr > 0 or not self.adam_eps > 0:
            raise ConfigurationError("learning rate and eps must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigurationError("steps must be >= 0 and batch >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.window is not None and self.window not in WINDOWS:
            raise ConfigurationError(f"unknown filter window {self.window!r}; expected one of {WINDOWS}")
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.validate_every < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("validate_every and checkpoint_every must be >= 0")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-3, steps=2000, validate_every=100)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


# -- losses ------------------------------------------------------------------

def _pairwise(tensors: Sequence[Optional[Tensor]]) -> Tensor:
    present = [t for t in tensors if t is not None]
    if len(present) < 2:
        raise UsageError("mutual learning needs at least two task outputs")
    terms = [ad.mse_loss(a, b) for a, b in combinations(present, 2)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss_ml_prior(mu_ld_prior, mu_sv_prior, mu_lv_prior) -> Tensor:
    """Sum of pairwise MSEs among the prior images; ``None`` drops a task."""
    return _pairwise([mu_ld_prior, mu_sv_prior, mu_lv_prior])


def loss_ml_out(mu_ld_out, mu_sv_out, mu_lv_out) -> Tensor:
    """Sum of pairwise MSEs among the final outputs; ``None`` drops a task."""
    return _pairwise([mu_ld_out, mu_sv_out, mu_lv_out])


def loss_rc(mu_prior, mu_out, mu_anchor) -> Tensor:
    """``MSE(prior, anchor) + MSE(out, anchor)``; only the anchoring task enters."""
    return ad.add(ad.mse_loss(mu_prior, mu_anchor), ad.mse_loss(mu_out, mu_anchor))


@dataclass
class LossTerms:
    ml_prior: Tensor
    ml_out: Tensor
    rc: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {"L_ml_prior": float(self.ml_prior.data), "L_ml_out": float(self.ml_out.data),
                "L_rc": float(self.rc.data), "L_total": float(self.total.data)}


def loss_total(priors: Dict[str, Tensor], outs: Dict[str, Tensor], anchor_image,
               weights=(1.0, 1.0, 1.0), anchor_task: str = "fvct") -> LossTerms:
    """Weighted objective over the tasks present in ``priors``/``outs``.

    ``anchor_image`` is the FBP input of ``anchor_task`` (FVCT unless that
    task is ablated).
    """
    pick = lambda d: [d.get(t) for t in TASKS]
    ml_prior = loss_ml_prior(*pick(priors))
    ml_out = loss_ml_out(*pick(outs))
    rc = loss_rc(priors[anchor_task], outs[anchor_task], ad.as_tensor(anchor_image))
    wp, wo, wr = weights
    total = ad.add(ad.add(ad.mul(ml_prior, wp), ad.mul(ml_out, wo)), ad.mul(rc, wr))
    return LossTerms(ml_prior, ml_out, rc, total)


# -- ablations ---------------------------------------------------------------

def apply_ablation(variant: str, config: ModelConfig) -> ModelConfig:
    """Model graph of a training variant."""
    if variant not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")
    if variant == "full":
        return config
    if variant == "no_pnm":
        return replace(config, use_pnm=False)
    if variant == "no_ddnm":
        return replace(config, use_ddnm=False)
    dropped = {"no_fvct": "fvct", "no_svct": "svct", "no_lvct": "lvct"}[variant]
    return replace(config, tasks=tuple(t for t in TASKS if t != dropped))


def anchor_task(config: ModelConfig) -> str:
    """Task whose FBP image anchors the consistency loss (FVCT, else SVCT)."""
    return "fvct" if "fvct" in config.tasks else "svct"


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    Moments share the parameter dtype; updates are applied in place.
    """
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype
        g = np.asarray(g, dtype=dt)
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=dt)
            state.v[name] = np.zeros(p.shape, dtype=dt)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += cfg.adam_eps
        step = m / denom
        step *= cfg.lr / c1
        p.data -= step
    return state


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    """Slices of one dataset directory held in memory."""

    root: Path
    slices: List[TaskTriplet]
    phantoms: List[Optional[np.ndarray]]
    window: str = DEFAULT_WINDOW

    @property
    def geometry(self) -> ScanGeometry:
        return self.slices[0].p_ld.geom

    def __len__(self):
        return len(self.slices)

    def batch(self, indices: Sequence[int], task: str) -> Tuple[np.ndarray, np.ndarray]:
        """(embedded sinograms (B,1,V,D), FBP images (B,1,N,N)) for ``task``."""
        p = np.stack([self.slices[i].embedded(task) for i in indices])[:, None]
        mu = np.stack([self.slices[i].image(task).data for i in indices])[:, None]
        return p, mu


def load_dataset(root) -> Dataset:
    """Read every slice listed in ``root/manifest.json``."""
    root = Path(root)
    manifest = io.read_manifest(root)
    slices, phantoms = [], []
    for name in manifest["slices"]:
        trip, phantom = read_slice(root / name)
        slices.append(trip)
        phantoms.append(None if phantom is None else phantom.data)
    if not slices:
        raise InputError(f"{root}: dataset has no slices")
    g0 = slices[0].p_ld.geom
    if any(s.p_ld.geom != g0 or s.masks != slices[0].masks for s in slices):
        raise InputError(f"{root}: slices disagree on geometry or masks")
    window = manifest.get("config", {}).get("window", DEFAULT_WINDOW)
    return Dataset(root, slices, phantoms, window)


def model_config_for(data: Dataset, cfg: TrainConfig) -> ModelConfig:
    trip = data.slices[0]
    images = np.stack([s.mu_ld.data for s in data.slices])
    sinos = np.stack([s.p_ld.data for s in data.slices])
    base = ModelConfig(
        geometry=data.geometry, sv_mask=trip.masks[0], lv_mask=trip.masks[1],
        unet=UNetConfig(stages=cfg.unet_stages, base_channels=cfg.unet_channels),
        window=cfg.window or data.window, norm=Normalization.from_data(images, sinos),
    )
    base.unet.check_input(base.geometry.image_shape)
    base.unet.check_input(base.geometry.sinogram_shape)
    return apply_ablation(cfg.ablation, base)


# -- forward over all tasks --------------------------------------------------

def forward_tasks(data: Dataset, indices: Sequence[int], params: Dict[str, Tensor],
                  config: ModelConfig) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    priors, outs = {}, {}
    for task in config.tasks:
        p, mu = data.batch(indices, task)
        priors[task], outs[task] = subnetwork_forward(p, mu, params, config, task)
    return priors, outs


def _normalised(t: Tensor, norm: Normalization) -> Tensor:
    return ad.scale_shift(t, 1.0 / norm.image_scale, -norm.image_mean / norm.image_scale)


def step_losses(data: Dataset, indices: Sequence[int], params: Dict[str, Tensor], config: ModelConfig,
                weights=(1.0, 1.0, 1.0)) -> LossTerms:
    """Objective of one batch, evaluated on normalised images."""
    priors, outs = forward_tasks(data, indices, params, config)
    n = config.norm
    priors = {k: _normalised(v, n) for k, v in priors.items()}
    outs = {k: _normalised(v, n) for k, v in outs.items()}
    anchor = anchor_task(config)
    _, mu_anchor = data.batch(indices, anchor)
    return loss_total(priors, outs, _normalised(ad.Tensor(mu_anchor), n), weights, anchor)


def reconstruct(trip: TaskTriplet, params: Dict[str, Tensor], config: ModelConfig, task: str) -> np.ndarray:
    """Inference for one slice; returns the final image (N, N)."""
    if task not in config.tasks:
        raise UsageError(f"task {task!r} is not part of this model")
    p = trip.embedded(task)[None, None]
    mu = trip.image(task).data[None, None]
    _, out = subnetwork_forward(p, mu, params, config, task)
    return np.asarray(out.data[0, 0], dtype=np.float64)


def validation_psnr(data: Dataset, params: Dict[str, Tensor], config: ModelConfig,
                    limit: Optional[int] = None) -> Dict[str, float]:
    """Mean PSNR of each task's output against the clean phantoms."""
    idx = [i for i, ph in enumerate(data.phantoms) if ph is not None][:limit]
    if not idx:
        return {}
    refs = [data.phantoms[i] for i in idx]
    rng = float(max(r.max() for r in refs) - min(r.min() for r in refs))
    out = {}
    for task in config.tasks:
        vals = [psnr(reconstruct(data.slices[i], params, config, task), data.phantoms[i], rng) for i in idx]
        out[task] = float(np.mean(vals))
    return out


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    params: Dict[str, Tensor]
    model: ModelConfig
    history: List[dict]
    checkpoint: Path


def _grad_norms(params: Dict[str, Tensor]) -> Dict[str, float]:
    norms = {}
    for ns in sorted(set(NAMESPACES.values())):
        sq = [float(np.sum(np.square(p.grad, dtype=np.float64))) for k, p in params.items()
              if k.startswith(ns + "/") and p.grad is not None]
        if sq:
            norms[ns] = math.sqrt(sum(sq))
    return norms


def checkpoint_meta(model: ModelConfig, cfg: TrainConfig, step: int) -> dict:
    return {"model": model.to_dict(), "train": cfg.to_dict(), "step": step}


def load_model(path) -> Tuple[Dict[str, Tensor], ModelConfig, dict]:
    """Parameters, model config and raw metadata of a checkpoint."""
    arrays, meta = ad.load_checkpoint(path)
    if "model" not in meta:
        raise InputError(f"{path}: checkpoint carries no model description")
    return ad.parameters_from(arrays), ModelConfig.from_dict(meta["model"]), meta


def plot_losses(history: Sequence[dict], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [h["step"] for h in history]
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("L_ml_prior", "L_ml_out", "L_rc", "L_total"):
        a0.semilogy(steps, [max(h[key], 1e-12) for h in history], label=key)
    a0.set_xlabel("step")
    a0.set_title("training loss")
    a0.legend()
    plotted = False
    for task in TASKS:
        pts = [(h["step"], h[f"psnr_{task}"]) for h in history if h.get(f"psnr_{task}") is not None]
        if pts:
            a1.plot(*zip(*pts), marker="o", label=task)
            plotted = True
    a1.set_xlabel("step")
    a1.set_title("validation PSNR (dB)")
    if plotted:
        a1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _write_metrics(path, history: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for h in history:
            w.writerow(["" if h.get(c) is None else (h[c] if c == "step" else repr(float(h[c])))
                        for c in METRIC_COLUMNS])


def train(dataset, cfg: TrainConfig, out_dir, val_dataset=None) -> TrainResult:
    """Run the mutual-learning optimisation.

    Parameters
    ----------
    dataset : path or Dataset
        Training slices; the clean phantoms are never used for training.
    cfg : TrainConfig
    out_dir : path
        Receives ``checkpoint.ctpk``, ``metrics.csv``, ``loss_curve.png``
        and ``config.json`` (plus ``step_NNNNNN.ctpk`` snapshots when
        ``checkpoint_every`` is set).
    val_dataset : path or Dataset, optional
        Slices with phantoms for validation PSNR; defaults to ``dataset``.

    Raises
    ------
    NumericalError
        A non-finite loss or gradient; the message lists the step, the
        loss components and per-task gradient norms.
    """
    data = dataset if isinstance(dataset, Dataset) else load_dataset(dataset)
    val = data if val_dataset is None else (val_dataset if isinstance(val_dataset, Dataset)
                                            else load_dataset(val_dataset))
    model = model_config_for(data, cfg)
    if val.geometry != data.geometry:
        raise InputError("validation and training geometries differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"train": cfg.to_dict(), "model": model.to_dict()}, indent=1))

    history: List[dict] = []
    with ad.precision(cfg.precision):
        params = init_model(model, cfg.seed)
        state = AdamState()
        order = np.random.default_rng([cfg.seed, 0x5EED])
        perm, pos = order.permutation(len(data)), 0
        t0 = time.perf_counter()
        for step in range(1, cfg.steps + 1):
            if pos + cfg.batch > len(perm):
                perm, pos = order.permutation(len(data)), 0
            idx = perm[pos:pos + cfg.batch].tolist()
            pos += cfg.batch
            with ad.Tape() as tape:
                terms = step_losses(data, idx, params, model, cfg.loss_weights)
                ad.backward(terms.total)
            values = terms.values()
            tape.records.clear()  # release activations before the next step builds its graph
            grads = {k: p.grad for k, p in params.items()}
            finite = all(np.all(np.isfinite(g)) for g in grads.values() if g is not None)
            if not (math.isfinite(values["L_total"]) and finite):
                _write_metrics(out / "metrics.csv", history)
                raise NumericalError(
                    f"non-finite training state at step {step}: losses "
                    + ", ".join(f"{k}={v:.6g}" for k, v in values.items())
                    + "; gradient norms " + ", ".join(f"{k}={v:.6g}" for k, v in _grad_norms(params).items())
                )
            adam_step(params, grads, state, cfg)
            row = {"step": step, **values}
            if cfg.validate_every and (step % cfg.validate_every == 0 or step == cfg.steps):
                for task, v in validation_psnr(val, params, model, cfg.max_val_slices).items():
                    row[f"psnr_{task}"] = v
                log.info("step %d  L_total %.5g  %s  (%.1fs)", step, values["L_total"],
                         " ".join(f"{k}={row[k]:.2f}" for k in row if k.startswith("psnr_")),
                         time.perf_counter() - t0)
            history.append(row)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ad.save_checkpoint(out / f"step_{step:06d}.ctpk", params, checkpoint_meta(model, cfg, step))
        ckpt = out / CHECKPOINT_NAME
        ad.save_checkpoint(ckpt, params, checkpoint_meta(model, cfg, cfg.steps))
    _write_metrics(out / "metrics.csv", history)
    if history:
        plot_losses(history, out / "loss_curve.png")
    return TrainResult(params, model, history, ckpt)


def read_metrics(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
    return rows
